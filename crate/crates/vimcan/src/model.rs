//! The full pose-estimation network.
//!
//! Pipeline per Fig-style dataflow: embed 2D keypoints and IMU channels,
//! run a skeleton-ordered scan extractor over the visual tokens, split both
//! modalities into kinematic groups, extract and fuse per group, reduce each
//! group to a fixed width, expand back to one feature row per joint, run the
//! global scan stack, and regress root-relative 3D joint positions.

use crate::fusion::{
    cross_attention_group, cross_mamba_group, CrossAttentionParams, CrossMambaParams, FusionError,
};
use crate::params::{Ctx, ParamArena, ParamId};
use crate::skeleton::{group_partition, JointGroup, SkeletonError, IMU_COUNT, JOINT_COUNT};
use crate::ssm::{SpatialFlavor, SsmError, StMambaBlock, DEFAULT_KERNEL, DEFAULT_STATE, LN_EPS, T_MAX};
use crate::tensor::{randn_with, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_FRAMES: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("keypoint frames {visual} vs imu frames {inertial}")]
    LengthMismatch { visual: usize, inertial: usize },
    #[error("need at least {MIN_FRAMES} frames, got {0}")]
    TooShort(usize),
    #[error("sequence length {t} exceeds capacity {max}")]
    SequenceTooLong { t: usize, max: usize },
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "cross-attention")]
    CrossAttention,
    #[serde(rename = "cross-mamba")]
    CrossMamba,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width per token.
    pub d_e: usize,
    /// Group width after reduction.
    pub d_g: usize,
    /// Global scan blocks after group assembly.
    pub global_blocks: usize,
    /// Body-part partition: 0 (single group), 3, or 5.
    pub groups: usize,
    /// Attention heads for the cross-attention fusion path.
    pub heads: usize,
    pub fusion: FusionKind,
    /// SSM state dimension per channel.
    pub state: usize,
    /// Depthwise conv kernel length (odd).
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_e: 64,
            d_g: 256,
            global_blocks: 5,
            groups: 5,
            heads: 8,
            fusion: FusionKind::CrossAttention,
            state: DEFAULT_STATE,
            kernel: DEFAULT_KERNEL,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            d_e: 8,
            d_g: 16,
            global_blocks: 1,
            groups: 5,
            heads: 2,
            fusion: FusionKind::CrossAttention,
            state: 4,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_e == 0 || self.d_g == 0 {
            return bad(format!("widths d_e={} d_g={}", self.d_e, self.d_g));
        }
        if self.heads == 0 || self.d_e % self.heads != 0 {
            return bad(format!("heads {} must divide d_e {}", self.heads, self.d_e));
        }
        if !matches!(self.groups, 0 | 3 | 5) {
            return bad(format!("groups {} not in {{0, 3, 5}}", self.groups));
        }
        if self.global_blocks == 0 {
            return bad("global_blocks must be at least 1".into());
        }
        if self.state == 0 {
            return bad("state must be at least 1".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        Ok(())
    }
}

enum GroupFusion {
    Attention(CrossAttentionParams),
    Mamba(CrossMambaParams),
}

struct GroupPipeline {
    group: JointGroup,
    inertial_extractor: StMambaBlock,
    fusion: GroupFusion,
    post: StMambaBlock,
    reduce_w: ParamId,
    reduce_b: ParamId,
}

pub struct VimcanModel {
    pub cfg: ModelConfig,
    pub arena: ParamArena,
    visual_embed_w: ParamId,
    visual_embed_b: ParamId,
    inertial_embed_w: ParamId,
    inertial_embed_b: ParamId,
    visual_extractor: StMambaBlock,
    groups: Vec<GroupPipeline>,
    expand_w: ParamId,
    expand_b: ParamId,
    global: Vec<StMambaBlock>,
    head_ln_g: ParamId,
    head_ln_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<VimcanModel, ModelError> {
    cfg.validate()?;
    let partition = group_partition(cfg.groups)?.groups;
    let mut arena = ParamArena::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);

    let visual_embed_w = arena.insert("visual_embed.w", randn_with(rng, &[2, cfg.d_e], 0.02));
    let visual_embed_b = arena.insert("visual_embed.b", Tensor::zeros(&[cfg.d_e]));
    let inertial_embed_w = arena.insert("inertial_embed.w", randn_with(rng, &[4, cfg.d_e], 0.02));
    let inertial_embed_b = arena.insert("inertial_embed.b", Tensor::zeros(&[cfg.d_e]));

    let visual_extractor = StMambaBlock::init(
        &mut arena,
        "visual_extractor",
        cfg.d_e,
        JOINT_COUNT,
        cfg.state,
        cfg.kernel,
        SpatialFlavor::SkeletonAware,
        rng,
    );

    let mut groups = Vec::with_capacity(partition.len());
    for g in partition {
        let jg = g.joints.len();
        let ig = g.imus.len();
        let prefix = format!("group.{}", g.name);
        let inertial_extractor = StMambaBlock::init(
            &mut arena,
            &format!("{prefix}.inertial"),
            cfg.d_e,
            ig,
            cfg.state,
            cfg.kernel,
            SpatialFlavor::PartAware,
            rng,
        );
        // the attention path keeps tokens at d_e; the scan path already
        // projects them to d_g, so everything downstream follows suit
        let (fusion, post_width) = match cfg.fusion {
            FusionKind::CrossAttention => (
                GroupFusion::Attention(CrossAttentionParams::init(
                    &mut arena,
                    &format!("{prefix}.fuse"),
                    cfg.d_e,
                    cfg.heads,
                    rng,
                )),
                cfg.d_e,
            ),
            FusionKind::CrossMamba => (
                GroupFusion::Mamba(CrossMambaParams::init(
                    &mut arena,
                    &format!("{prefix}.fuse"),
                    cfg.d_e,
                    cfg.d_g,
                    jg,
                    ig,
                    cfg.state,
                    cfg.kernel,
                    rng,
                )),
                cfg.d_g,
            ),
        };
        let post = StMambaBlock::init(
            &mut arena,
            &format!("{prefix}.post"),
            post_width,
            jg,
            cfg.state,
            cfg.kernel,
            SpatialFlavor::PartAware,
            rng,
        );
        let reduce_w = arena.insert(
            format!("{prefix}.reduce.w"),
            randn_with(rng, &[jg * post_width, cfg.d_g], 0.02),
        );
        let reduce_b = arena.insert(format!("{prefix}.reduce.b"), Tensor::zeros(&[cfg.d_g]));
        groups.push(GroupPipeline { group: g, inertial_extractor, fusion, post, reduce_w, reduce_b });
    }

    let gcount = groups.len();
    let expand_w = arena.insert(
        "expand.w",
        randn_with(rng, &[gcount * cfg.d_g, JOINT_COUNT * cfg.d_g], 0.02),
    );
    let expand_b = arena.insert("expand.b", Tensor::zeros(&[JOINT_COUNT * cfg.d_g]));

    let mut global = Vec::with_capacity(cfg.global_blocks);
    for i in 0..cfg.global_blocks {
        global.push(StMambaBlock::init(
            &mut arena,
            &format!("global.{i}"),
            cfg.d_g,
            JOINT_COUNT,
            cfg.state,
            cfg.kernel,
            SpatialFlavor::SkeletonAware,
            rng,
        ));
    }

    let head_ln_g = arena.insert("head.ln_g", Tensor::ones(&[cfg.d_g]));
    let head_ln_b = arena.insert("head.ln_b", Tensor::zeros(&[cfg.d_g]));
    let head_w = arena.insert("head.w", randn_with(rng, &[cfg.d_g, 3], 0.02));
    let head_b = arena.insert("head.b", Tensor::zeros(&[3]));

    Ok(VimcanModel {
        cfg: cfg.clone(),
        arena,
        visual_embed_w,
        visual_embed_b,
        inertial_embed_w,
        inertial_embed_b,
        visual_extractor,
        groups,
        expand_w,
        expand_b,
        global,
        head_ln_g,
        head_ln_b,
        head_w,
        head_b,
    })
}

impl VimcanModel {
    pub fn count_params(&self) -> usize {
        self.arena.param_count()
    }

    /// Forward pass: `[T, 17, 2]` keypoints plus `[T, 6, 4]` orientation
    /// quaternions to `[T, 17, 3]` root-relative joint positions.
    pub fn forward(&self, ctx: &mut Ctx, kps: &Tensor, imu: &Tensor) -> Result<Tensor, ModelError> {
        let t = match *kps.shape() {
            [t, j, 2] if j == JOINT_COUNT => t,
            _ => {
                return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                    op: "forward",
                    detail: format!("keypoints {:?}, expected [T, 17, 2]", kps.shape()),
                }))
            }
        };
        let ti = match *imu.shape() {
            [ti, i, 4] if i == IMU_COUNT => ti,
            _ => {
                return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                    op: "forward",
                    detail: format!("imu {:?}, expected [T, 6, 4]", imu.shape()),
                }))
            }
        };
        if t != ti {
            return Err(ModelError::LengthMismatch { visual: t, inertial: ti });
        }
        if t < MIN_FRAMES {
            return Err(ModelError::TooShort(t));
        }
        if t > T_MAX {
            return Err(ModelError::SequenceTooLong { t, max: T_MAX });
        }

        let vw = ctx.param(self.visual_embed_w);
        let vb = ctx.param(self.visual_embed_b);
        let v_emb = ctx.g.affine(kps, &vw, &vb)?;
        let iw = ctx.param(self.inertial_embed_w);
        let ib = ctx.param(self.inertial_embed_b);
        let i_emb = ctx.g.affine(imu, &iw, &ib)?;

        let v_feats = self.visual_extractor.forward(ctx, &v_emb)?;

        let mut reduced = Vec::with_capacity(self.groups.len());
        for gp in &self.groups {
            let yi_tokens = ctx.g.gather_tokens(&i_emb, &gp.group.imus)?;
            let yi = gp.inertial_extractor.forward(ctx, &yi_tokens)?;
            let yv = ctx.g.gather_tokens(&v_feats, &gp.group.joints)?;
            let fused = match &gp.fusion {
                GroupFusion::Attention(p) => cross_attention_group(ctx, &yv, &yi, p)?,
                GroupFusion::Mamba(p) => cross_mamba_group(ctx, &yv, &yi, p)?,
            };
            let refined = gp.post.forward(ctx, &fused)?;
            let jg = gp.group.joints.len();
            let w = refined.shape()[2];
            let flat = ctx.g.reshape(&refined, &[t, jg * w])?;
            let rw = ctx.param(gp.reduce_w);
            let rb = ctx.param(gp.reduce_b);
            reduced.push(ctx.g.affine(&flat, &rw, &rb)?);
        }
        let refs: Vec<&Tensor> = reduced.iter().collect();
        let stacked = if refs.len() == 1 { reduced[0].clone() } else { ctx.g.concat_last(&refs)? };

        let ew = ctx.param(self.expand_w);
        let eb = ctx.param(self.expand_b);
        let expanded = ctx.g.affine(&stacked, &ew, &eb)?;
        let mut x = ctx.g.reshape(&expanded, &[t, JOINT_COUNT, self.cfg.d_g])?;
        for block in &self.global {
            x = block.forward(ctx, &x)?;
        }

        let hg = ctx.param(self.head_ln_g);
        let hb = ctx.param(self.head_ln_b);
        let normed = ctx.g.layer_norm(&x, &hg, &hb, LN_EPS)?;
        let hw = ctx.param(self.head_w);
        let hbias = ctx.param(self.head_b);
        let pose = ctx.g.affine(&normed, &hw, &hbias)?;

        // root-relative: subtract the predicted Hips row from every joint
        let root_idx = vec![0usize; JOINT_COUNT];
        let roots = ctx.g.gather_tokens(&pose, &root_idx)?;
        Ok(ctx.g.sub(&pose, &roots)?)
    }
}

/// Outcome of [`finite_difference_audit`]: the central-difference sweep
/// plus the largest relative gap between the production loss gradient and
/// the pinned-scale surrogate it must match.
#[derive(Debug)]
pub struct GradAudit {
    pub fd: crate::tensor::FdReport,
    pub production_gap: f64,
}

/// Sweeps central differences over one representative tensor per pipeline
/// stage and compares against the reverse-mode gradient of the training
/// loss. The normalized position term rescales ground truth by a factor
/// computed outside the graph, which differentiation treats as constant;
/// the numeric probe therefore runs on a surrogate with that factor pinned
/// at its base value, and `production_gap` certifies that the surrogate
/// backprops identically to the production loss.
pub fn finite_difference_audit(
    cfg: &ModelConfig,
    t: usize,
    eps: f64,
) -> Result<GradAudit, ModelError> {
    use crate::loss::{mpjpe_loss, mpjve_loss, tc_loss, total_loss, LossError, LossWeights};
    use crate::tensor::{finite_diff_check, seeded_randn, GradGraph};

    fn plain(e: LossError) -> TensorError {
        match e {
            LossError::Tensor(t) => t,
            other => TensorError::ShapeMismatch { op: "loss", detail: other.to_string() },
        }
    }

    let model = init_model(cfg, 0)?;
    let kps = seeded_randn(&[t, JOINT_COUNT, 2], 30);
    let imu = seeded_randn(&[t, IMU_COUNT, 4], 31);
    let gt_raw = seeded_randn(&[t, JOINT_COUNT, 3], 32);
    let gt = Tensor::from_vec(
        &[t, JOINT_COUNT, 3],
        gt_raw.data().iter().map(|v| 0.1 * v).collect(),
    )?;
    let lw = LossWeights::default();

    let mut base = Ctx::frozen(&model.arena);
    let pred0 = model.forward(&mut base, &kps, &imu)?;
    let dot: f64 = gt.data().iter().zip(pred0.data()).map(|(a, b)| a * b).sum();
    let nrm: f64 = gt.data().iter().map(|a| a * a).sum();
    let k0 = dot / nrm;
    let scaled_gt =
        Tensor::from_vec(&[t, JOINT_COUNT, 3], gt.data().iter().map(|v| k0 * v).collect())?;

    let frozen_total = |g: &mut GradGraph, pred: &Tensor| -> Result<Tensor, TensorError> {
        let m = mpjpe_loss(g, pred, &gt).map_err(plain)?;
        let n = mpjpe_loss(g, pred, &scaled_gt).map_err(plain)?;
        let v = mpjve_loss(g, pred, &gt).map_err(plain)?;
        let tc = tc_loss(g, pred, &lw.tc_joint_weights).map_err(plain)?;
        let a = g.scale(&m, lw.lambda_mpjpe)?;
        let b = g.scale(&n, lw.lambda_nmpjpe)?;
        let c = g.scale(&v, lw.lambda_v)?;
        let d = g.scale(&tc, lw.lambda_tc)?;
        let ab = g.add(&a, &b)?;
        let abc = g.add(&ab, &c)?;
        g.add(&abc, &d)
    };

    // one tensor per stage; suffix match keeps the list valid across group
    // partitions, and the fusion entries depend on which path is active
    let mut wanted: Vec<&str> = vec![
        "visual_embed.w",
        "inertial_embed.w",
        "visual_extractor.spatial_pe",
        "visual_extractor.spatial.in_proj",
        ".temporal.temporal_fwd.w_b",
        ".inertial.spatial_pe",
        ".inertial.temporal.in_proj",
        ".post.spatial.conv",
        ".post.spatial.spatial_rev.a_log",
        ".reduce.b",
        "expand.b",
        "global.0.temporal.mlp_w1",
        "head.ln_g",
        "head.w",
    ];
    match cfg.fusion {
        FusionKind::CrossAttention => {
            wanted.extend([".fuse.wq", ".fuse.wk", ".fuse.ln_g"]);
        }
        FusionKind::CrossMamba => {
            wanted.extend([".fuse.map_w", ".fuse.gate_v", ".fuse.scan_fwd.w_c"]);
        }
    }
    let mut ids: Vec<ParamId> = Vec::new();
    for pat in wanted {
        let id = model
            .arena
            .iter()
            .find(|(_, name, _)| {
                if pat.starts_with('.') { name.contains(pat) } else { *name == pat }
            })
            .map(|(id, _, _)| id)
            .unwrap_or_else(|| panic!("no parameter matches {pat}"));
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let at: Vec<Tensor> = ids.iter().map(|&id| model.arena.get(id).clone()).collect();

    let fd = finite_diff_check(&at, eps, |g, vals| {
        let mut all: Vec<Tensor> = model.arena.iter().map(|(_, _, t)| t.detached()).collect();
        for (slot, v) in ids.iter().zip(vals) {
            all[slot.0] = v.clone();
        }
        let mut ctx = Ctx::with_overrides(&model.arena, all);
        std::mem::swap(&mut ctx.g, g);
        let out = (|| {
            let pred = model.forward(&mut ctx, &kps, &imu).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::ShapeMismatch { op: "model", detail: other.to_string() },
            })?;
            frozen_total(&mut ctx.g, &pred)
        })();
        std::mem::swap(&mut ctx.g, g);
        out
    })?;

    let mut ctx_p = Ctx::new(&model.arena);
    let pred_p = model.forward(&mut ctx_p, &kps, &imu)?;
    let lb = total_loss(&mut ctx_p.g, &pred_p, &gt, &lw).map_err(plain)?;
    let grads_p = ctx_p.grads(&lb.total)?;

    let mut ctx_s = Ctx::new(&model.arena);
    let pred_s = model.forward(&mut ctx_s, &kps, &imu)?;
    let total_s = frozen_total(&mut ctx_s.g, &pred_s)?;
    let grads_s = ctx_s.grads(&total_s)?;

    let mut production_gap = 0.0f64;
    for (gp, gs) in grads_p.iter().zip(&grads_s) {
        for (a, b) in gp.data().iter().zip(gs.data()) {
            let scale = a.abs().max(b.abs()).max(1.0);
            production_gap = production_gap.max((a - b).abs() / scale);
        }
    }
    Ok(GradAudit { fd, production_gap })
}
