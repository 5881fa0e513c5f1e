//! Cross-modal fusion for one body-part group.
//!
//! Two interchangeable paths combine a group's visual tokens with its
//! inertial tokens frame by frame: multi-head cross-attention (the default),
//! and a scan-based variant that concatenates both modalities along the
//! token axis and runs a bidirectional selective scan over the whole
//! flattened sequence.

use crate::params::{Ctx, ParamArena, ParamId};
use crate::ssm::{scan_batched, SsmError, SsmParams};
use crate::tensor::{randn_with, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const FUSION_LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
}

fn shape_err(detail: String) -> FusionError {
    FusionError::Tensor(TensorError::ShapeMismatch { op: "fusion", detail })
}

/// Multi-head cross-attention weights for one group. Queries come from the
/// visual tokens, keys and values from the inertial tokens; `heads · head_dim`
/// equals the embedding width so the residual adds the full projected query.
#[derive(Debug, Clone)]
pub struct CrossAttentionParams {
    pub embed: usize,
    pub heads: usize,
    pub head_dim: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl CrossAttentionParams {
    pub fn init(
        arena: &mut ParamArena,
        prefix: &str,
        embed: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> CrossAttentionParams {
        assert!(heads > 0 && embed % heads == 0, "head count must divide the embedding width");
        let head_dim = embed / heads;
        let wq = arena.insert(format!("{prefix}.wq"), randn_with(rng, &[embed, embed], 0.02));
        let wk = arena.insert(format!("{prefix}.wk"), randn_with(rng, &[embed, embed], 0.02));
        let wv = arena.insert(format!("{prefix}.wv"), randn_with(rng, &[embed, embed], 0.02));
        let wo = arena.insert(format!("{prefix}.wo"), randn_with(rng, &[embed, embed], 0.02));
        let ln_g = arena.insert(format!("{prefix}.ln_g"), Tensor::ones(&[embed]));
        let ln_b = arena.insert(format!("{prefix}.ln_b"), Tensor::zeros(&[embed]));
        CrossAttentionParams { embed, heads, head_dim, wq, wk, wv, wo, ln_g, ln_b }
    }
}

/// Fused output plus the per-head attention weights (`[T, J_g, I_g]` each),
/// kept around so tests and diagnostics can assert on the distributions.
pub struct AttentionDetail {
    pub output: Tensor,
    pub weights: Vec<Tensor>,
}

/// Within-frame cross-attention: every visual token of frame `t` attends
/// over that frame's inertial tokens only. Output keeps the visual token
/// layout; the residual adds the projected queries.
pub fn cross_attention_detail(
    ctx: &mut Ctx,
    visual: &Tensor,
    inertial: &Tensor,
    p: &CrossAttentionParams,
) -> Result<AttentionDetail, FusionError> {
    let (tv, _jg) = match *visual.shape() {
        [t, j, d] if d == p.embed => (t, j),
        _ => return Err(shape_err(format!("visual {:?} vs width {}", visual.shape(), p.embed))),
    };
    match *inertial.shape() {
        [t, _, d] if d == p.embed && t == tv => {}
        _ => {
            return Err(shape_err(format!(
                "inertial {:?} vs visual {:?}",
                inertial.shape(),
                visual.shape()
            )))
        }
    }
    let wq = ctx.param(p.wq);
    let wk = ctx.param(p.wk);
    let wv = ctx.param(p.wv);
    let q = ctx.g.matmul(visual, &wq)?;
    let k = ctx.g.matmul(inertial, &wk)?;
    let v = ctx.g.matmul(inertial, &wv)?;

    let scale = 1.0 / (p.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let off = h * p.head_dim;
        let qh = ctx.g.narrow_last(&q, off, p.head_dim)?;
        let kh = ctx.g.narrow_last(&k, off, p.head_dim)?;
        let vh = ctx.g.narrow_last(&v, off, p.head_dim)?;
        let scores = ctx.g.matmul_nt(&qh, &kh)?;
        let scaled = ctx.g.scale(&scores, scale)?;
        let w = ctx.g.softmax_last(&scaled)?;
        heads.push(ctx.g.matmul(&w, &vh)?);
        weights.push(w);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = ctx.g.concat_last(&refs)?;
    let wo = ctx.param(p.wo);
    let mhca = ctx.g.matmul(&cat, &wo)?;
    let ln_g = ctx.param(p.ln_g);
    let ln_b = ctx.param(p.ln_b);
    let normed = ctx.g.layer_norm(&mhca, &ln_g, &ln_b, FUSION_LN_EPS)?;
    let output = ctx.g.add(&normed, &q)?;
    Ok(AttentionDetail { output, weights })
}

pub fn cross_attention_group(
    ctx: &mut Ctx,
    visual: &Tensor,
    inertial: &Tensor,
    p: &CrossAttentionParams,
) -> Result<Tensor, FusionError> {
    cross_attention_detail(ctx, visual, inertial, p).map(|d| d.output)
}

/// Scan-based fusion for one group. Inertial features are mapped into the
/// visual space, both modalities are projected, convolved, and concatenated
/// token-wise, then a forward and a reverse selective scan over the whole
/// `T·(J_g+I_g)` sequence are summed, gated per modality, and projected to
/// the group width per visual token.
#[derive(Debug, Clone)]
pub struct CrossMambaParams {
    pub embed: usize,
    pub group_dim: usize,
    pub visual_tokens: usize,
    pub inertial_tokens: usize,
    map_w: ParamId,
    map_b: ParamId,
    proj_v: ParamId,
    conv_v: ParamId,
    proj_i: ParamId,
    conv_i: ParamId,
    scan_fwd: SsmParams,
    scan_rev: SsmParams,
    gate_v: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl CrossMambaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        arena: &mut ParamArena,
        prefix: &str,
        embed: usize,
        group_dim: usize,
        visual_tokens: usize,
        inertial_tokens: usize,
        state: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> CrossMambaParams {
        let map_w = arena.insert(format!("{prefix}.map_w"), randn_with(rng, &[embed, embed], 0.02));
        let map_b = arena.insert(format!("{prefix}.map_b"), Tensor::zeros(&[embed]));
        let proj_v = arena.insert(format!("{prefix}.proj_v"), randn_with(rng, &[embed, embed], 0.02));
        let conv_v = arena.insert(format!("{prefix}.conv_v"), randn_with(rng, &[embed, kernel], 0.02));
        let proj_i = arena.insert(format!("{prefix}.proj_i"), randn_with(rng, &[embed, embed], 0.02));
        let conv_i = arena.insert(format!("{prefix}.conv_i"), randn_with(rng, &[embed, kernel], 0.02));
        let scan_fwd = SsmParams::init(arena, &format!("{prefix}.scan_fwd"), embed, state, rng);
        let scan_rev = SsmParams::init(arena, &format!("{prefix}.scan_rev"), embed, state, rng);
        let gate_v = arena.insert(format!("{prefix}.gate_v"), randn_with(rng, &[embed, embed], 0.02));
        let both = (visual_tokens + inertial_tokens) * embed;
        let out_w = arena.insert(
            format!("{prefix}.out_w"),
            randn_with(rng, &[both, visual_tokens * group_dim], 0.02),
        );
        let out_b =
            arena.insert(format!("{prefix}.out_b"), Tensor::zeros(&[visual_tokens * group_dim]));
        CrossMambaParams {
            embed,
            group_dim,
            visual_tokens,
            inertial_tokens,
            map_w,
            map_b,
            proj_v,
            conv_v,
            proj_i,
            conv_i,
            scan_fwd,
            scan_rev,
            gate_v,
            out_w,
            out_b,
        }
    }
}

pub fn cross_mamba_group(
    ctx: &mut Ctx,
    visual: &Tensor,
    inertial: &Tensor,
    p: &CrossMambaParams,
) -> Result<Tensor, FusionError> {
    let t = match *visual.shape() {
        [t, j, d] if j == p.visual_tokens && d == p.embed => t,
        _ => {
            return Err(shape_err(format!(
                "visual {:?} vs [T, {}, {}]",
                visual.shape(),
                p.visual_tokens,
                p.embed
            )))
        }
    };
    match *inertial.shape() {
        [ti, i, d] if i == p.inertial_tokens && d == p.embed && ti == t => {}
        _ => {
            return Err(shape_err(format!(
                "inertial {:?} vs [{t}, {}, {}]",
                inertial.shape(),
                p.inertial_tokens,
                p.embed
            )))
        }
    }
    let jg = p.visual_tokens;
    let ig = p.inertial_tokens;

    let map_w = ctx.param(p.map_w);
    let map_b = ctx.param(p.map_b);
    let mapped = ctx.g.affine(inertial, &map_w, &map_b)?;

    let proj_v = ctx.param(p.proj_v);
    let conv_v = ctx.param(p.conv_v);
    let pv = ctx.g.matmul(visual, &proj_v)?;
    let v_in = ctx.g.conv1d_depthwise(&pv, &conv_v)?;

    let proj_i = ctx.param(p.proj_i);
    let conv_i = ctx.param(p.conv_i);
    let pi = ctx.g.matmul(&mapped, &proj_i)?;
    let i_in = ctx.g.conv1d_depthwise(&pi, &conv_i)?;

    let cat = ctx.g.concat_tokens(&[&v_in, &i_in])?;
    let total = t * (jg + ig);
    let flat = ctx.g.reshape(&cat, &[1, total, p.embed])?;
    let fwd_p = p.scan_fwd.bind(ctx);
    let y_fwd = scan_batched(&mut ctx.g, &flat, &fwd_p)?;
    let rev_idx: Vec<usize> = (0..total).rev().collect();
    let flipped = ctx.g.gather_tokens(&flat, &rev_idx)?;
    let rev_p = p.scan_rev.bind(ctx);
    let y_rev_flipped = scan_batched(&mut ctx.g, &flipped, &rev_p)?;
    let y_rev = ctx.g.gather_tokens(&y_rev_flipped, &rev_idx)?;
    let summed = ctx.g.add(&y_fwd, &y_rev)?;
    let grid = ctx.g.reshape(&summed, &[t, jg + ig, p.embed])?;

    let v_idx: Vec<usize> = (0..jg).collect();
    let i_idx: Vec<usize> = (jg..jg + ig).collect();
    let z_v = ctx.g.gather_tokens(&grid, &v_idx)?;
    let z_i = ctx.g.gather_tokens(&grid, &i_idx)?;

    let gate_v = ctx.param(p.gate_v);
    let gv_lin = ctx.g.matmul(visual, &gate_v)?;
    let gv = ctx.g.silu(&gv_lin)?;
    let zv_gated = ctx.g.mul(&z_v, &gv)?;
    let gi = ctx.g.silu(&mapped)?;
    let zi_gated = ctx.g.mul(&z_i, &gi)?;

    let cat2 = ctx.g.concat_tokens(&[&zv_gated, &zi_gated])?;
    let frame_flat = ctx.g.reshape(&cat2, &[t, (jg + ig) * p.embed])?;
    let out_w = ctx.param(p.out_w);
    let out_b = ctx.param(p.out_b);
    let projected = ctx.g.affine(&frame_flat, &out_w, &out_b)?;
    Ok(ctx.g.reshape(&projected, &[t, jg, p.group_dim])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::selective_scan;
    use crate::tensor::{finite_diff_check, seeded_randn};
    use rand::SeedableRng;

    fn ca_setup(embed: usize, heads: usize, seed: u64) -> (ParamArena, CrossAttentionParams) {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CrossAttentionParams::init(&mut arena, "ca", embed, heads, &mut rng);
        (arena, p)
    }

    #[test]
    fn attention_weights_are_probability_rows() {
        let (arena, p) = ca_setup(8, 2, 1);
        let mut ctx = Ctx::new(&arena);
        let yv = seeded_randn(&[3, 4, 8], 2);
        let yi = seeded_randn(&[3, 2, 8], 3);
        let detail = cross_attention_detail(&mut ctx, &yv, &yi, &p).unwrap();
        assert_eq!(detail.weights.len(), 2);
        for w in &detail.weights {
            assert_eq!(w.shape(), &[3, 4, 2]);
            for row in w.data().chunks(2) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_is_degenerate() {
        let (arena, p) = ca_setup(4, 2, 7);
        let mut ctx = Ctx::new(&arena);
        let yv = seeded_randn(&[2, 3, 4], 8);
        let yi = seeded_randn(&[2, 1, 4], 9);
        let detail = cross_attention_detail(&mut ctx, &yv, &yi, &p).unwrap();
        for w in &detail.weights {
            assert!(w.data().iter().all(|&x| (x - 1.0).abs() < 1e-15));
        }
        // with one key the attended value is query-independent, so z - q is
        // the same row for every query within a frame
        let q = {
            let wq = ctx.param(p.wq);
            ctx.g.matmul(&yv, &wq).unwrap()
        };
        let diff = ctx.g.sub(&detail.output, &q).unwrap();
        let d = diff.data();
        for f in 0..2 {
            let base = &d[f * 3 * 4..f * 3 * 4 + 4];
            for j in 1..3 {
                let row = &d[f * 3 * 4 + j * 4..f * 3 * 4 + (j + 1) * 4];
                for (a, b) in base.iter().zip(row) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (arena, p) = ca_setup(4, 1, 11);
        let mut ctx = Ctx::new(&arena);
        let yv = seeded_randn(&[1, 2, 4], 12);
        let one_row: Vec<f64> = seeded_randn(&[4], 13).data().to_vec();
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend_from_slice(&one_row);
        }
        let yi = Tensor::from_vec(&[1, 3, 4], rows).unwrap();
        let detail = cross_attention_detail(&mut ctx, &yv, &yi, &p).unwrap();
        for w in &detail.weights {
            for &x in w.data() {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_computed_single_head_matches() {
        // H=1, d_k=2, J_g=1, I_g=2: every number recomputed with plain
        // scalar arithmetic, including the softmax and the layer norm.
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = CrossAttentionParams::init(&mut arena, "ca", 2, 1, &mut rng);
        let wq = vec![0.3, -0.2, 0.5, 0.7];
        let wk = vec![-0.4, 0.6, 0.1, 0.2];
        let wv = vec![0.9, -0.5, 0.3, 0.8];
        let wo = vec![0.25, -0.75, 1.1, 0.4];
        arena.set(p.wq, Tensor::from_vec(&[2, 2], wq.clone()).unwrap());
        arena.set(p.wk, Tensor::from_vec(&[2, 2], wk.clone()).unwrap());
        arena.set(p.wv, Tensor::from_vec(&[2, 2], wv.clone()).unwrap());
        arena.set(p.wo, Tensor::from_vec(&[2, 2], wo.clone()).unwrap());
        arena.set(p.ln_g, Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap());
        arena.set(p.ln_b, Tensor::from_vec(&[2], vec![0.05, -0.1]).unwrap());

        let yv_raw = [0.6, -0.3];
        let yi_raw = [[0.2, 0.9], [-0.7, 0.4]];
        let yv = Tensor::from_vec(&[1, 1, 2], yv_raw.to_vec()).unwrap();
        let yi = Tensor::from_vec(&[1, 2, 2], yi_raw.concat()).unwrap();
        let mut ctx = Ctx::new(&arena);
        let z = cross_attention_group(&mut ctx, &yv, &yi, &p).unwrap();

        let matv2 = |x: &[f64], w: &[f64]| {
            [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]]
        };
        let q = matv2(&yv_raw, &wq);
        let k0 = matv2(&yi_raw[0], &wk);
        let k1 = matv2(&yi_raw[1], &wk);
        let v0 = matv2(&yi_raw[0], &wv);
        let v1 = matv2(&yi_raw[1], &wv);
        let scale = 1.0 / 2.0f64.sqrt();
        let s0 = (q[0] * k0[0] + q[1] * k0[1]) * scale;
        let s1 = (q[0] * k1[0] + q[1] * k1[1]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let c = [a0 * v0[0] + a1 * v1[0], a0 * v0[1] + a1 * v1[1]];
        let o = matv2(&c, &wo);
        let mean = (o[0] + o[1]) / 2.0;
        let var = ((o[0] - mean).powi(2) + (o[1] - mean).powi(2)) / 2.0;
        let rstd = 1.0 / (var + FUSION_LN_EPS).sqrt();
        let ln = [
            (o[0] - mean) * rstd * 1.3 + 0.05,
            (o[1] - mean) * rstd * 0.7 - 0.1,
        ];
        let want = [ln[0] + q[0], ln[1] + q[1]];
        for (a, b) in z.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn inertial_token_permutation_leaves_output_unchanged() {
        let (arena, p) = ca_setup(6, 3, 19);
        let yv = seeded_randn(&[2, 3, 6], 20);
        let yi = seeded_randn(&[2, 4, 6], 21);
        let mut ctx = Ctx::new(&arena);
        let base = cross_attention_group(&mut ctx, &yv, &yi, &p).unwrap();
        for perm in [[2usize, 0, 3, 1], [3, 2, 1, 0], [1, 0, 2, 3]] {
            let mut ctx2 = Ctx::new(&arena);
            let shuffled = ctx2.g.gather_tokens(&yi, &perm).unwrap();
            let out = cross_attention_group(&mut ctx2, &yv, &shuffled, &p).unwrap();
            for (a, b) in base.data().iter().zip(out.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_within_frame() {
        let (arena, p) = ca_setup(4, 2, 23);
        let yv = seeded_randn(&[3, 2, 4], 24);
        let yi = seeded_randn(&[3, 2, 4], 25);
        let mut ctx = Ctx::new(&arena);
        let base = cross_attention_group(&mut ctx, &yv, &yi, &p).unwrap();

        // perturb frame 2 of both inputs; frames 0 and 1 must not move
        let mut yv2 = yv.data().to_vec();
        let mut yi2 = yi.data().to_vec();
        for v in &mut yv2[2 * 2 * 4..] {
            *v += 0.5;
        }
        for v in &mut yi2[2 * 2 * 4..] {
            *v -= 0.3;
        }
        let yv2 = Tensor::from_vec(&[3, 2, 4], yv2).unwrap();
        let yi2 = Tensor::from_vec(&[3, 2, 4], yi2).unwrap();
        let mut ctx2 = Ctx::new(&arena);
        let moved = cross_attention_group(&mut ctx2, &yv2, &yi2, &p).unwrap();
        let n = 2 * 2 * 4;
        for (a, b) in base.data()[..n].iter().zip(&moved.data()[..n]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(base.data()[n..].iter().zip(&moved.data()[n..]).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn shape_mismatches_rejected() {
        let (arena, p) = ca_setup(4, 2, 27);
        let mut ctx = Ctx::new(&arena);
        let yv = Tensor::ones(&[2, 3, 4]);
        let bad_width = Tensor::ones(&[2, 2, 6]);
        assert!(cross_attention_group(&mut ctx, &yv, &bad_width, &p).is_err());
        let bad_frames = Tensor::ones(&[3, 2, 4]);
        assert!(cross_attention_group(&mut ctx, &yv, &bad_frames, &p).is_err());
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let (arena, p) = ca_setup(4, 2, 29);
        let yv = seeded_randn(&[3, 2, 4], 30);
        let yi = seeded_randn(&[3, 2, 4], 31);
        let values: Vec<Tensor> = arena.iter().map(|(_, _, t)| t.clone()).collect();
        let report = finite_diff_check(&values, 1e-5, |g, vals| {
            let mut ctx = Ctx::with_overrides(&arena, vals.to_vec());
            std::mem::swap(&mut ctx.g, g);
            let out = (|| {
                let z = cross_attention_group(&mut ctx, &yv, &yi, &p).map_err(|e| match e {
                    FusionError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch { op: "fusion", detail: other.to_string() },
                })?;
                let sq = ctx.g.mul(&z, &z)?;
                ctx.g.mean_all(&sq)
            })();
            std::mem::swap(&mut ctx.g, g);
            out
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "fd report {report:?}");
    }

    fn cm_setup(seed: u64) -> (ParamArena, CrossMambaParams) {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CrossMambaParams::init(&mut arena, "cm", 4, 6, 3, 2, 4, 3, &mut rng);
        (arena, p)
    }

    #[test]
    fn cross_mamba_zero_in_zero_out() {
        let (arena, p) = cm_setup(33);
        let mut ctx = Ctx::new(&arena);
        let yv = Tensor::zeros(&[3, 3, 4]);
        let yi = Tensor::zeros(&[3, 2, 4]);
        let z = cross_mamba_group(&mut ctx, &yv, &yi, &p).unwrap();
        assert_eq!(z.shape(), &[3, 3, 6]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_mamba_left_arm_shape() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let p = CrossMambaParams::init(&mut arena, "cm", 8, 16, 6, 3, 4, 3, &mut rng);
        let mut ctx = Ctx::new(&arena);
        let yv = seeded_randn(&[5, 6, 8], 36);
        let yi = seeded_randn(&[5, 3, 8], 37);
        let z = cross_mamba_group(&mut ctx, &yv, &yi, &p).unwrap();
        assert_eq!(z.shape(), &[5, 6, 16]);
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bidirectional_scan_matches_independent_directions() {
        // recompute the two directional scans through the public
        // single-sequence entry point and compare the summed core
        let (arena, p) = cm_setup(39);
        let t = 3;
        let (jg, ig, de) = (3, 2, 4);
        let yv = seeded_randn(&[t, jg, de], 40);
        let yi = seeded_randn(&[t, ig, de], 41);

        // rebuild the pre-scan sequence exactly as the fused path does
        let mut ctx = Ctx::new(&arena);
        let map_w = ctx.param(p.map_w);
        let map_b = ctx.param(p.map_b);
        let mapped = ctx.g.affine(&yi, &map_w, &map_b).unwrap();
        let proj_v = ctx.param(p.proj_v);
        let conv_v = ctx.param(p.conv_v);
        let pv = ctx.g.matmul(&yv, &proj_v).unwrap();
        let v_in = ctx.g.conv1d_depthwise(&pv, &conv_v).unwrap();
        let proj_i = ctx.param(p.proj_i);
        let conv_i = ctx.param(p.conv_i);
        let pi = ctx.g.matmul(&mapped, &proj_i).unwrap();
        let i_in = ctx.g.conv1d_depthwise(&pi, &conv_i).unwrap();
        let cat = ctx.g.concat_tokens(&[&v_in, &i_in]).unwrap();
        let total = t * (jg + ig);
        let flat2 = ctx.g.reshape(&cat, &[total, de]).unwrap();

        let mut g1 = crate::tensor::GradGraph::new();
        let fwd = selective_scan(&mut g1, &flat2.detached(), &p.scan_fwd, &arena).unwrap();
        let rev_idx: Vec<usize> = (0..total).rev().collect();
        let mut flipped = vec![0.0; total * de];
        for (dst, &src) in rev_idx.iter().enumerate() {
            flipped[dst * de..(dst + 1) * de]
                .copy_from_slice(&flat2.data()[src * de..(src + 1) * de]);
        }
        let flipped = Tensor::from_vec(&[total, de], flipped).unwrap();
        let rev_scanned = selective_scan(&mut g1, &flipped, &p.scan_rev, &arena).unwrap();

        // fused output reproduced from the summed directional scans
        let fwd_p = p.scan_fwd.bind(&mut ctx);
        let flat3 = ctx.g.reshape(&cat, &[1, total, de]).unwrap();
        let y_fwd = scan_batched(&mut ctx.g, &flat3, &fwd_p).unwrap();
        let flipped3 = ctx.g.gather_tokens(&flat3, &rev_idx).unwrap();
        let rev_p = p.scan_rev.bind(&mut ctx);
        let y_rev_f = scan_batched(&mut ctx.g, &flipped3, &rev_p).unwrap();
        let y_rev = ctx.g.gather_tokens(&y_rev_f, &rev_idx).unwrap();
        let summed = ctx.g.add(&y_fwd, &y_rev).unwrap();

        for i in 0..total {
            for d in 0..de {
                let a = summed.data()[i * de + d];
                let b = fwd.data()[i * de + d] + rev_scanned.data()[(total - 1 - i) * de + d];
                assert!((a - b).abs() < 1e-12, "token {i} ch {d}");
            }
        }
    }

    #[test]
    fn cross_mamba_gradients_match_finite_differences() {
        let (arena, p) = cm_setup(43);
        let yv = seeded_randn(&[3, 3, 4], 44);
        let yi = seeded_randn(&[3, 2, 4], 45);
        let values: Vec<Tensor> = arena.iter().map(|(_, _, t)| t.clone()).collect();
        let report = finite_diff_check(&values, 1e-5, |g, vals| {
            let mut ctx = Ctx::with_overrides(&arena, vals.to_vec());
            std::mem::swap(&mut ctx.g, g);
            let out = (|| {
                let z = cross_mamba_group(&mut ctx, &yv, &yi, &p).map_err(|e| match e {
                    FusionError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch { op: "fusion", detail: other.to_string() },
                })?;
                let sq = ctx.g.mul(&z, &z)?;
                ctx.g.mean_all(&sq)
            })();
            std::mem::swap(&mut ctx.g, g);
            out
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "fd report {report:?}");
    }
}
