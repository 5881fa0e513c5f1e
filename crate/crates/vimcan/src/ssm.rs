//! Selective-scan sequence blocks.
//!
//! The recurrence is a diagonal linear state space with input-dependent
//! step size, input matrix, and readout. Four directional passes over the
//! frame/token grid (spatial forward/reverse, temporal forward/reverse) are
//! summed, gated, and wrapped in residual MLPs. Sequences of any length up
//! to the positional-encoding capacity run as-is; there is no padding path.

use crate::params::{Ctx, ParamArena, ParamId};
use crate::skeleton::{default_topology, skeleton_scan_order, JOINT_COUNT};
use crate::tensor::{randn_with, GradGraph, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_STATE: usize = 16;
pub const DEFAULT_KERNEL: usize = 3;
pub const T_MAX: usize = 81;

/// Step-size projection bottleneck width.
pub fn dt_rank(width: usize) -> usize {
    (width / 16).max(1)
}

/// Softplus(b) ≈ 0.1 at init keeps early dynamics slow and stable.
pub fn dt_bias_init() -> f64 {
    (0.1f64.exp() - 1.0).ln()
}

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("bad token permutation: {0}")]
    BadPermutation(String),
    #[error("sequence length {t} exceeds block capacity {max}")]
    SequenceTooLong { t: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One directional scan's parameters over `width` channels and `state`
/// hidden dimensions. The step-size projection is factored through a small
/// rank to keep the parameter budget near the published model sizes.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub dt_down: ParamId, // [W, r]
    pub dt_up: ParamId,   // [r, W]
    pub dt_bias: ParamId, // [W]
    pub w_b: ParamId,     // [W, N]
    pub w_c: ParamId,     // [W, N]
    pub a_log: ParamId,   // [W, N]
    pub d_skip: ParamId,  // [W]
}

pub(crate) struct BoundSsm {
    dt_down: Tensor,
    dt_up: Tensor,
    dt_bias: Tensor,
    w_b: Tensor,
    w_c: Tensor,
    a_log: Tensor,
    d_skip: Tensor,
}

impl SsmParams {
    pub fn init(arena: &mut ParamArena, prefix: &str, width: usize, state: usize, rng: &mut ChaCha8Rng) -> SsmParams {
        let r = dt_rank(width);
        let dt_down = arena.insert(format!("{prefix}.dt_down"), randn_with(rng, &[width, r], 0.02));
        let dt_up = arena.insert(format!("{prefix}.dt_up"), randn_with(rng, &[r, width], 0.02));
        let dt_bias = arena
            .insert(format!("{prefix}.dt_bias"), Tensor::full(&[width], dt_bias_init()).unwrap());
        let w_b = arena.insert(format!("{prefix}.w_b"), randn_with(rng, &[width, state], 0.02));
        let w_c = arena.insert(format!("{prefix}.w_c"), randn_with(rng, &[width, state], 0.02));
        // A = -exp(a_log) log-spaced from -1 to -state per channel
        let mut al = Vec::with_capacity(width * state);
        for _ in 0..width {
            for n in 0..state {
                let frac = if state > 1 { n as f64 / (state - 1) as f64 } else { 0.0 };
                al.push(frac * (state as f64).ln());
            }
        }
        let a_log = arena.insert(format!("{prefix}.a_log"), Tensor::from_vec(&[width, state], al).unwrap());
        let d_skip = arena.insert(format!("{prefix}.d_skip"), Tensor::ones(&[width]));
        SsmParams { dt_down, dt_up, dt_bias, w_b, w_c, a_log, d_skip }
    }

    pub(crate) fn bind(&self, ctx: &mut Ctx) -> BoundSsm {
        BoundSsm {
            dt_down: ctx.param(self.dt_down),
            dt_up: ctx.param(self.dt_up),
            dt_bias: ctx.param(self.dt_bias),
            w_b: ctx.param(self.w_b),
            w_c: ctx.param(self.w_c),
            a_log: ctx.param(self.a_log),
            d_skip: ctx.param(self.d_skip),
        }
    }
}

/// Batched scan over `[B, L, W]`: every batch row starts from zero state.
pub(crate) fn scan_batched(g: &mut GradGraph, u: &Tensor, p: &BoundSsm) -> Result<Tensor, SsmError> {
    let dt_low = g.matmul(u, &p.dt_down)?;
    let dt_lin = g.matmul(&dt_low, &p.dt_up)?;
    let dt_aff = g.add_bias(&dt_lin, &p.dt_bias)?;
    let delta = g.softplus(&dt_aff)?;
    let bmat = g.matmul(u, &p.w_b)?;
    let cmat = g.matmul(u, &p.w_c)?;
    Ok(g.scan_core(u, &delta, &bmat, &cmat, &p.a_log, &p.d_skip)?)
}

/// Single-sequence selective scan, `[L, W] -> [L, W]`.
pub fn selective_scan(
    g: &mut GradGraph,
    u: &Tensor,
    params: &SsmParams,
    arena: &ParamArena,
) -> Result<Tensor, SsmError> {
    let (l, d) = match *u.shape() {
        [l, d] => (l, d),
        _ => {
            return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                op: "selective_scan",
                detail: format!("expected [L, W], got {:?}", u.shape()),
            }))
        }
    };
    if l == 0 {
        return Err(SsmError::EmptySequence);
    }
    let bound = BoundSsm {
        dt_down: g.constant(arena.get(params.dt_down)),
        dt_up: g.constant(arena.get(params.dt_up)),
        dt_bias: g.constant(arena.get(params.dt_bias)),
        w_b: g.constant(arena.get(params.w_b)),
        w_c: g.constant(arena.get(params.w_c)),
        a_log: g.constant(arena.get(params.a_log)),
        d_skip: g.constant(arena.get(params.d_skip)),
    };
    let u3 = g.reshape(u, &[1, l, d])?;
    let y = scan_batched(g, &u3, &bound)?;
    Ok(g.reshape(&y, &[l, d])?)
}

fn inverse_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

fn check_perm(order: &[usize], s: usize) -> Result<(), SsmError> {
    if order.len() != s {
        return Err(SsmError::BadPermutation(format!("{} entries for {s} tokens", order.len())));
    }
    let mut seen = vec![false; s];
    for &v in order {
        if v >= s || seen[v] {
            return Err(SsmError::BadPermutation(format!("{order:?}")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// Four directional scans over a `[T, S, W]` grid, summed in fixed order.
///
/// Spatial passes run within each frame over its tokens (in `spatial_order`,
/// then the reverse of it), resetting state at every frame boundary.
/// Temporal passes run along each token's trajectory over frames. Outputs
/// are scattered back to original token positions before the sum.
pub(crate) fn ss2d(
    g: &mut GradGraph,
    x: &Tensor,
    dirs: &[BoundSsm; 4],
    spatial_order: &[usize],
) -> Result<Tensor, SsmError> {
    let (t, s) = match *x.shape() {
        [t, s, _] => (t, s),
        _ => {
            return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                op: "ss2d",
                detail: format!("expected [T, S, W], got {:?}", x.shape()),
            }))
        }
    };
    check_perm(spatial_order, s)?;
    let inv = inverse_perm(spatial_order);
    let rev: Vec<usize> = spatial_order.iter().rev().copied().collect();
    let inv_rev = inverse_perm(&rev);

    // spatial forward: frames as batch rows, tokens as scan steps
    let xs = g.gather_tokens(x, spatial_order)?;
    let ys = scan_batched(g, &xs, &dirs[0])?;
    let y1 = g.gather_tokens(&ys, &inv)?;

    let xr = g.gather_tokens(x, &rev)?;
    let yr = scan_batched(g, &xr, &dirs[1])?;
    let y2 = g.gather_tokens(&yr, &inv_rev)?;

    // temporal forward: tokens as batch rows, frames as scan steps
    let xt = g.transpose01(x)?;
    let yt = scan_batched(g, &xt, &dirs[2])?;
    let y3 = g.transpose01(&yt)?;

    let tidx_rev: Vec<usize> = (0..t).rev().collect();
    let xtr = g.gather_tokens(&xt, &tidx_rev)?;
    let ytr = scan_batched(g, &xtr, &dirs[3])?;
    let ytn = g.gather_tokens(&ytr, &tidx_rev)?;
    let y4 = g.transpose01(&ytn)?;

    let s12 = g.add(&y1, &y2)?;
    let s123 = g.add(&s12, &y3)?;
    Ok(g.add(&s123, &y4)?)
}

/// The raw four-direction grid scan with parameters read from the arena as
/// fixed values. Direction order: spatial forward, spatial reverse, temporal
/// forward, temporal reverse.
pub fn grid_scan(
    g: &mut GradGraph,
    x: &Tensor,
    dirs: &[SsmParams; 4],
    arena: &ParamArena,
    spatial_order: &[usize],
) -> Result<Tensor, SsmError> {
    fn bind(g: &mut GradGraph, arena: &ParamArena, p: &SsmParams) -> BoundSsm {
        BoundSsm {
            dt_down: g.constant(arena.get(p.dt_down)),
            dt_up: g.constant(arena.get(p.dt_up)),
            dt_bias: g.constant(arena.get(p.dt_bias)),
            w_b: g.constant(arena.get(p.w_b)),
            w_c: g.constant(arena.get(p.w_c)),
            a_log: g.constant(arena.get(p.a_log)),
            d_skip: g.constant(arena.get(p.d_skip)),
        }
    }
    let bound = [
        bind(g, arena, &dirs[0]),
        bind(g, arena, &dirs[1]),
        bind(g, arena, &dirs[2]),
        bind(g, arena, &dirs[3]),
    ];
    ss2d(g, x, &bound, spatial_order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanAxis {
    Spatial,
    Temporal,
}

/// Gated scan block: project, chunk, depthwise-convolve along the active
/// axis, scan in four directions, normalize, gate, project back, then a
/// residual MLP.
#[derive(Debug, Clone)]
pub struct BisstssmBlock {
    pub width: usize,
    pub axis: ScanAxis,
    in_proj: ParamId,
    conv: ParamId,
    dirs: [SsmParams; 4],
    scan_ln_g: ParamId,
    scan_ln_b: ParamId,
    out_proj: ParamId,
    mlp_ln_g: ParamId,
    mlp_ln_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

impl BisstssmBlock {
    pub fn init(
        arena: &mut ParamArena,
        prefix: &str,
        width: usize,
        state: usize,
        kernel: usize,
        axis: ScanAxis,
        rng: &mut ChaCha8Rng,
    ) -> BisstssmBlock {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let in_proj = arena.insert(format!("{prefix}.in_proj"), randn_with(rng, &[width, 2 * width], 0.02));
        let conv = arena.insert(format!("{prefix}.conv"), randn_with(rng, &[width, kernel], 0.02));
        let dir_names = ["spatial_fwd", "spatial_rev", "temporal_fwd", "temporal_rev"];
        let dirs: Vec<SsmParams> = dir_names
            .iter()
            .map(|d| SsmParams::init(arena, &format!("{prefix}.{d}"), width, state, rng))
            .collect();
        let scan_ln_g = arena.insert(format!("{prefix}.scan_ln_g"), Tensor::ones(&[width]));
        let scan_ln_b = arena.insert(format!("{prefix}.scan_ln_b"), Tensor::zeros(&[width]));
        let out_proj = arena.insert(format!("{prefix}.out_proj"), randn_with(rng, &[width, width], 0.02));
        let mlp_ln_g = arena.insert(format!("{prefix}.mlp_ln_g"), Tensor::ones(&[width]));
        let mlp_ln_b = arena.insert(format!("{prefix}.mlp_ln_b"), Tensor::zeros(&[width]));
        let mlp_w1 = arena.insert(format!("{prefix}.mlp_w1"), randn_with(rng, &[width, 2 * width], 0.02));
        let mlp_b1 = arena.insert(format!("{prefix}.mlp_b1"), Tensor::zeros(&[2 * width]));
        let mlp_w2 = arena.insert(format!("{prefix}.mlp_w2"), randn_with(rng, &[2 * width, width], 0.02));
        let mlp_b2 = arena.insert(format!("{prefix}.mlp_b2"), Tensor::zeros(&[width]));
        BisstssmBlock {
            width,
            axis,
            in_proj,
            conv,
            dirs: [dirs[0].clone(), dirs[1].clone(), dirs[2].clone(), dirs[3].clone()],
            scan_ln_g,
            scan_ln_b,
            out_proj,
            mlp_ln_g,
            mlp_ln_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: &Tensor,
        spatial_order: &[usize],
    ) -> Result<Tensor, SsmError> {
        let w = self.width;
        match *x.shape() {
            [_, _, d] if d == w => {}
            _ => {
                return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                    op: "block_forward",
                    detail: format!("expected [T, S, {w}], got {:?}", x.shape()),
                }))
            }
        }
        let in_w = ctx.param(self.in_proj);
        let both = ctx.g.matmul(x, &in_w)?;
        let fx = ctx.g.narrow_last(&both, 0, w)?;
        let fz = ctx.g.narrow_last(&both, w, w)?;

        let kernels = ctx.param(self.conv);
        let fx_conv = match self.axis {
            // convolution runs over tokens in scan order, then scatters back
            ScanAxis::Spatial => {
                let perm = ctx.g.gather_tokens(&fx, spatial_order)?;
                let c = ctx.g.conv1d_depthwise(&perm, &kernels)?;
                ctx.g.gather_tokens(&c, &inverse_perm(spatial_order))?
            }
            ScanAxis::Temporal => {
                let tr = ctx.g.transpose01(&fx)?;
                let c = ctx.g.conv1d_depthwise(&tr, &kernels)?;
                ctx.g.transpose01(&c)?
            }
        };
        let act = ctx.g.silu(&fx_conv)?;
        let dirs = [
            self.dirs[0].bind(ctx),
            self.dirs[1].bind(ctx),
            self.dirs[2].bind(ctx),
            self.dirs[3].bind(ctx),
        ];
        let scan = ss2d(&mut ctx.g, &act, &dirs, spatial_order)?;
        let ln_g = ctx.param(self.scan_ln_g);
        let ln_b = ctx.param(self.scan_ln_b);
        let normed = ctx.g.layer_norm(&scan, &ln_g, &ln_b, LN_EPS)?;
        let gate = ctx.g.sigmoid(&fz)?;
        let gated = ctx.g.mul(&normed, &gate)?;
        let out_w = ctx.param(self.out_proj);
        let projected = ctx.g.matmul(&gated, &out_w)?;
        let y_ssm = ctx.g.add(&projected, x)?;

        let mg = ctx.param(self.mlp_ln_g);
        let mb = ctx.param(self.mlp_ln_b);
        let mlp_in = ctx.g.layer_norm(&y_ssm, &mg, &mb, LN_EPS)?;
        let w1 = ctx.param(self.mlp_w1);
        let b1 = ctx.param(self.mlp_b1);
        let h = ctx.g.affine(&mlp_in, &w1, &b1)?;
        let h = ctx.g.gelu(&h)?;
        let w2 = ctx.param(self.mlp_w2);
        let b2 = ctx.param(self.mlp_b2);
        let m = ctx.g.affine(&h, &w2, &b2)?;
        Ok(ctx.g.add(&m, &y_ssm)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialFlavor {
    /// Spatial scans follow the kinematic tree order over all 17 joints.
    SkeletonAware,
    /// Spatial scans use plain index order within a body-part group.
    PartAware,
}

/// A spatial block then a temporal block, each behind its learnable
/// positional encoding. Accepts any `T ≤ t_max` without padding.
#[derive(Debug, Clone)]
pub struct StMambaBlock {
    pub width: usize,
    pub tokens: usize,
    pub t_max: usize,
    spatial_pe: ParamId,
    temporal_pe: ParamId,
    spatial: BisstssmBlock,
    temporal: BisstssmBlock,
    scan_order: Vec<usize>,
    identity_order: Vec<usize>,
}

impl StMambaBlock {
    pub fn init(
        arena: &mut ParamArena,
        prefix: &str,
        width: usize,
        tokens: usize,
        state: usize,
        kernel: usize,
        flavor: SpatialFlavor,
        rng: &mut ChaCha8Rng,
    ) -> StMambaBlock {
        let scan_order = match flavor {
            SpatialFlavor::SkeletonAware => {
                assert_eq!(tokens, JOINT_COUNT, "skeleton ordering needs the full joint set");
                skeleton_scan_order(&default_topology()).expect("default topology is a tree").to_vec()
            }
            SpatialFlavor::PartAware => (0..tokens).collect(),
        };
        let spatial_pe =
            arena.insert(format!("{prefix}.spatial_pe"), randn_with(rng, &[tokens, width], 0.02));
        let temporal_pe =
            arena.insert(format!("{prefix}.temporal_pe"), randn_with(rng, &[T_MAX, width], 0.02));
        let spatial = BisstssmBlock::init(
            arena,
            &format!("{prefix}.spatial"),
            width,
            state,
            kernel,
            ScanAxis::Spatial,
            rng,
        );
        let temporal = BisstssmBlock::init(
            arena,
            &format!("{prefix}.temporal"),
            width,
            state,
            kernel,
            ScanAxis::Temporal,
            rng,
        );
        StMambaBlock {
            width,
            tokens,
            t_max: T_MAX,
            spatial_pe,
            temporal_pe,
            spatial,
            temporal,
            scan_order,
            identity_order: (0..tokens).collect(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor, SsmError> {
        let (t, s) = match *x.shape() {
            [t, s, d] if s == self.tokens && d == self.width => (t, s),
            _ => {
                return Err(SsmError::Tensor(TensorError::ShapeMismatch {
                    op: "stmamba_forward",
                    detail: format!(
                        "expected [T, {}, {}], got {:?}",
                        self.tokens,
                        self.width,
                        x.shape()
                    ),
                }))
            }
        };
        let _ = s;
        if t > self.t_max {
            return Err(SsmError::SequenceTooLong { t, max: self.t_max });
        }
        let pe_s = ctx.param(self.spatial_pe);
        let xp = ctx.g.add_bias(x, &pe_s)?;
        // plain normalization between the two blocks, no learned affine
        let ones = Tensor::ones(&[self.width]);
        let zeros = Tensor::zeros(&[self.width]);
        let ln = ctx.g.layer_norm(&xp, &ones, &zeros, LN_EPS)?;
        let ys = self.spatial.forward(ctx, &ln, &self.scan_order)?;

        let pe_t_full = ctx.param(self.temporal_pe);
        let pe_t = ctx.g.narrow_axis0(&pe_t_full, 0, t)?;
        let tr = ctx.g.transpose01(&ys)?;
        let tp = ctx.g.add_bias(&tr, &pe_t)?;
        let xt = ctx.g.transpose01(&tp)?;
        self.temporal.forward(ctx, &xt, &self.identity_order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, memory_stats, seeded_randn};
    use rand::SeedableRng;

    fn arena_with_scan(width: usize, state: usize) -> (ParamArena, SsmParams) {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let p = SsmParams::init(&mut arena, "scan", width, state, &mut rng);
        (arena, p)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (arena, p) = arena_with_scan(3, 4);
        let mut g = GradGraph::new();
        let u = Tensor::zeros(&[5, 3]);
        let y = selective_scan(&mut g, &u, &p, &arena).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let (arena, p) = arena_with_scan(2, 3);
        let mut g = GradGraph::new();
        let u = Tensor::from_vec(&[1, 2], vec![0.7, -1.1]).unwrap();
        let y = selective_scan(&mut g, &u, &p, &arena).unwrap();

        // independent recomputation: y = <C, delta*B> * u + skip * u
        let ud = u.data();
        let r = dt_rank(2);
        let dtd = arena.get(p.dt_down).data();
        let dtu = arena.get(p.dt_up).data();
        let dtb = arena.get(p.dt_bias).data();
        let wb = arena.get(p.w_b).data();
        let wc = arena.get(p.w_c).data();
        let ds = arena.get(p.d_skip).data();
        for d in 0..2 {
            let mut lin = dtb[d];
            for rr in 0..r {
                let mut low = 0.0;
                for k in 0..2 {
                    low += ud[k] * dtd[k * r + rr];
                }
                lin += low * dtu[rr * 2 + d];
            }
            let delta = lin.max(0.0) + (-lin.abs()).exp().ln_1p();
            let mut acc = 0.0;
            for n in 0..3 {
                let b: f64 = (0..2).map(|k| ud[k] * wb[k * 3 + n]).sum();
                let c: f64 = (0..2).map(|k| ud[k] * wc[k * 3 + n]).sum();
                acc += c * delta * b * ud[d];
            }
            let want = acc + ds[d] * ud[d];
            assert!((y.data()[d] - want).abs() < 1e-12, "channel {d}");
        }
    }

    #[test]
    fn state_stays_finite_over_long_horizons() {
        let (arena, p) = arena_with_scan(2, 4);
        let mut g = GradGraph::new();
        let data: Vec<f64> = (0..10_000 * 2).map(|i| ((i as f64 * 0.37).sin()) * 10.0).collect();
        let u = Tensor::from_vec(&[10_000, 2], data).unwrap();
        let y = selective_scan(&mut g, &u, &p, &arena).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_and_bad_shapes_rejected() {
        let (arena, p) = arena_with_scan(2, 2);
        let mut g = GradGraph::new();
        let bad = Tensor::ones(&[2, 2, 2]);
        assert!(selective_scan(&mut g, &bad, &p, &arena).is_err());
    }

    #[test]
    fn ss2d_zero_in_zero_out_and_perm_checked() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = BisstssmBlock::init(&mut arena, "b", 4, 4, 3, ScanAxis::Spatial, &mut rng);
        let mut ctx = Ctx::new(&arena);
        let x = Tensor::zeros(&[3, 5, 4]);
        let dirs = [
            block.dirs[0].bind(&mut ctx),
            block.dirs[1].bind(&mut ctx),
            block.dirs[2].bind(&mut ctx),
            block.dirs[3].bind(&mut ctx),
        ];
        let y = ss2d(&mut ctx.g, &x, &dirs, &[0, 1, 2, 3, 4]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let bad = ss2d(&mut ctx.g, &x, &dirs, &[0, 1, 2, 3, 3]);
        assert!(matches!(bad, Err(SsmError::BadPermutation(_))));
    }

    #[test]
    fn block_with_zero_projections_is_identity() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = BisstssmBlock::init(&mut arena, "b", 4, 4, 3, ScanAxis::Temporal, &mut rng);
        let zero_out = Tensor::zeros(&[4, 4]);
        arena.set(block.out_proj, zero_out);
        arena.set(block.mlp_w2, Tensor::zeros(&[8, 4]));
        arena.set(block.mlp_b2, Tensor::zeros(&[4]));
        let mut ctx = Ctx::new(&arena);
        let x = seeded_randn(&[2, 3, 4], 77);
        let y = block.forward(&mut ctx, &x, &[0, 1, 2]).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_shape_preserved_across_lengths() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let st = StMambaBlock::init(&mut arena, "st", 6, 4, 4, 3, SpatialFlavor::PartAware, &mut rng);
        for t in [1usize, 9, 81] {
            let mut ctx = Ctx::new(&arena);
            let x = seeded_randn(&[t, 4, 6], t as u64);
            let y = st.forward(&mut ctx, &x).unwrap();
            assert_eq!(y.shape(), &[t, 4, 6]);
        }
    }

    #[test]
    fn too_long_sequence_rejected() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let st = StMambaBlock::init(&mut arena, "st", 4, 2, 2, 3, SpatialFlavor::PartAware, &mut rng);
        let mut ctx = Ctx::new(&arena);
        let x = Tensor::ones(&[82, 2, 4]);
        assert!(matches!(
            st.forward(&mut ctx, &x),
            Err(SsmError::SequenceTooLong { t: 82, max: 81 })
        ));
    }

    #[test]
    fn skeleton_flavor_uses_tree_order() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let st =
            StMambaBlock::init(&mut arena, "st", 4, JOINT_COUNT, 2, 3, SpatialFlavor::SkeletonAware, &mut rng);
        let expect = skeleton_scan_order(&default_topology()).unwrap().to_vec();
        assert_eq!(st.scan_order, expect);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let st = StMambaBlock::init(&mut arena, "st", 4, 3, 2, 3, SpatialFlavor::PartAware, &mut rng);
        let mut ctx = Ctx::new(&arena);
        let x = seeded_randn(&[4, 3, 4], 55);
        let y = st.forward(&mut ctx, &x).unwrap();
        let weights = ctx.g.constant(&seeded_randn(&[4, 3, 4], 56));
        let prod = ctx.g.mul(&y, &weights).unwrap();
        let loss = ctx.g.sum_all(&prod).unwrap();
        let grads = ctx.grads(&loss).unwrap();
        for (id, name, _) in arena.iter() {
            let g = &grads[id.0];
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "parameter {name} received a zero gradient"
            );
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // the full gated block against central differences, every parameter
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let block = BisstssmBlock::init(&mut arena, "b", 4, 2, 3, ScanAxis::Spatial, &mut rng);
        let x = seeded_randn(&[3, 4, 4], 42);
        let values: Vec<Tensor> = arena.iter().map(|(_, _, t)| t.clone()).collect();
        let report = finite_diff_check(&values, 1e-5, |g, vals| {
            let mut ctx = Ctx::with_overrides(&arena, vals.to_vec());
            std::mem::swap(&mut ctx.g, g);
            let out = (|| {
                let y = block.forward(&mut ctx, &x, &[0, 1, 2, 3]).map_err(|e| match e {
                    SsmError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch { op: "block", detail: other.to_string() },
                })?;
                let sq = ctx.g.mul(&y, &y)?;
                ctx.g.mean_all(&sq)
            })();
            std::mem::swap(&mut ctx.g, g);
            out
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "fd report {report:?}");
    }

    #[test]
    fn stmamba_gradients_match_finite_differences() {
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let st = StMambaBlock::init(&mut arena, "st", 4, 3, 2, 3, SpatialFlavor::PartAware, &mut rng);
        let x = seeded_randn(&[3, 3, 4], 44);
        let values: Vec<Tensor> = arena.iter().map(|(_, _, t)| t.clone()).collect();
        let report = finite_diff_check(&values, 1e-5, |g, vals| {
            let mut ctx = Ctx::with_overrides(&arena, vals.to_vec());
            std::mem::swap(&mut ctx.g, g);
            let out = (|| {
                let y = st.forward(&mut ctx, &x).map_err(|e| match e {
                    SsmError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch { op: "block", detail: other.to_string() },
                })?;
                let sq = ctx.g.mul(&y, &y)?;
                ctx.g.mean_all(&sq)
            })();
            std::mem::swap(&mut ctx.g, g);
            out
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "fd report {report:?}");
    }

    #[test]
    fn ss2d_matches_manual_composition_at_single_token() {
        // S = 1: spatial passes collapse to single-step scans per frame
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let block = BisstssmBlock::init(&mut arena, "b", 2, 3, 3, ScanAxis::Spatial, &mut rng);
        let x = seeded_randn(&[4, 1, 2], 62);
        let mut ctx = Ctx::new(&arena);
        let dirs = [
            block.dirs[0].bind(&mut ctx),
            block.dirs[1].bind(&mut ctx),
            block.dirs[2].bind(&mut ctx),
            block.dirs[3].bind(&mut ctx),
        ];
        let y = ss2d(&mut ctx.g, &x, &dirs, &[0]).unwrap();

        // manual: two per-frame single-step scans plus two temporal scans
        let mut ctx2 = Ctx::new(&arena);
        let dirs2 = [
            block.dirs[0].bind(&mut ctx2),
            block.dirs[1].bind(&mut ctx2),
            block.dirs[2].bind(&mut ctx2),
            block.dirs[3].bind(&mut ctx2),
        ];
        let g2 = &mut ctx2.g;
        let per_frame = g2.reshape(&x, &[4, 1, 2]).unwrap();
        let s_fwd = scan_batched(g2, &per_frame, &dirs2[0]).unwrap();
        let s_rev = scan_batched(g2, &per_frame, &dirs2[1]).unwrap();
        let xt = g2.transpose01(&x).unwrap();
        let t_fwd = scan_batched(g2, &xt, &dirs2[2]).unwrap();
        let t_fwd = g2.transpose01(&t_fwd).unwrap();
        let rev_idx: Vec<usize> = (0..4).rev().collect();
        let xtr = g2.gather_tokens(&xt, &rev_idx).unwrap();
        let t_rev = scan_batched(g2, &xtr, &dirs2[3]).unwrap();
        let t_rev = g2.gather_tokens(&t_rev, &rev_idx).unwrap();
        let t_rev = g2.transpose01(&t_rev).unwrap();
        let sum1 = g2.add(&s_fwd, &s_rev).unwrap();
        let sum2 = g2.add(&sum1, &t_fwd).unwrap();
        let want = g2.add(&sum2, &t_rev).unwrap();

        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_memory_grows_linearly_with_length() {
        let _guard = crate::tensor::MEM_TEST_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let mut arena = ParamArena::new();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let st = StMambaBlock::init(&mut arena, "st", 16, 8, 8, 3, SpatialFlavor::PartAware, &mut rng);
        let mut peaks = Vec::new();
        for t in [30usize, 60] {
            let x = seeded_randn(&[t, 8, 16], t as u64);
            let (_, peak) = crate::tensor::peak_memory_scope(|| {
                let mut ctx = Ctx::frozen(&arena);
                let y = st.forward(&mut ctx, &x).unwrap();
                y.data()[0]
            })
            .unwrap();
            peaks.push(peak as f64);
        }
        let ratio = peaks[1] / peaks[0];
        assert!(ratio <= 2.5, "peak ratio {ratio}");
        let _ = memory_stats();
    }
}
