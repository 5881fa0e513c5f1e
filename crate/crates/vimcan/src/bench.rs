//! Peak-memory and throughput benchmarks.
//!
//! The memory harness compares the temporal scan block against a drop-in
//! temporal self-attention block of equal width on the same token grid.
//! The attention baseline deliberately materializes full frame-by-frame
//! score matrices, so its footprint grows quadratically with length while
//! the scan's activations grow linearly; the rows make that visible.

use crate::model::{ModelError, VimcanModel};
use crate::params::{Ctx, ParamArena, ParamId};
use crate::skeleton::{IMU_COUNT, JOINT_COUNT};
use crate::ssm::{BisstssmBlock, ScanAxis, SsmError};
use crate::tensor::{
    peak_memory_scope, randn_with, seeded_randn, Tensor, TensorError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid geometry shared by both variants: a few spatial sites at a modest
/// width keep runs quick while leaving the quadratic term dominant for the
/// attention baseline at the longer lengths.
pub const BENCH_SITES: usize = 4;
pub const BENCH_WIDTH: usize = 32;
pub const BENCH_HEADS: usize = 8;
pub const BENCH_STATE: usize = 16;

/// Soft guard: a run whose score matrices alone would exceed this many
/// bytes is skipped and flagged instead of attempted.
pub const OOM_GUARD_BYTES: usize = 6 << 30;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchVariant {
    Ssm,
    AttentionTemporal,
}

impl BenchVariant {
    pub fn label(self) -> &'static str {
        match self {
            BenchVariant::Ssm => "ssm",
            BenchVariant::AttentionTemporal => "attention-temporal",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub t: usize,
    pub peak_bytes: usize,
    pub wall_ms: f64,
    pub fps: f64,
    pub oom: bool,
}

struct AttentionBlock {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    heads: usize,
}

impl AttentionBlock {
    fn init(arena: &mut ParamArena, width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = |arena: &mut ParamArena, n: &str, rng: &mut ChaCha8Rng| {
            arena.insert(format!("attn.{n}"), randn_with(rng, &[width, width], 0.02))
        };
        AttentionBlock {
            wq: f(arena, "wq", rng),
            wk: f(arena, "wk", rng),
            wv: f(arena, "wv", rng),
            wo: f(arena, "wo", rng),
            heads,
        }
    }

    /// Self-attention along time, independently per spatial site. Scores are
    /// [S, T, T] per head, the quadratic footprint under test.
    fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        let width = x.shape()[2];
        let dk = width / self.heads;
        let xt = ctx.g.transpose01(x)?;
        let wq = ctx.param(self.wq);
        let wk = ctx.param(self.wk);
        let wv = ctx.param(self.wv);
        let wo = ctx.param(self.wo);
        let q = ctx.g.matmul(&xt, &wq)?;
        let k = ctx.g.matmul(&xt, &wk)?;
        let v = ctx.g.matmul(&xt, &wv)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.g.narrow_last(&q, h * dk, dk)?;
            let kh = ctx.g.narrow_last(&k, h * dk, dk)?;
            let vh = ctx.g.narrow_last(&v, h * dk, dk)?;
            let scores = ctx.g.matmul_nt(&qh, &kh)?;
            let scaled = ctx.g.scale(&scores, 1.0 / (dk as f64).sqrt())?;
            let w = ctx.g.softmax_last(&scaled)?;
            heads.push(ctx.g.matmul(&w, &vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let cat = ctx.g.concat_last(&refs)?;
        let out = ctx.g.matmul(&cat, &wo)?;
        ctx.g.transpose01(&out)
    }
}

fn ssm_arena(seed: u64) -> (ParamArena, BisstssmBlock) {
    let mut arena = ParamArena::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = BisstssmBlock::init(
        &mut arena,
        "bench",
        BENCH_WIDTH,
        BENCH_STATE,
        3,
        ScanAxis::Temporal,
        &mut rng,
    );
    (arena, block)
}

fn attention_arena(seed: u64) -> (ParamArena, AttentionBlock) {
    let mut arena = ParamArena::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = AttentionBlock::init(&mut arena, BENCH_WIDTH, BENCH_HEADS, &mut rng);
    (arena, block)
}

fn attention_score_bytes(t: usize) -> usize {
    BENCH_HEADS * BENCH_SITES * t * t * 8
}

/// One measured cell: peak tape bytes for a single forward, wall time
/// averaged over `runs` forwards.
fn measure(
    variant: BenchVariant,
    t: usize,
    runs: usize,
) -> Result<BenchRow, BenchError> {
    if variant == BenchVariant::AttentionTemporal && attention_score_bytes(t) > OOM_GUARD_BYTES {
        return Ok(BenchRow {
            variant: variant.label().into(),
            t,
            peak_bytes: 0,
            wall_ms: 0.0,
            fps: 0.0,
            oom: true,
        });
    }
    let x = seeded_randn(&[t, BENCH_SITES, BENCH_WIDTH], 7 + t as u64);
    let spatial_order: Vec<usize> = (0..BENCH_SITES).collect();

    let run_once = |measure_peak: bool| -> Result<usize, BenchError> {
        match variant {
            BenchVariant::Ssm => {
                let (arena, block) = ssm_arena(1);
                let mut ctx = Ctx::frozen(&arena);
                if measure_peak {
                    let (r, peak) = peak_memory_scope(|| {
                        block.forward(&mut ctx, &x, &spatial_order)
                    })?;
                    r?;
                    Ok(peak)
                } else {
                    block.forward(&mut ctx, &x, &spatial_order)?;
                    Ok(0)
                }
            }
            BenchVariant::AttentionTemporal => {
                let (arena, block) = attention_arena(1);
                let mut ctx = Ctx::frozen(&arena);
                if measure_peak {
                    let (r, peak) =
                        peak_memory_scope(|| block.forward(&mut ctx, &x))?;
                    r?;
                    Ok(peak)
                } else {
                    block.forward(&mut ctx, &x)?;
                    Ok(0)
                }
            }
        }
    };

    let peak = run_once(true)?;
    let start = std::time::Instant::now();
    for _ in 0..runs {
        run_once(false)?;
    }
    let total = start.elapsed().as_secs_f64();
    let wall_ms = total * 1e3 / runs as f64;
    let fps = (t * runs) as f64 / total;
    Ok(BenchRow { variant: variant.label().into(), t, peak_bytes: peak, wall_ms, fps, oom: false })
}

/// Serial sweep over the grid; requires no other peak scope to be active.
pub fn bench_memory(
    lengths: &[usize],
    variants: &[BenchVariant],
    runs: usize,
) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &t in lengths {
            rows.push(measure(variant, t, runs.max(1))?);
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("variant,T,peak_bytes,wall_ms,fps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3}\n",
            r.variant, r.t, r.peak_bytes, r.wall_ms, r.fps
        ));
    }
    out
}

/// Median-of-runs full-model throughput at length `t`.
pub fn bench_throughput(
    model: &VimcanModel,
    t: usize,
    runs: usize,
) -> Result<f64, BenchError> {
    assert!(runs >= 3, "median needs at least 3 runs");
    let kps = seeded_randn(&[t, JOINT_COUNT, 2], 40);
    let imu = seeded_randn(&[t, IMU_COUNT, 4], 41);
    let mut times: Vec<f64> = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut ctx = Ctx::frozen(&model.arena);
        let start = std::time::Instant::now();
        model.forward(&mut ctx, &kps, &imu)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[runs / 2];
    Ok(t as f64 / median)
}

/// Ordinary least squares for y ≈ sum_k c_k x^k; returns (coefficients,
/// sse, r2). Degree 1 gives the linear fit, degree 2 the quadratic.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> (Vec<f64>, f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() > degree);
    let n = xs.len();
    let cols = degree + 1;
    let a = nalgebra::DMatrix::from_fn(n, cols, |i, j| xs[i].powi(j as i32));
    let y = nalgebra::DVector::from_column_slice(ys);
    let at = a.transpose();
    let coef = (at.clone() * &a)
        .lu()
        .solve(&(at * &y))
        .expect("normal equations are nonsingular for distinct xs");
    let fitted = a * &coef;
    let sse: f64 = (&y - &fitted).iter().map(|r| r * r).sum();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sst: f64 = ys.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    (coef.iter().copied().collect(), sse, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tensor::MEM_TEST_LOCK;

    #[test]
    fn polyfit_recovers_exact_polynomials() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x).collect();
        let (c, sse, r2) = polyfit(&xs, &lin, 1);
        assert!((c[0] - 3.0).abs() < 1e-9 && (c[1] - 2.0).abs() < 1e-9);
        assert!(sse < 1e-18 && (r2 - 1.0).abs() < 1e-12);

        let quad: Vec<f64> = xs.iter().map(|x| 1.0 - x + 0.5 * x * x).collect();
        let (c, _, _) = polyfit(&xs, &quad, 2);
        assert!((c[2] - 0.5).abs() < 1e-9);

        let (_, sse_lin, r2_lin) = polyfit(&xs, &quad, 1);
        let (_, sse_quad, _) = polyfit(&xs, &quad, 2);
        assert!(sse_quad < sse_lin);
        assert!(r2_lin < 1.0);
    }

    #[test]
    fn csv_shape_is_pinned() {
        let rows = vec![BenchRow {
            variant: "ssm".into(),
            t: 64,
            peak_bytes: 1234,
            wall_ms: 5.678,
            fps: 9000.0,
            oom: false,
        }];
        let csv = bench_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,T,peak_bytes,wall_ms,fps");
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 5);
        assert!(row.starts_with("ssm,64,1234,"));
        assert!(lines.next().is_none());
    }

    #[test]
    fn scan_memory_is_linear_attention_quadratic() {
        let _guard = MEM_TEST_LOCK.lock().unwrap();
        let lengths = [32usize, 64, 96, 128];
        let rows = bench_memory(
            &lengths,
            &[BenchVariant::Ssm, BenchVariant::AttentionTemporal],
            1,
        )
        .unwrap();
        assert_eq!(rows.len(), 8);
        let xs: Vec<f64> = lengths.iter().map(|&t| t as f64).collect();
        let ssm: Vec<f64> = rows[..4].iter().map(|r| r.peak_bytes as f64).collect();
        let attn: Vec<f64> = rows[4..].iter().map(|r| r.peak_bytes as f64).collect();
        assert!(rows.iter().all(|r| !r.oom && r.peak_bytes > 0 && r.fps > 0.0));

        let (_, _, r2_lin) = polyfit(&xs, &ssm, 1);
        assert!(r2_lin >= 0.98, "scan peak not linear: r2 {r2_lin}");
        assert!(ssm[3] / ssm[1] <= 2.5, "scan doubling ratio {}", ssm[3] / ssm[1]);

        let (_, sse_lin, _) = polyfit(&xs, &attn, 1);
        let (_, sse_quad, _) = polyfit(&xs, &attn, 2);
        assert!(sse_quad < sse_lin, "quadratic fit must win for attention");
        assert!(attn[3] / attn[1] >= 3.0, "attention doubling ratio {}", attn[3] / attn[1]);
    }

    #[test]
    fn throughput_is_positive_and_finite() {
        let model = init_model(&ModelConfig::tiny(), 0).unwrap();
        let fps = bench_throughput(&model, 27, 3).unwrap();
        assert!(fps.is_finite() && fps > 0.0);
    }

    #[test]
    fn oom_guard_flags_instead_of_running() {
        let t = 1 << 20;
        assert!(attention_score_bytes(t) > OOM_GUARD_BYTES);
        let rows =
            bench_memory(&[t], &[BenchVariant::AttentionTemporal], 1).unwrap();
        assert!(rows[0].oom && rows[0].peak_bytes == 0);
    }
}
