//! Training losses over batched pose sequences.
//!
//! All four terms run on the tape so one backward pass serves the whole
//! weighted objective. Inputs are `[B, T, J, 3]` (a bare `[T, J, 3]`
//! sequence is treated as a batch of one). Ground truth enters as a
//! constant; only predictions carry gradients.

use crate::tensor::{GradGraph, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("ground truth is identically zero in sequence {0}")]
    DegenerateGroundTruth(usize),
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weighted-sum coefficients and the per-joint temporal-consistency weights.
/// Distal joints (feet, head, hands) carry double weight by default.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mpjpe: f64,
    pub lambda_nmpjpe: f64,
    pub lambda_v: f64,
    pub lambda_tc: f64,
    pub tc_joint_weights: Vec<f64>,
}

pub const DISTAL_JOINTS: [usize; 5] = [3, 6, 10, 13, 16];

impl Default for LossWeights {
    fn default() -> LossWeights {
        let mut w = vec![1.0; 17];
        for j in DISTAL_JOINTS {
            w[j] = 2.0;
        }
        LossWeights {
            lambda_mpjpe: 1.0,
            lambda_nmpjpe: 0.5,
            lambda_v: 20.0,
            lambda_tc: 0.5,
            tc_joint_weights: w,
        }
    }
}

fn dims(t: &Tensor, op: &str) -> Result<(usize, usize, usize), LossError> {
    match *t.shape() {
        [b, fr, j, 3] => Ok((b, fr, j)),
        [fr, j, 3] => Ok((1, fr, j)),
        _ => Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "loss",
            detail: format!("{op}: expected [B, T, J, 3], got {:?}", t.shape()),
        })),
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor, op: &str) -> Result<(usize, usize, usize), LossError> {
    let d = dims(pred, op)?;
    if dims(gt, op)? != d {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "loss",
            detail: format!("{op}: pred {:?} vs gt {:?}", pred.shape(), gt.shape()),
        }));
    }
    Ok(d)
}

/// Mean Euclidean distance between `diff = a - b` rows of width 3.
fn mean_norm(g: &mut GradGraph, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(&diff, &diff)?;
    let ssq = g.sum_last(&sq)?;
    let d = g.sqrt(&ssq)?;
    g.mean_all(&d)
}

/// Mean per-joint position error.
pub fn mpjpe_loss(g: &mut GradGraph, pred: &Tensor, gt: &Tensor) -> Result<Tensor, LossError> {
    check_pair(pred, gt, "mpjpe")?;
    Ok(mean_norm(g, gt, pred)?)
}

/// Scale-normalized position error. The per-sequence scale `s` is the
/// least-squares minimizer of `‖s·gt − pred‖²`, computed outside the tape
/// so no gradient flows through it.
pub fn nmpjpe_loss(g: &mut GradGraph, pred: &Tensor, gt: &Tensor) -> Result<Tensor, LossError> {
    let (b, fr, j) = check_pair(pred, gt, "nmpjpe")?;
    let per = fr * j * 3;
    let pd = pred.data();
    let gd = gt.data();
    let mut scaled = vec![0.0; b * per];
    for s in 0..b {
        let gs = &gd[s * per..(s + 1) * per];
        let ps = &pd[s * per..(s + 1) * per];
        let dot: f64 = gs.iter().zip(ps).map(|(x, y)| x * y).sum();
        let nrm: f64 = gs.iter().map(|x| x * x).sum();
        if nrm == 0.0 {
            return Err(LossError::DegenerateGroundTruth(s));
        }
        let k = dot / nrm;
        for (o, &x) in scaled[s * per..(s + 1) * per].iter_mut().zip(gs) {
            *o = k * x;
        }
    }
    let scaled = Tensor::from_vec(pred.shape(), scaled)?;
    Ok(mean_norm(g, &scaled, pred)?)
}

fn velocities(g: &mut GradGraph, x: &Tensor, b: usize, fr: usize, j: usize) -> Result<Tensor, TensorError> {
    let grid = g.reshape(x, &[b, fr, j * 3])?;
    let head: Vec<usize> = (1..fr).collect();
    let tail: Vec<usize> = (0..fr - 1).collect();
    let next = g.gather_tokens(&grid, &head)?;
    let prev = g.gather_tokens(&grid, &tail)?;
    let vel = g.sub(&next, &prev)?;
    g.reshape(&vel, &[b, fr - 1, j, 3])
}

/// Mean Euclidean distance between frame-difference (velocity) vectors.
pub fn mpjve_loss(g: &mut GradGraph, pred: &Tensor, gt: &Tensor) -> Result<Tensor, LossError> {
    let (b, fr, j) = check_pair(pred, gt, "mpjve")?;
    if fr < 2 {
        return Err(LossError::TooShort(fr));
    }
    let vp = velocities(g, pred, b, fr, j)?;
    let vg = velocities(g, gt, b, fr, j)?;
    Ok(mean_norm(g, &vg, &vp)?)
}

/// Temporal-consistency penalty: mean weighted squared frame-to-frame
/// displacement of the prediction alone.
pub fn tc_loss(
    g: &mut GradGraph,
    pred: &Tensor,
    joint_weights: &[f64],
) -> Result<Tensor, LossError> {
    let (b, fr, j) = dims(pred, "tc")?;
    if fr < 2 {
        return Err(LossError::TooShort(fr));
    }
    if joint_weights.len() != j {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "loss",
            detail: format!("tc: {} joint weights for {} joints", joint_weights.len(), j),
        }));
    }
    let vp = velocities(g, pred, b, fr, j)?;
    let sq = g.mul(&vp, &vp)?;
    let ssq = g.sum_last(&sq)?;
    let w = Tensor::from_vec(&[j], joint_weights.to_vec())?;
    let weighted = g.mul_bcast(&ssq, &w)?;
    Ok(g.mean_all(&weighted)?)
}

/// Individual loss terms plus their weighted sum, all tape nodes.
pub struct LossBreakdown {
    pub total: Tensor,
    pub mpjpe: Tensor,
    pub nmpjpe: Tensor,
    pub mpjve: Tensor,
    pub tc: Tensor,
}

pub fn total_loss(
    g: &mut GradGraph,
    pred: &Tensor,
    gt: &Tensor,
    lw: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let mpjpe = mpjpe_loss(g, pred, gt)?;
    let nmpjpe = nmpjpe_loss(g, pred, gt)?;
    let mpjve = mpjve_loss(g, pred, gt)?;
    let tc = tc_loss(g, pred, &lw.tc_joint_weights)?;
    let a = g.scale(&mpjpe, lw.lambda_mpjpe)?;
    let b = g.scale(&nmpjpe, lw.lambda_nmpjpe)?;
    let c = g.scale(&mpjve, lw.lambda_v)?;
    let d = g.scale(&tc, lw.lambda_tc)?;
    let ab = g.add(&a, &b)?;
    let abc = g.add(&ab, &c)?;
    let total = g.add(&abc, &d)?;
    Ok(LossBreakdown { total, mpjpe, nmpjpe, mpjve, tc })
}
