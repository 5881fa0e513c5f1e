//! Optimizer, training loop, and evaluation.
//!
//! Every batch draws one shared window length from the nine-step ladder,
//! crops that window from sixteen randomly chosen sequences, and averages
//! the per-window losses; no padding is ever constructed. All randomness
//! flows through a single seeded stream, so a (dataset, config, seed)
//! triple reproduces its loss log and final parameters bit for bit.

use crate::dataset::Sequence;
use crate::loss::{total_loss, LossError, LossWeights};
use crate::metrics::{compute_metrics, MetricError, MetricReport};
use crate::model::{ModelError, VimcanModel};
use crate::params::{Ctx, ParamArena};
use crate::skeleton::{IMU_COUNT, JOINT_COUNT};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("sequence {id}: {frames} frames, need {need} to crop")]
    TooShortToCrop { id: String, frames: usize, need: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied after each epoch.
    pub decay: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Window lengths the batch sampler draws from.
    pub length_set: Vec<usize>,
    pub weights: LossWeights,
    /// Global-norm gradient clip; None disables.
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr0: 2e-4,
            decay: 0.99,
            weight_decay: 0.01,
            batch: 16,
            epochs: 20,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            length_set: vec![9, 18, 27, 36, 45, 54, 63, 72, 81],
            weights: LossWeights::default(),
            clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {}", self.decay));
        }
        if self.length_set.is_empty() {
            return bad("empty length_set".into());
        }
        if let Some(&l) = self.length_set.iter().find(|&&l| l < 2 || l > crate::ssm::T_MAX) {
            return bad(format!("window length {l} outside [2, {}]", crate::ssm::T_MAX));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad(format!("batch {} epochs {}", self.batch, self.epochs));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {}", self.eps));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2})"));
        }
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter, plus the shared step count.
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(arena: &ParamArena) -> OptimizerState {
        let m = arena.iter().map(|(_, _, t)| vec![0.0; t.data().len()]).collect();
        let v = arena.iter().map(|(_, _, t)| vec![0.0; t.data().len()]).collect();
        OptimizerState { m, v, step: 0 }
    }
}

/// One decoupled-weight-decay Adam update over every parameter:
/// θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ.
pub fn adamw_step(
    arena: &mut ParamArena,
    grads: &[Tensor],
    st: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), arena.len(), "one gradient per parameter");
    let names: Vec<String> = arena.iter().map(|(_, n, _)| n.to_string()).collect();
    for (g, name) in grads.iter().zip(&names) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    st.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(st.step as i32);
    let bc2 = 1.0 - b2.powi(st.step as i32);
    for (slot, g) in grads.iter().enumerate() {
        let id = crate::params::ParamId(slot);
        let theta = arena.get(id).data().to_vec();
        let m = &mut st.m[slot];
        let v = &mut st.v[slot];
        let mut next = vec![0.0; theta.len()];
        for (k, (&t, &gk)) in theta.iter().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            next[k] = t - lr * (mhat / (vhat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * t;
        }
        let shape = arena.get(id).shape().to_vec();
        arena.set(id, Tensor::from_vec(&shape, next)?);
    }
    Ok(())
}

/// Scales the whole gradient set so its global L2 norm is at most `max`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Vec<Tensor>, max: f64) -> Result<f64, TensorError> {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max && norm > 0.0 {
        let s = max / norm;
        for g in grads.iter_mut() {
            let scaled: Vec<f64> = g.data().iter().map(|v| v * s).collect();
            *g = Tensor::from_vec(&g.shape().to_vec(), scaled)?;
        }
    }
    Ok(norm)
}

pub fn sample_length(rng: &mut ChaCha8Rng, set: &[usize]) -> usize {
    set[rng.gen_range(0..set.len())]
}

fn crop(seq: &Sequence, start: usize, len: usize) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let k = &seq.keypoints[start * JOINT_COUNT * 2..(start + len) * JOINT_COUNT * 2];
    let q = &seq.imu[start * IMU_COUNT * 4..(start + len) * IMU_COUNT * 4];
    let g = &seq.gt3d[start * JOINT_COUNT * 3..(start + len) * JOINT_COUNT * 3];
    Ok((
        Tensor::from_vec(&[len, JOINT_COUNT, 2], k.to_vec())?,
        Tensor::from_vec(&[len, IMU_COUNT, 4], q.to_vec())?,
        Tensor::from_vec(&[len, JOINT_COUNT, 3], g.to_vec())?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_loss: Vec<f64>,
    pub epoch_mean: Vec<f64>,
    pub lr: Vec<f64>,
}

pub fn train(
    model: &mut VimcanModel,
    data: &[Sequence],
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let need = *cfg.length_set.iter().max().unwrap();
    for s in data {
        if s.frames < need {
            return Err(TrainError::TooShortToCrop {
                id: s.id.clone(),
                frames: s.frames,
                need,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = OptimizerState::new(&model.arena);
    let steps_per_epoch = data.len().div_ceil(cfg.batch).max(1);
    let mut log =
        TrainLog { step_loss: Vec::new(), epoch_mean: Vec::new(), lr: Vec::new() };

    for e in 0..cfg.epochs {
        let lr = cfg.lr0 * cfg.decay.powi(e as i32);
        let mut acc = 0.0;
        for _ in 0..steps_per_epoch {
            let l = sample_length(&mut rng, &cfg.length_set);
            let mut ctx = Ctx::new(&model.arena);
            let mut sum: Option<Tensor> = None;
            for _ in 0..cfg.batch {
                let si = rng.gen_range(0..data.len());
                let start = rng.gen_range(0..=data[si].frames - l);
                let (kps, imu, gt) = crop(&data[si], start, l)?;
                debug_assert_eq!(kps.shape()[0], l, "window must match the drawn length");
                let pred = model.forward(&mut ctx, &kps, &imu)?;
                let lb = total_loss(&mut ctx.g, &pred, &gt, &cfg.weights)?;
                sum = Some(match sum {
                    None => lb.total,
                    Some(s) => ctx.g.add(&s, &lb.total)?,
                });
            }
            let batch_loss = ctx.g.scale(&sum.unwrap(), 1.0 / cfg.batch as f64)?;
            let loss_val = batch_loss.data()[0];
            let mut grads = ctx.grads(&batch_loss)?;
            if let Some(max) = cfg.clip {
                clip_gradients(&mut grads, max)?;
            }
            adamw_step(&mut model.arena, &grads, &mut st, lr, cfg)?;
            log.step_loss.push(loss_val);
            acc += loss_val;
        }
        log.epoch_mean.push(acc / steps_per_epoch as f64);
        log.lr.push(lr);
    }
    Ok(log)
}

/// Full-length forward per sequence, one report each, input order kept.
pub fn evaluate_per_sequence(
    model: &VimcanModel,
    data: &[Sequence],
) -> Result<Vec<(String, MetricReport)>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut out = Vec::with_capacity(data.len());
    for s in data {
        let (kps, imu, gt) = crop(s, 0, s.frames)?;
        let mut ctx = Ctx::frozen(&model.arena);
        let pred = model.forward(&mut ctx, &kps, &imu)?;
        out.push((s.id.clone(), compute_metrics(&pred, &gt)?));
    }
    Ok(out)
}

/// Full-length forward on every sequence, metrics over the pooled frames.
pub fn evaluate(model: &VimcanModel, data: &[Sequence]) -> Result<MetricReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    let mut frames = 0;
    for s in data {
        let (kps, imu, gt) = crop(s, 0, s.frames)?;
        let mut ctx = Ctx::frozen(&model.arena);
        let pred = model.forward(&mut ctx, &kps, &imu)?;
        pred_all.extend_from_slice(pred.data());
        gt_all.extend_from_slice(gt.data());
        frames += s.frames;
    }
    let pred = Tensor::from_vec(&[frames, JOINT_COUNT, 3], pred_all)?;
    let gt = Tensor::from_vec(&[frames, JOINT_COUNT, 3], gt_all)?;
    Ok(compute_metrics(&pred, &gt)?)
}
