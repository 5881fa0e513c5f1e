//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major `Vec<f64>` behind an `Arc`; shapes are explicit extent
//! lists (an empty shape is a scalar). Differentiable ops are recorded on a
//! [`GradGraph`] tape and replayed in reverse with a fixed accumulation order,
//! so two runs over the same inputs are bitwise identical.
//!
//! Every tensor payload is registered with a process-wide byte counter, which
//! is what [`peak_memory_scope`] reads to measure the activation footprint of
//! a forward pass. Only payload bytes are counted; tape bookkeeping is not.

mod fd;
mod graph;

pub use fd::{finite_diff_check, FdReport, FD_DEFAULT_EPS};
pub use graph::{GradGraph, Gradients, NodeRef, UnaryKind};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("tensor creation: data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("tensor creation: zero extent in shape {shape:?}")]
    ZeroExtent { shape: Vec<usize> },
    #[error("tensor creation: non-finite input value")]
    NonFiniteInput,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor belongs to a different graph")]
    GraphMismatch,
    #[error("a peak-memory scope is already active")]
    NestedScope,
    #[error("finite differences: eps {0:e} outside [1e-7, 1e-3]")]
    EpsOutOfRange(f64),
    #[error("finite differences: two evaluations at the same point disagree")]
    NonDeterministicFunction,
}

// ── Allocation tracking ─────────────────────────────────────────────

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static SCOPE_ACTIVE: AtomicBool = AtomicBool::new(false);

/// Serializes tests that measure peak memory; the counters are process-wide
/// and concurrent allocation elsewhere would distort readings.
pub static MEM_TEST_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
static CHECKED: AtomicBool = AtomicBool::new(true);

/// Tensor payload. Registers its byte size on creation and deregisters on
/// drop, so `live_bytes` always reflects payloads currently reachable.
pub(crate) struct TrackedBuf {
    data: Vec<f64>,
}

impl TrackedBuf {
    pub(crate) fn new(data: Vec<f64>) -> Arc<Self> {
        let bytes = data.len() * std::mem::size_of::<f64>();
        let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
        Arc::new(TrackedBuf { data })
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl Drop for TrackedBuf {
    fn drop(&mut self) {
        let bytes = self.data.len() * std::mem::size_of::<f64>();
        LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryStats {
    /// Bytes of tensor payload currently alive.
    pub live_bytes: usize,
    /// High-water mark since process start or the last scope reset.
    pub peak_bytes: usize,
}

pub fn memory_stats() -> MemoryStats {
    MemoryStats {
        live_bytes: LIVE_BYTES.load(Ordering::Relaxed),
        peak_bytes: PEAK_BYTES.load(Ordering::Relaxed),
    }
}

struct ScopeGuard;

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        SCOPE_ACTIVE.store(false, Ordering::Release);
    }
}

/// Runs `f` and reports the peak tensor bytes allocated while it ran, over
/// and above what was already live at entry. The counter is process-wide, so
/// the scope requires exclusive execution of tracked work; a nested or
/// concurrent scope fails with [`TensorError::NestedScope`].
pub fn peak_memory_scope<R>(f: impl FnOnce() -> R) -> Result<(R, usize), TensorError> {
    if SCOPE_ACTIVE
        .compare_exchange(false, true, Ordering::Acquire, Ordering::Acquire)
        .is_err()
    {
        return Err(TensorError::NestedScope);
    }
    let _guard = ScopeGuard;
    let base = LIVE_BYTES.load(Ordering::Relaxed);
    PEAK_BYTES.store(base, Ordering::Relaxed);
    let out = f();
    let peak = PEAK_BYTES.load(Ordering::Relaxed).saturating_sub(base);
    Ok((out, peak))
}

/// Toggle post-op scanning for NaN/Inf. On by default; the benchmark harness
/// turns it off so the hot loop is not paying for the scan.
pub fn set_checked(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked_enabled() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

// ── Tensor ──────────────────────────────────────────────────────────

/// Immutable dense f64 tensor. `node` ties the value to the graph that
/// produced it (None for free-standing values).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<TrackedBuf>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor, validating extent/length agreement and rejecting
    /// non-finite input values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape: shape.to_vec() });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { len: data.len(), shape: shape.to_vec() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFiniteInput);
        }
        Ok(Self::from_vec_unchecked(shape, data))
    }

    /// Internal constructor for values produced by the engine itself
    /// (gradients may legitimately overflow; optimizers detect that).
    pub(crate) fn from_vec_unchecked(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor { shape: shape.to_vec(), data: TrackedBuf::new(data), node: None }
    }

    pub fn scalar_value(v: f64) -> Result<Tensor, TensorError> {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::from_vec_unchecked(shape, vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::from_vec_unchecked(shape, vec![1.0; numel])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        self.data.as_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_slice().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data.as_slice()[0]
    }

    /// Detached copy: same shape and payload handle, no graph tie.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub(crate) fn with_node(&self, node: NodeRef) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: Some(node) }
    }

    pub(crate) fn payload(&self) -> &Arc<TrackedBuf> {
        &self.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data.as_slice();
        let head: Vec<f64> = d.iter().take(6).copied().collect();
        write!(f, "Tensor{:?}{:?}{}", self.shape, head, if d.len() > 6 { ".." } else { "" })
    }
}

/// Standard-normal samples from a fixed PRNG (ChaCha8 keyed by `seed`).
/// Same seed and shape give the same tensor on every platform.
pub fn seeded_randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn_with(&mut rng, shape, 1.0)
}

/// Draws from an existing PRNG stream; used by model init so one seed covers
/// every parameter in declaration order.
pub fn randn_with<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let dist = rand_distr::StandardNormal;
    let data: Vec<f64> = (0..numel).map(|_| {
        let z: f64 = rng.sample(dist);
        z * std
    }).collect();
    Tensor::from_vec_unchecked(shape, data)
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if checked_enabled() && !data.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn creation_validates_shape_and_values() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 2], vec![1.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::from_vec(&[2, 0], vec![]),
            Err(TensorError::ZeroExtent { .. })
        ));
        assert!(matches!(
            Tensor::from_vec(&[2], vec![f64::NAN, 0.0]),
            Err(TensorError::NonFiniteInput)
        ));
    }

    #[test]
    fn scalar_shape_is_empty_list() {
        let t = Tensor::scalar_value(3.5).unwrap();
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.scalar(), 3.5);
    }

    #[test]
    fn seeded_randn_is_reproducible() {
        let a = seeded_randn(&[32], 7);
        let b = seeded_randn(&[32], 7);
        let c = seeded_randn(&[32], 8);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn live_bytes_follow_alloc_and_drop() {
        let before = memory_stats().live_bytes;
        let t = Tensor::zeros(&[1000]);
        assert!(memory_stats().live_bytes >= before + 8000);
        drop(t);
        assert_eq!(memory_stats().live_bytes, before);
    }

    #[test]
    fn peak_scope_reports_allocation_high_water() {
        let (_, peak) = peak_memory_scope(|| {
            let a = Tensor::zeros(&[1000]);
            drop(a);
            let b = Tensor::zeros(&[2000]);
            drop(b);
        })
        .unwrap();
        assert!(peak >= 16000, "peak {peak} should cover the larger allocation");
        assert!(peak < 16000 + 8000, "peak {peak} should not sum sequential allocations");
    }

    #[test]
    fn nested_scope_is_rejected() {
        let (inner, _) = peak_memory_scope(|| peak_memory_scope(|| ()).err()).unwrap();
        assert_eq!(inner, Some(TensorError::NestedScope));
    }
}
