//! Reverse-mode tape.
//!
//! Ops append nodes to a [`GradGraph`]; node order is construction order,
//! which is already topological, so the reverse pass is a single backwards
//! sweep with a fixed accumulation order. Gradient buffers are plain vectors
//! indexed by node, never hashed, so results are bitwise reproducible.

use super::{ensure_finite, Tensor, TensorError, TrackedBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies a node within a specific graph instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) graph: u64,
    pub(crate) index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Sigmoid,
    Gelu,
    Softplus,
    Exp,
    Sqrt,
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias,
    MulBcast,
    Matmul { trans_b: bool, rhs_batched: bool, batch: usize, m: usize, k: usize, n: usize },
    Unary(UnaryKind),
    SoftmaxLast,
    LayerNorm { mean: Vec<f64>, rstd: Vec<f64> },
    DepthwiseConv { klen: usize },
    ScanCore { h: Arc<TrackedBuf>, bsz: usize, len: usize, dim: usize, state: usize },
    SumLast,
    SumAll,
    MeanAll { inv: f64 },
    Reshape,
    Transpose01 { a: usize, b: usize, d: usize },
    GatherTokens { idx: Vec<usize>, src_tokens: usize },
    NarrowAxis0 { start: usize },
    NarrowLast { start: usize, src_last: usize },
    ConcatLast { widths: Vec<usize> },
    ConcatTokens { counts: Vec<usize> },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by the graph nodes of the leaves they belong to.
pub struct Gradients {
    graph: u64,
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf tensor registered on the graph the
    /// backward pass consumed. None for constants and unused leaves.
    pub fn of(&self, t: &Tensor) -> Option<&Tensor> {
        let node = t.node?;
        if node.graph != self.graph {
            return None;
        }
        self.by_node.get(node.index).and_then(|g| g.as_ref())
    }
}

pub struct GradGraph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for GradGraph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl GradGraph {
    pub fn new() -> GradGraph {
        GradGraph { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Whether `t` is already registered on this tape.
    pub fn owns(&self, t: &Tensor) -> bool {
        matches!(t.node, Some(n) if n.graph == self.id)
    }

    /// Registers a trainable leaf. Its gradient appears in the backward result.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.ingest(t, true)
    }

    /// Registers a non-trainable input.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.ingest(t, false)
    }

    fn ingest(&mut self, t: &Tensor, needs_grad: bool) -> Tensor {
        let index = self.nodes.len();
        let bound = t.with_node(NodeRef { graph: self.id, index });
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value: bound.clone(), needs_grad });
        bound
    }

    fn input_id(&mut self, t: &Tensor) -> Result<usize, TensorError> {
        match t.node {
            Some(r) if r.graph == self.id => Ok(r.index),
            Some(_) => Err(TensorError::GraphMismatch),
            None => {
                let bound = self.constant(t);
                Ok(bound.node.unwrap().index)
            }
        }
    }

    fn push(
        &mut self,
        opname: &'static str,
        op: Op,
        inputs: Vec<usize>,
        shape: &[usize],
        data: Vec<f64>,
    ) -> Result<Tensor, TensorError> {
        ensure_finite(opname, &data)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let index = self.nodes.len();
        let out = Tensor::from_vec_unchecked(shape, data).with_node(NodeRef { graph: self.id, index });
        self.nodes.push(Node { op, inputs, value: out.clone(), needs_grad });
        Ok(out)
    }

    fn value(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_same("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_same("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_same("mul", Op::Mul, a, b, |x, y| x * y)
    }

    fn zip_same(
        &mut self,
        opname: &'static str,
        op: Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if a.shape() != b.shape() {
            return Err(shape_err(opname, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let ia = self.input_id(a)?;
        let ib = self.input_id(b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(opname, op, vec![ia, ib], &a.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let ia = self.input_id(a)?;
        let data = a.data().iter().map(|&x| x * c).collect();
        self.push("scale", Op::Scale(c), vec![ia], &a.shape().to_vec(), data)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_bias(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.suffix_op("add_bias", Op::AddBias, a, b, |x, y| x + y)
    }

    /// `a * b` with `b` broadcast over `a`'s leading axes.
    pub fn mul_bcast(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.suffix_op("mul_bcast", Op::MulBcast, a, b, |x, y| x * y)
    }

    fn suffix_op(
        &mut self,
        opname: &'static str,
        op: Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ra, rb) = (a.shape().len(), b.shape().len());
        if rb > ra || a.shape()[ra - rb..] != *b.shape() {
            return Err(shape_err(opname, format!("{:?} does not end with {:?}", a.shape(), b.shape())));
        }
        let sb = b.numel();
        let ia = self.input_id(a)?;
        let ib = self.input_id(b)?;
        let bd = b.data();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % sb])).collect();
        self.push(opname, op, vec![ia, ib], &a.shape().to_vec(), data)
    }

    // ── Matrix products ─────────────────────────────────────────────

    /// `a · b`. `b` may be `[k, n]` (shared across all leading rows of `a`)
    /// or `[B, k, n]` with `a` of shape `[B, m, k]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_impl("matmul", a, b, false)
    }

    /// `a · bᵀ`. `b` may be `[n, k]` or `[B, n, k]`.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        self.matmul_impl("matmul_nt", a, b, true)
    }

    fn matmul_impl(
        &mut self,
        opname: &'static str,
        a: &Tensor,
        b: &Tensor,
        trans_b: bool,
    ) -> Result<Tensor, TensorError> {
        let ash = a.shape().to_vec();
        let bsh = b.shape().to_vec();
        let (rhs_batched, batch, m, k, n, out_shape) = match bsh.len() {
            2 => {
                if ash.len() < 2 {
                    return Err(shape_err(opname, format!("lhs rank {} too small", ash.len())));
                }
                let k = *ash.last().unwrap();
                let (bk, bn) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
                if k != bk {
                    return Err(shape_err(opname, format!("{ash:?} x {bsh:?}")));
                }
                let m: usize = ash[..ash.len() - 1].iter().product();
                let mut out = ash[..ash.len() - 1].to_vec();
                out.push(bn);
                (false, 1usize, m, k, bn, out)
            }
            3 => {
                if ash.len() != 3 || ash[0] != bsh[0] {
                    return Err(shape_err(opname, format!("{ash:?} x {bsh:?}")));
                }
                let k = ash[2];
                let (bk, bn) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
                if k != bk {
                    return Err(shape_err(opname, format!("{ash:?} x {bsh:?}")));
                }
                (true, ash[0], ash[1], k, bn, vec![ash[0], ash[1], bn])
            }
            r => return Err(shape_err(opname, format!("rhs rank {r} unsupported"))),
        };
        let ia = self.input_id(a)?;
        let ib = self.input_id(b)?;
        let ad = self.value(ia).data().to_vec();
        let bd = self.value(ib).data().to_vec();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let asl = &ad[bi * m * k..(bi + 1) * m * k];
            let bsl = if rhs_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { &bd[..] };
            let osl = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm_nt(asl, bsl, m, k, n, osl);
            } else {
                mm(asl, bsl, m, k, n, osl);
            }
        }
        self.push(
            opname,
            Op::Matmul { trans_b, rhs_batched, batch, m, k, n },
            vec![ia, ib],
            &out_shape,
            out,
        )
    }

    /// `x·w + b` convenience.
    pub fn affine(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(&y, b)
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.input_id(a)?;
        let data = a.data().iter().map(|&x| unary_eval(kind, x)).collect();
        self.push(unary_name(kind), Op::Unary(kind), vec![ia], &a.shape().to_vec(), data)
    }

    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax_last(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape().is_empty() {
            return Err(shape_err("softmax", "scalar input".into()));
        }
        let d = *a.shape().last().unwrap();
        let ia = self.input_id(a)?;
        let ad = a.data();
        let mut out = vec![0.0; ad.len()];
        for r in 0..ad.len() / d {
            let row = &ad[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                o[j] = e;
                sum += e;
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push("softmax", Op::SoftmaxLast, vec![ia], &a.shape().to_vec(), out)
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`
    /// (shape `[D]`). Population variance, `rstd = 1/sqrt(var + eps)`.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        if x.shape().is_empty() {
            return Err(shape_err("layer_norm", "scalar input".into()));
        }
        let d = *x.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} vs width {d}", gamma.shape(), beta.shape()),
            ));
        }
        let ix = self.input_id(x)?;
        let ig = self.input_id(gamma)?;
        let ib = self.input_id(beta)?;
        let xd = self.value(ix).data().to_vec();
        let gd = self.value(ig).data().to_vec();
        let bd = self.value(ib).data().to_vec();
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        self.push(
            "layer_norm",
            Op::LayerNorm { mean: means, rstd: rstds },
            vec![ix, ig, ib],
            &x.shape().to_vec(),
            out,
        )
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// Depthwise 1-D convolution along the middle axis of `[B, L, D]` (or the
    /// first axis of `[L, D]`), kernels `[D, K]` with odd `K`, zero-padded so
    /// the output length equals the input length (non-causal, centered).
    pub fn conv1d_depthwise(&mut self, x: &Tensor, kernels: &Tensor) -> Result<Tensor, TensorError> {
        let (bsz, len, dim) = match *x.shape() {
            [l, d] => (1, l, d),
            [b, l, d] => (b, l, d),
            _ => return Err(shape_err("conv1d", format!("input rank {} unsupported", x.shape().len()))),
        };
        let klen = match *kernels.shape() {
            [kd, kk] if kd == dim && kk % 2 == 1 => kk,
            _ => {
                return Err(shape_err(
                    "conv1d",
                    format!("kernels {:?} vs channels {dim} (kernel length must be odd)", kernels.shape()),
                ))
            }
        };
        let pad = (klen - 1) / 2;
        let ix = self.input_id(x)?;
        let ik = self.input_id(kernels)?;
        let xd = self.value(ix).data().to_vec();
        let kd = self.value(ik).data().to_vec();
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for t in 0..len {
                for d in 0..dim {
                    let mut acc = 0.0;
                    for j in 0..klen {
                        let s = t + j;
                        if s >= pad && s - pad < len {
                            acc += kd[d * klen + j] * xd[(b * len + (s - pad)) * dim + d];
                        }
                    }
                    out[(b * len + t) * dim + d] = acc;
                }
            }
        }
        self.push("conv1d", Op::DepthwiseConv { klen }, vec![ix, ik], &x.shape().to_vec(), out)
    }

    // ── Selective scan core ─────────────────────────────────────────

    /// Recurrent core of the selective scan. Inputs:
    /// `u, delta: [B, L, D]`, `bmat, cmat: [B, L, N]`, `a_log: [D, N]`,
    /// `d_skip: [D]`. Per batch row, with `A = -exp(a_log)`:
    ///
    ///   h[t] = exp(delta[t] ⊗ A) ∘ h[t-1] + (delta[t] · bmat[t]) * u[t]
    ///   y[t,d] = ⟨cmat[t], h[t,d,:]⟩ + d_skip[d] * u[t,d]
    ///
    /// State starts at zero for every batch row. The hidden history is saved
    /// for the reverse pass, which keeps the footprint linear in `L`.
    pub fn scan_core(
        &mut self,
        u: &Tensor,
        delta: &Tensor,
        bmat: &Tensor,
        cmat: &Tensor,
        a_log: &Tensor,
        d_skip: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let (bsz, len, dim) = match *u.shape() {
            [b, l, d] => (b, l, d),
            _ => return Err(shape_err("scan", format!("input {:?} must be [B, L, D]", u.shape()))),
        };
        if delta.shape() != u.shape() {
            return Err(shape_err("scan", format!("delta {:?} vs input {:?}", delta.shape(), u.shape())));
        }
        let state = match *a_log.shape() {
            [d, n] if d == dim => n,
            _ => return Err(shape_err("scan", format!("a_log {:?} vs channels {dim}", a_log.shape()))),
        };
        if bmat.shape() != [bsz, len, state] || cmat.shape() != [bsz, len, state] {
            return Err(shape_err(
                "scan",
                format!("bmat {:?} / cmat {:?} vs [{bsz}, {len}, {state}]", bmat.shape(), cmat.shape()),
            ));
        }
        if d_skip.shape() != [dim] {
            return Err(shape_err("scan", format!("d_skip {:?} vs channels {dim}", d_skip.shape())));
        }
        let iu = self.input_id(u)?;
        let idl = self.input_id(delta)?;
        let ibm = self.input_id(bmat)?;
        let icm = self.input_id(cmat)?;
        let ial = self.input_id(a_log)?;
        let ids = self.input_id(d_skip)?;

        let ud = self.value(iu).data().to_vec();
        let dl = self.value(idl).data().to_vec();
        let bm = self.value(ibm).data().to_vec();
        let cm = self.value(icm).data().to_vec();
        let al = self.value(ial).data().to_vec();
        let ds = self.value(ids).data().to_vec();

        let a: Vec<f64> = al.iter().map(|&v| -v.exp()).collect();
        let mut h = vec![0.0; bsz * len * dim * state];
        let mut y = vec![0.0; bsz * len * dim];
        for b in 0..bsz {
            for t in 0..len {
                let row = (b * len + t) * dim;
                let crow = (b * len + t) * state;
                for d in 0..dim {
                    let dt = dl[row + d];
                    let uv = ud[row + d];
                    let hoff = (row + d) * state;
                    let hprev = if t > 0 { (row + d - dim) * state } else { 0 };
                    let mut acc = 0.0;
                    for n in 0..state {
                        let abar = (dt * a[d * state + n]).exp();
                        let prev = if t > 0 { h[hprev + n] } else { 0.0 };
                        let hv = abar * prev + dt * bm[crow + n] * uv;
                        h[hoff + n] = hv;
                        acc += cm[crow + n] * hv;
                    }
                    y[row + d] = acc + ds[d] * uv;
                }
            }
        }
        let saved = TrackedBuf::new(h);
        self.push(
            "scan",
            Op::ScanCore { h: saved, bsz, len, dim, state },
            vec![iu, idl, ibm, icm, ial, ids],
            &[bsz, len, dim],
            y,
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum over the last axis; `[..., k] -> [...]`.
    pub fn sum_last(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        if a.shape().is_empty() {
            return Err(shape_err("sum_last", "scalar input".into()));
        }
        let d = *a.shape().last().unwrap();
        let ia = self.input_id(a)?;
        let ad = a.data();
        let out: Vec<f64> = ad.chunks_exact(d).map(|c| c.iter().sum()).collect();
        let shape = a.shape()[..a.shape().len() - 1].to_vec();
        self.push("sum_last", Op::SumLast, vec![ia], &shape, out)
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.input_id(a)?;
        let s = a.data().iter().sum();
        self.push("sum_all", Op::SumAll, vec![ia], &[], vec![s])
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let ia = self.input_id(a)?;
        let inv = 1.0 / a.numel() as f64;
        let s = a.data().iter().sum::<f64>() * inv;
        self.push("mean_all", Op::MeanAll { inv }, vec![ia], &[], vec![s])
    }

    // ── Layout ──────────────────────────────────────────────────────

    /// Shape change without data movement; shares the payload.
    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { shape: shape.to_vec() });
        }
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        let ia = self.input_id(a)?;
        let index = self.nodes.len();
        let src = self.value(ia);
        let out = Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(src.payload()),
            node: Some(NodeRef { graph: self.id, index }),
        };
        let needs_grad = self.nodes[ia].needs_grad;
        self.nodes.push(Node { op: Op::Reshape, inputs: vec![ia], value: out.clone(), needs_grad });
        Ok(out)
    }

    /// `[A, B, D] -> [B, A, D]`.
    pub fn transpose01(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (a, b, d) = match *x.shape() {
            [a, b, d] => (a, b, d),
            _ => return Err(shape_err("transpose01", format!("rank {} input", x.shape().len()))),
        };
        let ix = self.input_id(x)?;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * d;
                let dst = (j * a + i) * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
        self.push("transpose01", Op::Transpose01 { a, b, d }, vec![ix], &[b, a, d], out)
    }

    /// Index-select along the middle axis of `[A, S, D]`. Indices may repeat;
    /// the backward pass scatter-adds.
    pub fn gather_tokens(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor, TensorError> {
        let (a, s, d) = match *x.shape() {
            [a, s, d] => (a, s, d),
            _ => return Err(shape_err("gather_tokens", format!("rank {} input", x.shape().len()))),
        };
        if idx.is_empty() || idx.iter().any(|&i| i >= s) {
            return Err(shape_err("gather_tokens", format!("indices {idx:?} out of range for {s} tokens")));
        }
        let ix = self.input_id(x)?;
        let xd = x.data();
        let m = idx.len();
        let mut out = vec![0.0; a * m * d];
        for ai in 0..a {
            for (oi, &si) in idx.iter().enumerate() {
                let src = (ai * s + si) * d;
                let dst = (ai * m + oi) * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
        self.push(
            "gather_tokens",
            Op::GatherTokens { idx: idx.to_vec(), src_tokens: s },
            vec![ix],
            &[a, m, d],
            out,
        )
    }

    /// Contiguous slice `[start, start+len)` along the first axis.
    pub fn narrow_axis0(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        if x.shape().is_empty() || len == 0 || start + len > x.shape()[0] {
            return Err(shape_err(
                "narrow_axis0",
                format!("[{start}, {start}+{len}) out of {:?}", x.shape()),
            ));
        }
        let rest: usize = x.shape()[1..].iter().product();
        let ix = self.input_id(x)?;
        let out = x.data()[start * rest..(start + len) * rest].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        self.push("narrow_axis0", Op::NarrowAxis0 { start }, vec![ix], &shape, out)
    }

    /// Contiguous slice along the last axis.
    pub fn narrow_last(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor, TensorError> {
        if x.shape().is_empty() {
            return Err(shape_err("narrow_last", "scalar input".into()));
        }
        let d = *x.shape().last().unwrap();
        if len == 0 || start + len > d {
            return Err(shape_err("narrow_last", format!("[{start}, {start}+{len}) out of width {d}")));
        }
        let ix = self.input_id(x)?;
        let xd = x.data();
        let rows = xd.len() / d;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push("narrow_last", Op::NarrowLast { start, src_last: d }, vec![ix], &shape, out)
    }

    /// Concatenation along the last axis; all inputs share leading extents.
    pub fn concat_last(&mut self, xs: &[&Tensor]) -> Result<Tensor, TensorError> {
        if xs.is_empty() {
            return Err(shape_err("concat_last", "no inputs".into()));
        }
        let lead = &xs[0].shape()[..xs[0].shape().len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            if x.shape().is_empty() || &x.shape()[..x.shape().len() - 1] != lead {
                return Err(shape_err(
                    "concat_last",
                    format!("{:?} does not share leading extents {lead:?}", x.shape()),
                ));
            }
            widths.push(*x.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut ids = Vec::with_capacity(xs.len());
        for x in xs {
            ids.push(self.input_id(x)?);
        }
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (xi, &id) in ids.iter().enumerate() {
                let w = widths[xi];
                let src = self.value(id).data();
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat_last", Op::ConcatLast { widths }, ids, &shape, out)
    }

    /// Concatenation along the middle (token) axis of `[A, S_i, D]` inputs.
    pub fn concat_tokens(&mut self, xs: &[&Tensor]) -> Result<Tensor, TensorError> {
        if xs.is_empty() {
            return Err(shape_err("concat_tokens", "no inputs".into()));
        }
        let (a0, d0) = match *xs[0].shape() {
            [a, _, d] => (a, d),
            _ => return Err(shape_err("concat_tokens", "inputs must be rank 3".into())),
        };
        let mut counts = Vec::with_capacity(xs.len());
        for x in xs {
            match *x.shape() {
                [a, s, d] if a == a0 && d == d0 => counts.push(s),
                _ => {
                    return Err(shape_err(
                        "concat_tokens",
                        format!("{:?} incompatible with [{a0}, *, {d0}]", x.shape()),
                    ))
                }
            }
        }
        let total: usize = counts.iter().sum();
        let mut ids = Vec::with_capacity(xs.len());
        for x in xs {
            ids.push(self.input_id(x)?);
        }
        let mut out = vec![0.0; a0 * total * d0];
        for ai in 0..a0 {
            let mut off = 0;
            for (xi, &id) in ids.iter().enumerate() {
                let s = counts[xi];
                let src = self.value(id).data();
                out[(ai * total + off) * d0..(ai * total + off + s) * d0]
                    .copy_from_slice(&src[ai * s * d0..(ai + 1) * s * d0]);
                off += s;
            }
        }
        self.push("concat_tokens", Op::ConcatTokens { counts }, ids, &[a0, total, d0], out)
    }

    // ── Reverse pass ────────────────────────────────────────────────

    /// Consumes the graph, propagating from a scalar `loss` back to every
    /// trainable leaf. Accumulation order is the fixed reverse construction
    /// order, so gradients are bitwise reproducible.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let node = match loss.node {
            Some(r) if r.graph == self.id => r.index,
            _ => return Err(TensorError::GraphMismatch),
        };
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[node] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut by_node: Vec<Option<Tensor>> = vec![None; n];
        for (i, slot) in grads.into_iter().enumerate() {
            if let (Op::Leaf, true, Some(g)) = (&self.nodes[i].op, self.nodes[i].needs_grad, slot) {
                by_node[i] = Some(Tensor::from_vec_unchecked(self.nodes[i].value.shape(), g));
            }
        }
        Ok(Gradients { graph: self.id, by_node })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let wants = |slot: usize| self.nodes[ins[slot]].needs_grad;
        macro_rules! slot {
            ($j:expr) => {
                grads[ins[$j]].get_or_insert_with(|| vec![0.0; self.nodes[ins[$j]].value.numel()])
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if wants(0) {
                    let ga = slot!(0);
                    for (t, &gv) in ga.iter_mut().zip(g) {
                        *t += gv;
                    }
                }
                if wants(1) {
                    let gb = slot!(1);
                    for (t, &gv) in gb.iter_mut().zip(g) {
                        *t += gv;
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    let ga = slot!(0);
                    for (t, &gv) in ga.iter_mut().zip(g) {
                        *t += gv;
                    }
                }
                if wants(1) {
                    let gb = slot!(1);
                    for (t, &gv) in gb.iter_mut().zip(g) {
                        *t -= gv;
                    }
                }
            }
            Op::Mul => {
                let ad = self.value(ins[0]).data().to_vec();
                let bd = self.value(ins[1]).data().to_vec();
                if wants(0) {
                    let ga = slot!(0);
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k];
                    }
                }
                if wants(1) {
                    let gb = slot!(1);
                    for k in 0..g.len() {
                        gb[k] += g[k] * ad[k];
                    }
                }
            }
            Op::Scale(c) => {
                if wants(0) {
                    let ga = slot!(0);
                    for k in 0..g.len() {
                        ga[k] += g[k] * c;
                    }
                }
            }
            Op::AddBias => {
                if wants(0) {
                    let ga = slot!(0);
                    for (t, &gv) in ga.iter_mut().zip(g) {
                        *t += gv;
                    }
                }
                if wants(1) {
                    let sb = self.value(ins[1]).numel();
                    let gb = slot!(1);
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % sb] += gv;
                    }
                }
            }
            Op::MulBcast => {
                let ad = self.value(ins[0]).data().to_vec();
                let bd = self.value(ins[1]).data().to_vec();
                let sb = bd.len();
                if wants(0) {
                    let ga = slot!(0);
                    for k in 0..g.len() {
                        ga[k] += g[k] * bd[k % sb];
                    }
                }
                if wants(1) {
                    let gb = slot!(1);
                    for k in 0..g.len() {
                        gb[k % sb] += g[k] * ad[k];
                    }
                }
            }
            Op::Matmul { trans_b, rhs_batched, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.value(ins[0]).data().to_vec();
                let bd = self.value(ins[1]).data().to_vec();
                if wants(0) {
                    let ga = slot!(0);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = if *rhs_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { &bd[..] };
                        let gasl = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // y = a·bᵀ with b [n,k]: da = g·b
                            mm(gs, bs, m, n, k, gasl);
                        } else {
                            // da = g·bᵀ with b [k,n]
                            mm_nt(gs, bs, m, n, k, gasl);
                        }
                    }
                }
                if wants(1) {
                    let gb = slot!(1);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &ad[bi * m * k..(bi + 1) * m * k];
                        let off = if *rhs_batched { bi * k * n } else { 0 };
                        let gbsl = &mut gb[off..off + k * n];
                        if *trans_b {
                            // db [n,k] = gᵀ·a
                            mm_tn(gs, asl, m, n, k, gbsl);
                        } else {
                            // db [k,n] = aᵀ·g
                            mm_tn(asl, gs, m, k, n, gbsl);
                        }
                    }
                }
            }
            Op::Unary(kind) => {
                if wants(0) {
                    let xd = self.value(ins[0]).data().to_vec();
                    let yd = node.value.data().to_vec();
                    let ga = slot!(0);
                    for i in 0..g.len() {
                        ga[i] += g[i] * unary_grad(*kind, xd[i], yd[i]);
                    }
                }
            }
            Op::SoftmaxLast => {
                if wants(0) {
                    let yd = node.value.data().to_vec();
                    let d = *node.value.shape().last().unwrap();
                    let ga = slot!(0);
                    for r in 0..yd.len() / d {
                        let ys = &yd[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let dot: f64 = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum();
                        let o = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            o[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { mean, rstd, .. } => {
                let xd = self.value(ins[0]).data().to_vec();
                let gd = self.value(ins[1]).data().to_vec();
                let d = *node.value.shape().last().unwrap();
                let rows = xd.len() / d;
                // dgamma/dbeta first (accumulate over rows), then dx per row.
                if wants(1) {
                    let gg = slot!(1);
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                            gg[j] += g[r * d + j] * xhat;
                        }
                    }
                }
                if wants(2) {
                    let gb = slot!(2);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(0) {
                    let gx = slot!(0);
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gy = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                            m1 += gy;
                            m2 += gy * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gy = g[r * d + j] * gd[j];
                            let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                            gx[r * d + j] += rstd[r] * (gy - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::DepthwiseConv { klen } => {
                let klen = *klen;
                let pad = (klen - 1) / 2;
                let xsh = self.value(ins[0]).shape();
                let (bsz, len, dim) = match *xsh {
                    [l, d] => (1, l, d),
                    [b, l, d] => (b, l, d),
                    _ => unreachable!(),
                };
                let xd = self.value(ins[0]).data().to_vec();
                let kd = self.value(ins[1]).data().to_vec();
                if wants(0) {
                    let gx = slot!(0);
                    for b in 0..bsz {
                        for t in 0..len {
                            for d in 0..dim {
                                let gv = g[(b * len + t) * dim + d];
                                for j in 0..klen {
                                    let s = t + j;
                                    if s >= pad && s - pad < len {
                                        gx[(b * len + (s - pad)) * dim + d] += kd[d * klen + j] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if wants(1) {
                    let gk = slot!(1);
                    for b in 0..bsz {
                        for t in 0..len {
                            for d in 0..dim {
                                let gv = g[(b * len + t) * dim + d];
                                for j in 0..klen {
                                    let s = t + j;
                                    if s >= pad && s - pad < len {
                                        gk[d * klen + j] += xd[(b * len + (s - pad)) * dim + d] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ScanCore { h, bsz, len, dim, state } => {
                self.scan_backward(ins, h.as_slice(), *bsz, *len, *dim, *state, g, grads);
            }
            Op::SumLast => {
                if wants(0) {
                    let d = *self.value(ins[0]).shape().last().unwrap();
                    let ga = slot!(0);
                    for (r, &gv) in g.iter().enumerate() {
                        for j in 0..d {
                            ga[r * d + j] += gv;
                        }
                    }
                }
            }
            Op::SumAll => {
                if wants(0) {
                    let ga = slot!(0);
                    for t in ga.iter_mut() {
                        *t += g[0];
                    }
                }
            }
            Op::MeanAll { inv } => {
                if wants(0) {
                    let ga = slot!(0);
                    let gv = g[0] * inv;
                    for t in ga.iter_mut() {
                        *t += gv;
                    }
                }
            }
            Op::Reshape => {
                if wants(0) {
                    let ga = slot!(0);
                    for (t, &gv) in ga.iter_mut().zip(g) {
                        *t += gv;
                    }
                }
            }
            Op::Transpose01 { a, b, d } => {
                if wants(0) {
                    let (a, b, d) = (*a, *b, *d);
                    let ga = slot!(0);
                    for j in 0..b {
                        for i in 0..a {
                            let src = (j * a + i) * d;
                            let dst = (i * b + j) * d;
                            for t in 0..d {
                                ga[dst + t] += g[src + t];
                            }
                        }
                    }
                }
            }
            Op::GatherTokens { idx, src_tokens } => {
                if wants(0) {
                    let s = *src_tokens;
                    let m = idx.len();
                    let d = *node.value.shape().last().unwrap();
                    let a = node.value.numel() / (m * d);
                    let ga = slot!(0);
                    for ai in 0..a {
                        for (oi, &si) in idx.iter().enumerate() {
                            let src = (ai * m + oi) * d;
                            let dst = (ai * s + si) * d;
                            for t in 0..d {
                                ga[dst + t] += g[src + t];
                            }
                        }
                    }
                }
            }
            Op::NarrowAxis0 { start } => {
                if wants(0) {
                    let rest: usize = node.value.shape()[1..].iter().product();
                    let ga = slot!(0);
                    for (k, &gv) in g.iter().enumerate() {
                        ga[start * rest + k] += gv;
                    }
                }
            }
            Op::NarrowLast { start, src_last } => {
                if wants(0) {
                    let w = *node.value.shape().last().unwrap();
                    let rows = node.value.numel() / w;
                    let ga = slot!(0);
                    for r in 0..rows {
                        for j in 0..w {
                            ga[r * src_last + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatLast { widths } => {
                let total: usize = widths.iter().sum();
                let rows = node.value.numel() / total;
                let mut off = 0;
                for (xi, &w) in widths.iter().enumerate() {
                    if wants(xi) {
                        let gx = slot!(xi);
                        for r in 0..rows {
                            for j in 0..w {
                                gx[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatTokens { counts } => {
                let total: usize = counts.iter().sum();
                let d = *node.value.shape().last().unwrap();
                let a = node.value.numel() / (total * d);
                let mut off = 0;
                for (xi, &s) in counts.iter().enumerate() {
                    if wants(xi) {
                        let gx = slot!(xi);
                        for ai in 0..a {
                            let src = (ai * total + off) * d;
                            let dst = ai * s * d;
                            for t in 0..s * d {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                    off += s;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_backward(
        &self,
        ins: &[usize],
        h: &[f64],
        bsz: usize,
        len: usize,
        dim: usize,
        state: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ud = self.value(ins[0]).data();
        let dl = self.value(ins[1]).data();
        let bm = self.value(ins[2]).data();
        let cm = self.value(ins[3]).data();
        let al = self.value(ins[4]).data();
        let ds = self.value(ins[5]).data();
        let a: Vec<f64> = al.iter().map(|&v| -v.exp()).collect();

        let mut du = vec![0.0; ud.len()];
        let mut ddl = vec![0.0; dl.len()];
        let mut dbm = vec![0.0; bm.len()];
        let mut dcm = vec![0.0; cm.len()];
        let mut dal = vec![0.0; al.len()];
        let mut dds = vec![0.0; ds.len()];

        // gh_carry[d, n] holds abar[t+1] * gh[t+1] for the row being swept.
        let mut gh_carry = vec![0.0; dim * state];
        for b in 0..bsz {
            gh_carry.iter_mut().for_each(|v| *v = 0.0);
            for t in (0..len).rev() {
                let row = (b * len + t) * dim;
                let crow = (b * len + t) * state;
                for d in 0..dim {
                    let dt = dl[row + d];
                    let uv = ud[row + d];
                    let gy = g[row + d];
                    let hoff = (row + d) * state;
                    let hprev = if t > 0 { (row + d - dim) * state } else { 0 };
                    dds[d] += gy * uv;
                    let mut du_acc = ds[d] * gy;
                    let mut ddt = 0.0;
                    for n in 0..state {
                        let an = a[d * state + n];
                        let abar = (dt * an).exp();
                        let hv = h[hoff + n];
                        let gh = gy * cm[crow + n] + gh_carry[d * state + n];
                        dcm[crow + n] += gy * hv;
                        let prev = if t > 0 { h[hprev + n] } else { 0.0 };
                        let dabar = gh * prev;
                        ddt += dabar * abar * an;
                        // dA flows through abar; A = -exp(a_log) so dA/da_log = A.
                        dal[d * state + n] += dabar * abar * dt * an;
                        dbm[crow + n] += gh * dt * uv;
                        du_acc += gh * dt * bm[crow + n];
                        ddt += gh * bm[crow + n] * uv;
                        gh_carry[d * state + n] = gh * abar;
                    }
                    ddl[row + d] += ddt;
                    du[row + d] += du_acc;
                }
            }
        }

        let pieces: [(usize, Vec<f64>); 6] = [
            (0, du),
            (1, ddl),
            (2, dbm),
            (3, dcm),
            (4, dal),
            (5, dds),
        ];
        for (slotn, piece) in pieces {
            if self.nodes[ins[slotn]].needs_grad {
                let dst = grads[ins[slotn]].get_or_insert_with(|| vec![0.0; piece.len()]);
                for (t, v) in dst.iter_mut().zip(piece) {
                    *t += v;
                }
            }
        }
    }
}

// ── Matrix kernels ──────────────────────────────────────────────────

/// `out += a · b` with a [m,k], b [k,n].
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            if av != 0.0 {
                let br = &b[kk * n..kk * n + n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
}

/// `out += a · bᵀ` with a [m,k], b [n,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += ar[kk] * br[kk];
            }
            or[j] += acc;
        }
    }
}

/// `out += aᵀ · b` with a [m,k], b [m,n], out [k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            if av != 0.0 {
                let or = &mut out[kk * n..kk * n + n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Silu => "silu",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Gelu => "gelu",
        UnaryKind::Softplus => "softplus",
        UnaryKind::Exp => "exp",
        UnaryKind::Sqrt => "sqrt",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_eval(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        }
        UnaryKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Sqrt => x.sqrt(),
    }
}

fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Gelu => {
            let inner = GELU_C * (x + GELU_A * x * x * x);
            let t = inner.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Exp => y,
        // Guarded at exactly zero; the true derivative is unbounded there.
        UnaryKind::Sqrt => 0.5 / y.max(1e-12),
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
            assert!((g - w).abs() <= tol, "index {i}: got {g}, want {w}");
        }
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut g = GradGraph::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_close(y.data(), &[4.0, 5.0, 10.0, 11.0], 1e-15);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = GradGraph::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(g.matmul(&a, &b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn batched_matmul_and_nt_agree_with_flat() {
        let mut g = GradGraph::new();
        let a = t(&[2, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, 0.5, 2.0, 3.0, -2.0, 1.0]);
        let b = t(&[2, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0, 0.0, 2.0, -1.0, 1.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_close(&y.data()[..4], &[4.0, 5.0, 10.0, 11.0], 1e-15);
        // second batch, first row: [-1, 0.5, 2] x [[2,0],[0,2],[-1,1]] = [-4, 3]
        assert_close(&y.data()[4..6], &[-4.0, 3.0], 1e-15);

        // a·bᵀ with b stored transposed must match.
        let mut g2 = GradGraph::new();
        let bt = t(&[2, 2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0, 0.0, -1.0, 0.0, 2.0, 1.0]);
        let y2 = g2.matmul_nt(&a, &bt).unwrap();
        assert_close(y2.data(), y.data(), 1e-15);
    }

    #[test]
    fn softmax_row_is_two_thirds_one_third() {
        let mut g = GradGraph::new();
        let x = t(&[1, 2], &[(2.0f64).ln(), 0.0]);
        let y = g.softmax_last(&x).unwrap();
        assert_close(y.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn layer_norm_known_rows() {
        let mut g = GradGraph::new();
        let x = t(&[2, 3], &[1.0, 1.0, 1.0, 1.0, 2.0, 3.0]);
        let gamma = Tensor::ones(&[3]);
        let beta = Tensor::zeros(&[3]);
        let y = g.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert_close(&y.data()[..3], &[0.0, 0.0, 0.0], 1e-9);
        let r = (2.0f64 / 3.0 + 1e-5).sqrt().recip();
        assert_close(&y.data()[3..], &[-r, 0.0, r], 1e-12);
    }

    #[test]
    fn depthwise_conv_same_padding() {
        let mut g = GradGraph::new();
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let k = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let y = g.conv1d_depthwise(&x, &k).unwrap();
        assert_close(y.data(), &[3.0, 6.0, 5.0], 1e-15);
    }

    #[test]
    fn scan_core_single_channel_closed_form() {
        // delta = ln 2, A = -1 (a_log = 0) so abar = 0.5; B = C = 1, skip 0.
        // y1 = ln2, y2 = 1.5*ln2.
        let mut g = GradGraph::new();
        let l2 = (2.0f64).ln();
        let u = t(&[1, 2, 1], &[1.0, 1.0]);
        let delta = t(&[1, 2, 1], &[l2, l2]);
        let bmat = t(&[1, 2, 1], &[1.0, 1.0]);
        let cmat = t(&[1, 2, 1], &[1.0, 1.0]);
        let a_log = t(&[1, 1], &[0.0]);
        let d_skip = t(&[1], &[0.0]);
        let y = g.scan_core(&u, &delta, &bmat, &cmat, &a_log, &d_skip).unwrap();
        assert_close(y.data(), &[l2, 1.5 * l2], 1e-15);
    }

    #[test]
    fn backward_through_matmul_chain() {
        // loss = sum(a·b), hand gradients: da = ones·bᵀ, db = aᵀ·ones.
        let mut g = GradGraph::new();
        let a0 = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b0 = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let a = g.leaf(&a0);
        let b = g.leaf(&b0);
        let y = g.matmul(&a, &b).unwrap();
        let loss = g.sum_all(&y).unwrap();
        assert_eq!(loss.scalar(), 19.0 + 22.0 + 43.0 + 50.0);
        let grads = g.backward(&loss).unwrap();
        assert_close(grads.of(&a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0], 1e-12);
        assert_close(grads.of(&b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0], 1e-12);
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // loss = sum(x*x): d/dx = 2x.
        let mut g = GradGraph::new();
        let x0 = t(&[3], &[1.0, -2.0, 0.5]);
        let x = g.leaf(&x0);
        let y = g.mul(&x, &x).unwrap();
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_close(grads.of(&x).unwrap().data(), &[2.0, -4.0, 1.0], 1e-12);
    }

    #[test]
    fn gather_scatter_round_trip_gradient() {
        let mut g = GradGraph::new();
        let x0 = t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = g.leaf(&x0);
        let y = g.gather_tokens(&x, &[2, 0, 2]).unwrap();
        assert_close(y.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0], 1e-15);
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        // token 2 picked twice, token 1 never.
        assert_close(grads.of(&x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 1e-15);
    }

    #[test]
    fn graph_mismatch_is_detected() {
        let mut g1 = GradGraph::new();
        let mut g2 = GradGraph::new();
        let x = g1.leaf(&Tensor::ones(&[2]));
        assert!(matches!(g2.add(&x, &x), Err(TensorError::GraphMismatch)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = GradGraph::new();
        let x = g.leaf(&Tensor::ones(&[2]));
        let y = g.scale(&x, 2.0).unwrap();
        assert!(matches!(g.backward(&y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn checked_mode_flags_non_finite_results() {
        let mut g = GradGraph::new();
        let x = t(&[1], &[1e308]);
        let r = g.scale(&x, 10.0);
        assert!(matches!(r, Err(TensorError::NonFinite { op: "scale" })));
    }
}
