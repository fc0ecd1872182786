//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every op whose inputs require gradients. Ops are
//! appended in execution order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] simply walks it in reverse.
//!
//! Values live in the returned [`Var`]s, not on the tape; an inference
//! graph records nothing and intermediates are freed as soon as they drop.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Precision, Tensor};

/// Per-input gradient rule: receives the output gradient and a mask of which
/// inputs need a gradient, returns one optional flat gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    numel: usize,
}

/// A value flowing through a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

/// Gradients of the leaves reached by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|id| self.by_node.get(&id))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Exp,
    Sigmoid,
    Silu,
    Softplus,
    Relu,
}

pub struct Graph {
    precision: Precision,
    recording: bool,
    check_finite: bool,
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<Vec<usize>>,
    consumed: Cell<bool>,
    scan_steps: Cell<u64>,
}

impl Graph {
    /// A recording graph.
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            recording: true,
            check_finite: false,
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            scan_steps: Cell::new(0),
        }
    }

    /// A graph that evaluates ops without recording them.
    pub fn inference(precision: Precision) -> Self {
        Graph {
            recording: false,
            ..Graph::new(precision)
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn tape_len(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Total recurrence steps executed by selective scans on this graph.
    pub fn scan_steps(&self) -> u64 {
        self.scan_steps.get()
    }

    pub(crate) fn count_scan_steps(&self, steps: u64) {
        self.scan_steps.set(self.scan_steps.get() + steps);
    }

    /// A trainable leaf. On an inference graph this is a constant.
    pub fn leaf(&self, value: Tensor) -> Var {
        let value = self.round_tensor(value);
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            numel: value.numel(),
        });
        self.leaves.borrow_mut().push(id);
        Var {
            value,
            node: Some(id),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: self.round_tensor(value),
            node: None,
        }
    }

    fn round_tensor(&self, t: Tensor) -> Tensor {
        match self.precision {
            Precision::Double => t,
            Precision::Single => t.map(|v| v as f32 as f64),
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        shape: &[usize],
        data: Vec<f64>,
        inputs: &[&Var],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var> {
        let data = self.precision.round_vec(data);
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let value = Tensor::new(shape, data)?;
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        if !tracked {
            return Ok(Var { value, node: None });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
            numel: value.numel(),
        });
        Ok(Var {
            value,
            node: Some(id),
        })
    }

    /// Accumulate gradients of a scalar `loss` into every leaf.
    ///
    /// Leaves the loss does not depend on receive zeros. A tape supports a
    /// single backward pass.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        if !loss.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();

        if let Some(root) = loss.node {
            grads[root] = Some(vec![1.0]);
            for id in (0..=root).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                match &node.backward {
                    None => {
                        out.by_node
                            .insert(id, Tensor::new(&[g.len()], g).expect("non-empty gradient"));
                    }
                    Some(rule) => {
                        let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                        let parts = rule(&g, &needs);
                        for (input, part) in node.inputs.iter().zip(parts) {
                            let (Some(pid), Some(part)) = (input, part) else { continue };
                            match &mut grads[*pid] {
                                Some(acc) => {
                                    for (a, p) in acc.iter_mut().zip(&part) {
                                        *a += p;
                                    }
                                }
                                slot => *slot = Some(part),
                            }
                        }
                    }
                }
            }
        }

        for &leaf in self.leaves.borrow().iter() {
            let numel = nodes[leaf].numel;
            out.by_node
                .entry(leaf)
                .or_insert_with(|| Tensor::new(&[numel], vec![0.0; numel]).expect("leaf is non-empty"));
        }
        Ok(out)
    }

    /// Gradient of `var`'s leaf, reshaped to the leaf's own shape.
    pub fn grad_of(grads: &Gradients, var: &Var) -> Option<Tensor> {
        grads.get(var).map(|g| g.reshape(var.shape()).expect("gradient numel matches leaf"))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn elementwise(&self, kind: ElementwiseKind, a: &Var, b: Option<&Var>) -> Result<Var> {
        use ElementwiseKind::*;
        let need_b = || b.ok_or_else(|| Error::invalid("elementwise", format!("{kind:?} needs two operands")));
        match kind {
            Add => self.add(a, need_b()?),
            Sub => self.sub(a, need_b()?),
            Mul => self.mul(a, need_b()?),
            Exp => self.exp(a),
            Sigmoid => self.sigmoid(a),
            Silu => self.silu(a),
            Softplus => self.softplus(a),
            Relu => self.relu(a),
        }
    }

    fn binary(
        &self,
        op: &'static str,
        a: &Var,
        b: &Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        let shape = if sa == sb || b.value.is_scalar() {
            sa.to_vec()
        } else if a.value.is_scalar() {
            sb.to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let (at, bt) = (a.value.clone(), b.value.clone());
        let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| f(pick(&at, i), pick(&bt, i))).collect();
        self.record(op, &shape, data, &[a, b], move |g, needs| {
            let side = |deriv: fn(f64, f64) -> f64, own: &Tensor| {
                let mut out = vec![0.0; own.numel()];
                for (i, gi) in g.iter().enumerate() {
                    let d = gi * deriv(pick(&at, i), pick(&bt, i));
                    if own.numel() == 1 {
                        out[0] += d;
                    } else {
                        out[i] = d;
                    }
                }
                out
            };
            vec![
                needs[0].then(|| side(da, &at)),
                needs[1].then(|| side(db, &bt)),
            ]
        })
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    fn unary(&self, op: &'static str, a: &Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let x = a.value.clone();
        let y = out.clone();
        self.record(op, a.shape(), out, &[a], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.data().iter().zip(&y))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect(),
            )]
        })
    }

    pub fn neg(&self, a: &Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self, a: &Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: &Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self, a: &Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self, a: &Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        })
    }

    pub fn softplus(&self, a: &Var) -> Result<Var> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&self, a: &Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn scale(&self, a: &Var, k: f64) -> Result<Var> {
        let out = a.data().iter().map(|x| x * k).collect();
        self.record("scale", a.shape(), out, &[a], move |g, _| {
            vec![Some(g.iter().map(|gi| gi * k).collect())]
        })
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (at, bt) = (a.value.clone(), b.value.clone());
        let out = matmul_raw(at.data(), bt.data(), m, k, n);
        self.record("matmul", &[m, n], out, &[a, b], move |g, needs| {
            // dA = dY Bᵀ, dB = Aᵀ dY
            let ga = needs[0].then(|| matmul_nt(g, bt.data(), m, n, k));
            let gb = needs[1].then(|| matmul_tn(at.data(), g, k, m, n));
            vec![ga, gb]
        })
    }

    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let idx: Vec<usize> = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(a, Arc::new(idx), &[c, r])
    }

    // ---- shape and indexing ------------------------------------------------

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let value = a.value.reshape(shape)?;
        self.record("reshape", value.shape(), value.to_vec(), &[a], |g, _| vec![Some(g.to_vec())])
    }

    /// `out[i] = a[index[i]]`, with `out` taking `shape`.
    ///
    /// Covers slicing, permutation and broadcasting; the backward pass
    /// scatter-adds into the source.
    pub fn gather(&self, a: &Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::invalid(
                "gather",
                format!("{} indices cannot fill shape {shape:?}", index.len()),
            ));
        }
        let src = a.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {} elements", src.len())));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let n_src = src.len();
        self.record("gather", shape, out, &[a], move |g, _| {
            let mut ga = vec![0.0; n_src];
            for (gi, &i) in g.iter().zip(index.iter()) {
                ga[i] += gi;
            }
            vec![Some(ga)]
        })
    }

    /// Flat concatenation of all inputs, returned with `shape`.
    pub fn concat(&self, parts: &[&Var], shape: &[usize]) -> Result<Var> {
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let mut out = Vec::with_capacity(sizes.iter().sum());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        if shape.iter().product::<usize>() != out.len() {
            return Err(Error::invalid("concat", format!("{} elements cannot fill {shape:?}", out.len())));
        }
        self.record("concat", shape, out, parts, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let piece = need.then(|| g[start..start + len].to_vec());
                    start += len;
                    piece
                })
                .collect()
        })
    }

    /// Repeat a per-channel vector `[C]` over trailing extents: `[C, rest..]`.
    pub fn broadcast_channels(&self, v: &Var, shape: &[usize]) -> Result<Var> {
        if v.shape() != [shape[0]] {
            return Err(Error::ShapeMismatch {
                op: "broadcast_channels",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let idx = (0..shape[0] * inner).map(|i| i / inner).collect();
        self.gather(v, Arc::new(idx), shape)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_axes(&self, a: &Var, axes: &[usize]) -> Result<Var> {
        let (shape, map) = reduction_map("sum", a.shape(), axes)?;
        let n_out: usize = shape.iter().product();
        let mut out = vec![0.0; n_out];
        for (x, &o) in a.data().iter().zip(&map) {
            out[o] += x;
        }
        self.record("sum", &shape, out, &[a], move |g, _| {
            vec![Some(map.iter().map(|&o| g[o]).collect())]
        })
    }

    pub fn mean_axes(&self, a: &Var, axes: &[usize]) -> Result<Var> {
        let count: usize = a.numel() / reduced_numel(a.shape(), axes)?;
        let s = self.sum_axes(a, axes)?;
        self.scale(&s, 1.0 / count as f64)
    }

    pub fn sum(&self, a: &Var) -> Result<Var> {
        let axes: Vec<usize> = (0..a.shape().len()).collect();
        self.sum_axes(a, &axes)
    }

    pub fn mean(&self, a: &Var) -> Result<Var> {
        let axes: Vec<usize> = (0..a.shape().len()).collect();
        self.mean_axes(a, &axes)
    }

    /// Global average pool: `[C, H, W] -> [C]`.
    pub fn global_avg_pool(&self, a: &Var) -> Result<Var> {
        if a.shape().len() != 3 {
            return Err(Error::invalid("global_avg_pool", format!("expected [C, H, W], got {:?}", a.shape())));
        }
        self.mean_axes(a, &[1, 2])
    }

    // ---- normalization and losses ------------------------------------------

    /// Normalize over the leading (channel) axis at every trailing position.
    pub fn channel_norm(&self, a: &Var, eps: f64) -> Result<Var> {
        let s = a.shape();
        if s.len() < 2 {
            return Err(Error::invalid("channel_norm", format!("expected [C, ...], got {s:?}")));
        }
        let c = s[0];
        let m: usize = s[1..].iter().product();
        let x = a.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; m];
        for j in 0..m {
            let mean = (0..c).map(|i| x[i * m + j]).sum::<f64>() / c as f64;
            let var = (0..c).map(|i| (x[i * m + j] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[j] = r;
            for i in 0..c {
                xhat[i * m + j] = (x[i * m + j] - mean) * r;
            }
        }
        let saved = xhat.clone();
        self.record("channel_norm", s, xhat, &[a], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for j in 0..m {
                let mut mg = 0.0;
                let mut mgx = 0.0;
                for i in 0..c {
                    mg += g[i * m + j];
                    mgx += g[i * m + j] * saved[i * m + j];
                }
                mg /= c as f64;
                mgx /= c as f64;
                for i in 0..c {
                    let k = i * m + j;
                    gx[k] = inv_std[j] * (g[k] - mg - saved[k] * mgx);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax of a `[K]` vector.
    pub fn softmax(&self, logits: &Var) -> Result<Var> {
        let p = softmax_vec(logits.data());
        let saved = p.clone();
        self.record("softmax", logits.shape(), p, &[logits], move |g, _| {
            let dot: f64 = g.iter().zip(&saved).map(|(a, b)| a * b).sum();
            vec![Some(saved.iter().zip(g).map(|(p, gi)| p * (gi - dot)).collect())]
        })
    }

    /// `-log softmax(logits)[label]` for a `[K]` logit vector.
    pub fn cross_entropy(&self, logits: &Var, label: usize) -> Result<Var> {
        let k = logits.numel();
        if label >= k {
            return Err(Error::invalid("cross_entropy", format!("label {label} out of range for {k} classes")));
        }
        let p = softmax_vec(logits.data());
        let loss = -(p[label].max(f64::MIN_POSITIVE)).ln();
        self.record("cross_entropy", &[1], vec![loss], &[logits], move |g, _| {
            let mut d = p.clone();
            d[label] -= 1.0;
            vec![Some(d.into_iter().map(|v| v * g[0]).collect())]
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `[m×k]·[k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m×n]·[k×n]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = ar.iter().zip(&b[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[m×k]ᵀ·[m×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn reduced_numel(shape: &[usize], axes: &[usize]) -> Result<usize> {
    Ok(reduction_map("reduce", shape, axes)?.0.iter().product())
}

/// Output shape and per-element output offset for a reduction.
fn reduction_map(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.is_empty() {
        return Err(Error::EmptyAxes { op });
    }
    let rank = shape.len();
    let mut reduce = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::InvalidAxis { op, axis: ax, rank });
        }
        reduce[ax] = true;
    }
    let kept: Vec<usize> = (0..rank).filter(|&d| !reduce[d]).map(|d| shape[d]).collect();
    let out_shape = if kept.is_empty() { vec![1] } else { kept };

    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    for _ in 0..n {
        let mut o = 0;
        for d in 0..rank {
            if !reduce[d] {
                o = o * shape[d] + index[d];
            }
        }
        map.push(o);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    Ok((out_shape, map))
}
