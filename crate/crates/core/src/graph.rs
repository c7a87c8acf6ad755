//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks the tape
//! in reverse, visiting every node exactly once. The tape is rebuilt each
//! training step.
//!
//! Broadcasting is limited to leading batch dimensions: an elementwise
//! binary op accepts `lhs` and `rhs` of equal shape, or an `rhs` whose shape
//! matches the trailing dimensions of `lhs` (the usual `[batch, n] + [n]`
//! bias pattern).

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    /// Copies the parent's forward value but records no edge, so gradients
    /// never reach the parent's ancestors through this node.
    StopGrad,
    Matmul(Value, Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Relu(Value),
    Sigmoid(Value),
    Tanh(Value),
    Log(Value),
    Scale(Value, E),
    Softmax(Value),
    CrossEntropyLogits(Value, Vec<usize>),
    Concat(Vec<Value>, usize),
    Slice {
        input: Value,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(Value),
    MeanAll(Value),
    /// Forward: indicator(s > 0.5), exactly 0 or 1. Backward: identity.
    SteBinarize(Value),
    /// Fused stochastic weight masking: `w * ste(sigmoid((l - g)/tau))`
    /// in one pass. The soft sample is saved as the node's aux tensor.
    MaskedWeight { weight: Value, logits: Value, inv_tau: E },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Log(..) => "log",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropyLogits(..) => "cross_entropy_with_logits",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAll(..) => "reduce_sum",
            Op::MeanAll(..) => "reduce_mean",
            Op::SteBinarize(..) => "ste_binarize",
            Op::MaskedWeight { .. } => "masked_weight",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    /// Saved forward byproduct (softmax probabilities for cross-entropy).
    aux: Option<Tensor<E>>,
}

pub struct Graph<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, tensor: Tensor<E>, requires_grad: bool) -> Value {
        self.push_unchecked(tensor, Op::Leaf, requires_grad, None)
    }

    pub fn constant(&mut self, tensor: Tensor<E>) -> Value {
        self.leaf(tensor, false)
    }

    fn push_unchecked(
        &mut self,
        value: Tensor<E>,
        op: Op<E>,
        requires_grad: bool,
        aux: Option<Tensor<E>>,
    ) -> Value {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Value(id)
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, aux: Option<Tensor<E>>) -> Result<Value> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        let requires_grad = self.parents_require_grad(&op);
        Ok(self.push_unchecked(value, op, requires_grad, aux))
    }

    fn parents_require_grad(&self, op: &Op<E>) -> bool {
        let check = |v: &Value| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::StopGrad => false,
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                check(a) || check(b)
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::CrossEntropyLogits(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SteBinarize(a)
            | Op::Slice { input: a, .. } => check(a),
            Op::Concat(parts, _) => parts.iter().any(check),
            Op::MaskedWeight { weight, logits, .. } => check(weight) || check(logits),
        }
    }

    // ---- forward ops ----

    /// Forward value identical to `x`; contributes exactly zero gradient to
    /// `x`'s ancestors.
    pub fn stop_gradient(&mut self, x: Value) -> Value {
        let value = self.nodes[x.0].value.clone();
        self.push_unchecked(value, Op::StopGrad, false, None)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::Matmul(a, b), None)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), None)
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let out = self.value(a).map(|x| if x > E::zero() { x } else { E::zero() });
        self.push(out, Op::Relu(a), None)
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        let out = self.value(a).map(|x| x.sigmoid());
        self.push(out, Op::Sigmoid(a), None)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), None)
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), None)
    }

    pub fn scale(&mut self, a: Value, c: E) -> Result<Value> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), None)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, a: Value) -> Result<Value> {
        let t = self.value(a);
        let (rows, cols) = t.dims2()?;
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            softmax_row(row, &mut out[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        self.push(out, Op::Softmax(a), None)
    }

    /// Mean over rows of `logsumexp(row) - row[target]`; the scalar loss for
    /// one classification head.
    pub fn cross_entropy_with_logits(&mut self, logits: Value, targets: &[usize]) -> Result<Value> {
        let t = self.value(logits);
        let (rows, cols) = t.dims2()?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("target class {} out of range (cols={})", bad, cols),
            ));
        }
        let mut probs = vec![E::zero(); rows * cols];
        let mut total = E::zero();
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let p = &mut probs[r * cols..(r + 1) * cols];
            let lse = softmax_row(row, p);
            total += lse - row[targets[r]];
        }
        let mean = total / E::from_f64(rows as f64);
        let aux = Tensor::new(vec![rows, cols], probs)?;
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropyLogits(logits, targets.to_vec()),
            Some(aux),
        )
    }

    /// Concatenate along `axis` (rank-2 tensors, or rank-1 with axis 0).
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let rank = self.value(parts[0]).shape().len();
        if axis >= rank.max(1) {
            return Err(Error::shape("concat", format!("axis {} out of range", axis)));
        }
        let out = if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                let t = self.value(p);
                if t.shape().len() != 1 {
                    return Err(Error::shape("concat", "mixed ranks"));
                }
                data.extend_from_slice(t.data());
            }
            let n = data.len();
            Tensor::new(vec![n], data)?
        } else {
            let (r0, _) = self.value(parts[0]).dims2()?;
            match axis {
                0 => {
                    let cols = self.value(parts[0]).dims2()?.1;
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).dims2()?;
                        if c != cols {
                            return Err(Error::shape("concat", "column counts differ"));
                        }
                        rows += r;
                        data.extend_from_slice(self.value(p).data());
                    }
                    Tensor::new(vec![rows, cols], data)?
                }
                _ => {
                    let mut widths = Vec::with_capacity(parts.len());
                    let mut total = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).dims2()?;
                        if r != r0 {
                            return Err(Error::shape("concat", "row counts differ"));
                        }
                        widths.push(c);
                        total += c;
                    }
                    let mut data = vec![E::zero(); r0 * total];
                    for row in 0..r0 {
                        let mut offset = 0;
                        for (i, &p) in parts.iter().enumerate() {
                            let c = widths[i];
                            let src = &self.value(p).data()[row * c..(row + 1) * c];
                            data[row * total + offset..row * total + offset + c]
                                .copy_from_slice(src);
                            offset += c;
                        }
                    }
                    Tensor::new(vec![r0, total], data)?
                }
            }
        };
        self.push(out, Op::Concat(parts.to_vec(), axis), None)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, input: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let t = self.value(input);
        let out = slice_tensor(t, axis, start, len)?;
        self.push(out, Op::Slice { input, axis, start, len }, None)
    }

    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), None)
    }

    pub fn mean_all(&mut self, a: Value) -> Result<Value> {
        let t = self.value(a);
        let s = t.sum() / E::from_f64(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a), None)
    }

    /// Straight-through binarization: forward is the exact indicator
    /// `s > 0.5` (so values are exactly 0 or 1), backward passes the
    /// incoming gradient through unchanged.
    pub fn ste_binarize(&mut self, s: Value) -> Result<Value> {
        let out = self
            .value(s)
            .map(|x| if x > E::from_f64(0.5) { E::one() } else { E::zero() });
        self.push(out, Op::SteBinarize(s), None)
    }

    /// One stochastically masked weight tensor, fused:
    /// `w * ste(sigmoid((l - noise)/tau))`. Mathematically identical to the
    /// sub/scale/sigmoid/ste/mul composition, in a single pass. Backward:
    /// `dW = g * b` and `dl = g * w * s(1-s)/tau` (threshold passes the
    /// gradient straight through).
    pub fn masked_weight(
        &mut self,
        weight: Value,
        logits: Value,
        noise: &Tensor<E>,
        temperature: f64,
    ) -> Result<Value> {
        let w = self.value(weight);
        let l = self.value(logits);
        if w.shape() != l.shape() || w.shape() != noise.shape() {
            return Err(Error::shape(
                "masked_weight",
                format!(
                    "weight {:?}, logits {:?}, noise {:?}",
                    w.shape(),
                    l.shape(),
                    noise.shape()
                ),
            ));
        }
        let inv_tau = E::from_f64(1.0 / temperature);
        let half = E::from_f64(0.5);
        let n = w.numel();
        let mut soft = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = ((l.data()[i] - noise.data()[i]) * inv_tau).sigmoid();
            soft.push(s);
            out.push(if s > half { w.data()[i] } else { E::zero() });
        }
        let aux = Tensor::new(w.shape().to_vec(), soft)?;
        let out = Tensor::new(w.shape().to_vec(), out)?;
        self.push(
            out,
            Op::MaskedWeight {
                weight,
                logits,
                inv_tau,
            },
            Some(aux),
        )
    }

    // ---- backward ----

    /// Gradients of a scalar `loss` with respect to every requires-grad
    /// leaf. Each node is visited exactly once, in reverse tape order
    /// (which is a reverse topological order by construction).
    pub fn backward(&mut self, loss: Value) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf | Op::StopGrad => {
                    // keep leaf gradient for the caller
                    grads[id] = Some(g);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.value(a).dims2()?;
                    let n = self.value(b).dims2()?.1;
                    if self.nodes[a.0].requires_grad {
                        // dA = dC * B^T : (m,n)x(n,k)
                        let mut da = vec![E::zero(); m * k];
                        E::gemm(m, n, k, g.data(), false, self.value(b).data(), true, &mut da);
                        accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da)?);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T * dC : (k,m)x(m,n)
                        let mut db = vec![E::zero(); k * n];
                        E::gemm(k, m, n, self.value(a).data(), true, g.data(), false, &mut db);
                        accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = reduce_to_shape(&g, self.value(b).shape());
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = reduce_to_shape(&g, self.value(b).shape());
                        accumulate(&mut grads[b.0], gb.scale(-E::one()));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let bt = self.value(b);
                        let ga = mul_broadcast_rhs(&g, bt);
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = reduce_to_shape_weighted(&g, self.value(a), self.value(b).shape());
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let mask = self.value(a);
                        let ga = g
                            .zip_map(mask, |gx, x| if x > E::zero() { gx } else { E::zero() })?;
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let y = &self.nodes[id].value;
                        let ga = g.zip_map(y, |gx, yv| gx * yv * (E::one() - yv))?;
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Tanh(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let y = &self.nodes[id].value;
                        let ga = g.zip_map(y, |gx, yv| gx * (E::one() - yv * yv))?;
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Log(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let x = self.value(a);
                        let ga = g.zip_map(x, |gx, xv| gx / xv)?;
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], g.scale(c));
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let y = &self.nodes[id].value;
                        let (rows, cols) = y.dims2()?;
                        let mut out = vec![E::zero(); rows * cols];
                        for r in 0..rows {
                            let yr = &y.data()[r * cols..(r + 1) * cols];
                            let gr = &g.data()[r * cols..(r + 1) * cols];
                            let dot = yr
                                .iter()
                                .zip(gr)
                                .fold(E::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                            for c in 0..cols {
                                out[r * cols + c] = yr[c] * (gr[c] - dot);
                            }
                        }
                        accumulate(&mut grads[a.0], Tensor::new(vec![rows, cols], out)?);
                    }
                }
                Op::CrossEntropyLogits(a, targets) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let probs = self.nodes[id]
                            .aux
                            .as_ref()
                            .expect("cross-entropy node always saves probabilities");
                        let (rows, cols) = probs.dims2()?;
                        let gscalar = g.scalar_value() / E::from_f64(rows as f64);
                        let mut out = probs.data().to_vec();
                        for (r, &t) in targets.iter().enumerate() {
                            out[r * cols + t] = out[r * cols + t] - E::one();
                        }
                        for x in &mut out {
                            *x = *x * gscalar;
                        }
                        accumulate(&mut grads[a.0], Tensor::new(vec![rows, cols], out)?);
                    }
                }
                Op::Concat(parts, axis) => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let mut offset = 0;
                    for p in parts {
                        let pshape = self.value(p).shape().to_vec();
                        let width = if pshape.len() == 1 {
                            pshape[0]
                        } else if axis == 0 {
                            pshape[0]
                        } else {
                            pshape[1]
                        };
                        if self.nodes[p.0].requires_grad {
                            let gp = slice_tensor(&g, axis, offset, width)?;
                            accumulate(&mut grads[p.0], gp);
                        }
                        offset += width;
                    }
                }
                Op::Slice { input, axis, start, len } => {
                    let (input, axis, start, len) = (*input, *axis, *start, *len);
                    if self.nodes[input.0].requires_grad {
                        let full = scatter_slice(&g, self.value(input).shape(), axis, start, len)?;
                        accumulate(&mut grads[input.0], full);
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let gv = g.scalar_value();
                        let ga = Tensor::filled(self.value(a).shape(), gv);
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        let n = E::from_f64(self.value(a).numel() as f64);
                        let gv = g.scalar_value() / n;
                        let ga = Tensor::filled(self.value(a).shape(), gv);
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::SteBinarize(a) => {
                    let a = *a;
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                }
                Op::MaskedWeight { weight, logits, inv_tau } => {
                    let (weight, logits, inv_tau) = (*weight, *logits, *inv_tau);
                    let half = E::from_f64(0.5);
                    let soft = self.nodes[id]
                        .aux
                        .as_ref()
                        .expect("masked weight saves its soft sample");
                    if self.nodes[weight.0].requires_grad {
                        let gw = g.zip_map(soft, |gx, s| if s > half { gx } else { E::zero() })?;
                        accumulate(&mut grads[weight.0], gw);
                    }
                    if self.nodes[logits.0].requires_grad {
                        let w = self.value(weight);
                        let n = g.numel();
                        let mut gl = Vec::with_capacity(n);
                        for i in 0..n {
                            let s = soft.data()[i];
                            gl.push(g.data()[i] * w.data()[i] * s * (E::one() - s) * inv_tau);
                        }
                        accumulate(&mut grads[logits.0], Tensor::new(g.shape().to_vec(), gl)?);
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient for a node, or `None` if no path from the loss reached it.
    pub fn get(&self, v: Value) -> Option<&Tensor<E>> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf; zero-filled when no path from the loss reached
    /// it (matching tensor shape).
    pub fn get_or_zeros(&self, graph: &Graph<E>, v: Value) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(v).shape()),
        }
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, contribution: Tensor<E>) {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

/// Elementwise binary with rhs broadcast over leading dims of lhs.
fn broadcast_binary<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    op: &'static str,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let ar = a.shape().len();
    let br = b.shape().len();
    if br < ar && a.shape()[ar - br..] == *b.shape() {
        let bn = b.numel().max(1);
        let data: Vec<E> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % bn]))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    Err(Error::shape(
        op,
        format!("incompatible shapes {:?} vs {:?}", a.shape(), b.shape()),
    ))
}

/// grad * rhs with rhs broadcast over leading dims (same rule as forward).
fn mul_broadcast_rhs<E: Element>(g: &Tensor<E>, rhs: &Tensor<E>) -> Tensor<E> {
    if g.shape() == rhs.shape() {
        return g.zip_map(rhs, |x, y| x * y).expect("shapes equal");
    }
    let bn = rhs.numel().max(1);
    let data: Vec<E> = g
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * rhs.data()[i % bn])
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape as g")
}

/// Sum `g` over its leading dims so the result has `target` shape.
fn reduce_to_shape<E: Element>(g: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if g.shape() == target {
        return g.clone();
    }
    let tn: usize = target.iter().product::<usize>().max(1);
    let mut out = vec![E::zero(); tn];
    for (i, &x) in g.data().iter().enumerate() {
        out[i % tn] += x;
    }
    Tensor::new(target.to_vec(), out).expect("target numel divides g numel")
}

/// Sum of `g ⊙ other` over leading dims, shaped to `target` (the mul
/// backward for a broadcast rhs).
fn reduce_to_shape_weighted<E: Element>(
    g: &Tensor<E>,
    other: &Tensor<E>,
    target: &[usize],
) -> Tensor<E> {
    if g.shape() == target {
        return g.zip_map(other, |x, y| x * y).expect("shapes equal");
    }
    let tn: usize = target.iter().product::<usize>().max(1);
    let mut out = vec![E::zero(); tn];
    for (i, (&gx, &ox)) in g.data().iter().zip(other.data()).enumerate() {
        out[i % tn] += gx * ox;
    }
    Tensor::new(target.to_vec(), out).expect("target numel divides g numel")
}

fn slice_tensor<E: Element>(
    t: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    match t.shape() {
        [n] => {
            if axis != 0 || start + len > *n {
                return Err(Error::shape("slice", format!("[{}] axis {} {}+{}", n, axis, start, len)));
            }
            Ok(Tensor::new(vec![len], t.data()[start..start + len].to_vec())?)
        }
        [rows, cols] => match axis {
            0 => {
                if start + len > *rows {
                    return Err(Error::shape("slice", "row range out of bounds"));
                }
                Ok(Tensor::new(
                    vec![len, *cols],
                    t.data()[start * cols..(start + len) * cols].to_vec(),
                )?)
            }
            1 => {
                if start + len > *cols {
                    return Err(Error::shape("slice", "column range out of bounds"));
                }
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..*rows {
                    data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
                }
                Ok(Tensor::new(vec![*rows, len], data)?)
            }
            _ => Err(Error::shape("slice", "axis out of range")),
        },
        other => Err(Error::shape("slice", format!("unsupported rank {:?}", other))),
    }
}

/// Inverse of `slice_tensor`: place `g` into a zero tensor of `full_shape`.
fn scatter_slice<E: Element>(
    g: &Tensor<E>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    let mut out = Tensor::zeros(full_shape);
    match full_shape {
        [_] => {
            out.data_mut()[start..start + len].copy_from_slice(g.data());
        }
        [rows, cols] => match axis {
            0 => {
                out.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
            }
            _ => {
                for r in 0..*rows {
                    out.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
            }
        },
        other => return Err(Error::shape("slice", format!("unsupported rank {:?}", other))),
    }
    Ok(out)
}

/// Writes softmax of `row` into `out`, returns logsumexp(row).
fn softmax_row<E: Element>(row: &[E], out: &mut [E]) -> E {
    let mut m = row[0];
    for &x in row {
        m = m.max(x);
    }
    let mut sum = E::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    sum.ln() + m
}
