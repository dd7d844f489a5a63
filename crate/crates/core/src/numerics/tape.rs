//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order as nodes of a [`Graph`].
//! [`Graph::backward`] walks the nodes once in reverse, accumulating
//! gradients in that fixed order. Parameters enter the graph through
//! [`Graph::param`] keyed by a caller-chosen [`ParamId`]; registering the
//! same id twice returns the existing node so that two forward passes over
//! one graph share their parameter gradients.

use std::collections::HashMap;

use super::ops::{
    attention_forward, axpy, check_targets, cross_entropy_forward, dot, gelu, layer_norm_forward,
    matmul_at_into, matmul_bt_into, matmul_into, softmax_rows_inplace, gelu_gate, GELU_C, GELU_K,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Caller-assigned parameter index.
pub type ParamId = usize;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Reshape { x: Var },
    Sum { x: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<u8>, probs: Vec<T>, selected: usize },
}

/// Layout of a fused multi-head attention call over `[batch*seq, hidden]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Gradients returned by [`Graph::backward`], keyed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Dense gradient list for parameters `0..shapes.len()`; unregistered ids get zeros.
    pub fn into_dense(mut self, shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| self.grads.remove(&i).unwrap_or_else(|| Tensor::zeros(s.clone())))
            .collect()
    }
}

/// Gradient tape. Single-threaded; build one per loss evaluation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    non_finite: Option<String>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(name.to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    /// Registers a parameter, or returns the node already registered under `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, "param");
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b }, "matmul"))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulBt { a, b }, "matmul_bt"))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, "mul"))
    }

    /// Adds `bias: [n]` to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)) {
            for (r, &bv) in row.iter_mut().zip(b) {
                *r = *r + bv;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, "add_bias"))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale { x, factor }, "scale")
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, "reshape"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu { x }, "gelu")
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        softmax_rows_inplace(&mut data, vx.last_dim());
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x }, "softmax"))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", format!("feature dim {d}")));
        }
        let (out, mean, rstd) = layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(eps),
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }, "layer_norm"))
    }

    /// Gathers rows of `table: [V×d]` for each id, giving `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::TokenOutOfRange { id: bad, size: rows });
        }
        let tdata = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tdata[i as usize * d..(i as usize + 1) * d]);
        }
        let t = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, "embedding"))
    }

    /// Fused scaled dot-product multi-head attention on `[batch*seq, hidden]`
    /// projections. Causal mode restricts position `i` to keys `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (rows, hidden) = self.dims2(q, "attention")?;
        let AttentionShape { batch, seq, heads, .. } = shape;
        if rows != batch * seq || heads == 0 || hidden % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("[{rows}x{hidden}] with batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (out, probs) = attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), hidden, shape);
        let t = Tensor::new([rows, hidden], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, shape, probs }, "attention"))
    }

    /// Masked mean cross-entropy of `logits: [N×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[u8]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        check_targets(rows, vocab, targets, mask)?;
        let (loss, probs, selected) =
            cross_entropy_forward(self.value(logits).data(), vocab, targets, mask);
        if selected == 0 {
            log::warn!("cross_entropy called with an all-zero mask; loss defined as 0");
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            selected,
        };
        Ok(self.push(Tensor::scalar(loss), op, "cross_entropy"))
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter receives
    /// a gradient; those not on a path to `loss` receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if let Some(op) = &self.non_finite {
            return Err(Error::NonFinite { op: op.clone() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = HashMap::with_capacity(self.params.len());
        for (&id, &v) in &self.params {
            let shape = self.value(v).shape().to_vec();
            let g = match grads.get_mut(v.0).and_then(Option::take) {
                Some(data) => Tensor::new(shape, data)?,
                None => Tensor::zeros(shape),
            };
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                matmul_bt_into(g, vb.data(), acc(grads, *a, m * k), m, n, k);
                matmul_at_into(va.data(), g, acc(grads, *b, k * n), m, k, n);
            }
            Op::MatMulBt { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                // dA = G · B, dB = Gᵀ · A
                matmul_into(g, vb.data(), acc(grads, *a, m * k), m, n, k);
                matmul_at_into(g, va.data(), acc(grads, *b, n * k), m, n, k);
            }
            Op::Add { a, b } => {
                axpy(T::one(), g, acc(grads, *a, g.len()));
                axpy(T::one(), g, acc(grads, *b, g.len()));
            }
            Op::AddBias { x, bias } => {
                axpy(T::one(), g, acc(grads, *x, g.len()));
                let n = self.value(*bias).numel();
                let gb = acc(grads, *bias, n);
                for row in g.chunks_exact(n.max(1)) {
                    axpy(T::one(), row, gb);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * vb[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] = gb[i] + g[i] * va[i];
                }
            }
            Op::Scale { x, factor } => axpy(*factor, g, acc(grads, *x, g.len())),
            Op::Reshape { x } => axpy(T::one(), g, acc(grads, *x, g.len())),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                for v in acc(grads, *x, n).iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::Gelu { x } => {
                let vx = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * gelu_grad(vx[i]);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let gx = acc(grads, *x, g.len());
                for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let s = dot(yr, gr);
                    for j in 0..d {
                        out[j] = out[j] + yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let dt = T::from_f64(d as f64);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                {
                    let gg = acc(grads, *gamma, d);
                    for (r, gr) in g.chunks_exact(d).enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * (vx[r * d + j] - mean[r]) * rstd[r];
                        }
                    }
                }
                {
                    let gbeta = acc(grads, *beta, d);
                    for gr in g.chunks_exact(d) {
                        axpy(T::one(), gr, gbeta);
                    }
                }
                let gx = acc(grads, *x, vx.len());
                for (r, gr) in g.chunks_exact(d).enumerate() {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (vx[r * d + j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gam[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        let v = (dt * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat) * rstd[r] / dt;
                        gx[r * d + j] = gx[r * d + j] + v;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let gt = acc(grads, *table, vt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id as usize * d..(id as usize + 1) * d]);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.attention_backward(*q, *k, *v, *shape, probs, g, grads)
            }
            Op::CrossEntropy { logits, targets, mask, probs, selected } => {
                if *selected == 0 {
                    return;
                }
                let vocab = self.value(*logits).last_dim();
                let w = g[0] / T::from_f64(*selected as f64);
                let gl = acc(grads, *logits, probs.len());
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if m == 0 {
                        continue;
                    }
                    let pr = &probs[r * vocab..(r + 1) * vocab];
                    let out = &mut gl[r * vocab..(r + 1) * vocab];
                    axpy(w, pr, out);
                    out[t as usize] = out[t as usize] - w;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionShape { batch, seq, heads, causal } = shape;
        let hidden = self.value(q).last_dim();
        let dh = hidden / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let n = batch * seq * hidden;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); n];
        let mut dk = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut ds = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let at = |i: usize| (b * seq + i) * hidden + h * dh;
                for i in 0..seq {
                    let visible = if causal { i + 1 } else { seq };
                    let gi = &g[at(i)..at(i) + dh];
                    let prow = &p[i * seq..i * seq + visible];
                    // dP_ij = g_i · v_j ; dV_j += P_ij g_i
                    let mut weighted = T::zero();
                    for j in 0..visible {
                        let dp = dot(gi, &vd[at(j)..at(j) + dh]);
                        ds[j] = dp;
                        weighted = weighted + dp * prow[j];
                        axpy(prow[j], gi, &mut dv[at(j)..at(j) + dh]);
                    }
                    for j in 0..visible {
                        let s = prow[j] * (ds[j] - weighted) * scale;
                        axpy(s, &kd[at(j)..at(j) + dh], &mut dq[at(i)..at(i) + dh]);
                        axpy(s, &qd[at(i)..at(i) + dh], &mut dk[at(j)..at(j) + dh]);
                    }
                }
            }
        }
        axpy(T::one(), &dq, acc(grads, q, n));
        axpy(T::one(), &dk, acc(grads, k, n));
        axpy(T::one(), &dv, acc(grads, v, n));
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let s = gelu_gate(x);
    // d/dx σ(2u) = 2σ(1 − σ) u'
    s + x * (s + s) * (T::one() - s) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` over every coordinate of every parameter.
    fn check_gradients(
        params: &[Tensor<f64>],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |ps: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
            let l = f(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-4;
        let mut worst = 0.0f64;
        let mut ps = params.to_vec();
        for i in 0..params.len() {
            for j in 0..params[i].numel() {
                let orig = ps[i].data()[j];
                ps[i].data_mut()[j] = orig + h;
                let up = eval(&ps);
                ps[i].data_mut()[j] = orig - h;
                let down = eval(&ps);
                ps[i].data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(i).unwrap().data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f32>::new();
        let p = g.param(0, &Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let p = g.param(0, &Tensor::full([3], 2.0));
        let _q = g.param(1, &Tensor::full([2, 2], 5.0));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(1).unwrap(), &Tensor::zeros([2, 2]));
        let dense = grads.into_dense(&[vec![3], vec![2, 2], vec![4]]);
        assert_eq!(dense[2], Tensor::zeros([4]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let p = g.param(0, &Tensor::full([3], 2.0));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_poison_backward() {
        let mut g = Graph::<f32>::new();
        let p = g.param(0, &Tensor::full([2], f32::MAX));
        let q = g.add(p, p).unwrap();
        let s = g.sum(q);
        assert_eq!(g.non_finite(), Some("add"));
        assert!(matches!(g.backward(s), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn repeated_param_registration_shares_node() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::full([2], 3.0);
        let a = g.param(7, &t);
        let b = g.param(7, &t);
        assert_eq!(a, b);
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(7).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            random(&[3, 4], &mut rng),
            random(&[4, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[3, 5], &mut rng),
            random(&[6, 5], &mut rng),
        ];
        let worst = check_gradients(&params, |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let y = g.add_bias(y, v[2]).unwrap();
            let y = g.mul(y, v[3]).unwrap();
            let y = g.gelu(y);
            let y = g.matmul_bt(y, v[4]).unwrap();
            let y = g.softmax(y).unwrap();
            let y = g.scale(y, 1.7);
            let z = g.add(y, y).unwrap();
            let z = g.mul(z, y).unwrap();
            g.sum(z)
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn layer_norm_embedding_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&[7, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)];
        let worst = check_gradients(&params, |g, v| {
            let x = g.embedding(v[0], &[3, 1, 3, 6, 0]).unwrap();
            let x = g.layer_norm(x, v[1], v[2], 1e-6).unwrap();
            let logits = g.matmul_bt(x, v[0]).unwrap();
            g.cross_entropy(logits, &[1, 2, 3, 0, 6], &[1, 0, 1, 1, 1]).unwrap()
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn attention_gradients_both_modes() {
        for causal in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let params = vec![
                random(&[8, 6], &mut rng),
                random(&[8, 6], &mut rng),
                random(&[8, 6], &mut rng),
                random(&[8, 6], &mut rng),
            ];
            let shape = AttentionShape { batch: 2, seq: 4, heads: 2, causal };
            let worst = check_gradients(&params, |g, v| {
                let o = g.attention(v[0], v[1], v[2], shape).unwrap();
                let o = g.mul(o, v[3]).unwrap();
                g.sum(o)
            });
            assert!(worst < 1e-4, "causal={causal}: max relative error {worst}");
        }
    }

    #[test]
    fn cross_entropy_with_empty_mask_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(0, &Tensor::full([2, 3], 0.5));
        let l = g.cross_entropy(p, &[0, 1], &[0, 0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(0).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
