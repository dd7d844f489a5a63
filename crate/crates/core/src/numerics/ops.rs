//! Forward kernels over plain tensors.
//!
//! The slice-level kernels (`*_into`) are shared with the gradient tape so
//! that recorded and unrecorded computations take the same arithmetic path.
//! Every reduction runs in a fixed order, so results are reproducible
//! bit-for-bit on a given build.

use super::tape::AttentionShape;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Register tile width of [`matmul_into`] in columns of `c`.
const NR: usize = 8;

/// Runs `$body` compiled with AVX2 enabled when the CPU has it. Only
/// instruction selection changes: without FMA contraction every rounding
/// step is the same, so both paths give identical bits.
macro_rules! with_avx2 {
    ($name:ident<$t:ident>($($arg:ident: $ty:ty),*) $body:block) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn $name<$t: Scalar>($($arg: $ty),*) $body
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the required feature was detected at runtime.
                return unsafe { $name($($arg),*) };
            }
        }
        $body
    }};
}

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Every element starts from its value in `c` and accumulates the products
/// in increasing `p`, whichever path computes it.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    with_avx2!(matmul_avx2<T>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        matmul_tiles(a, b, c, m, k, n)
    })
}

#[inline(always)]
fn matmul_tiles<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        row_tile::<T, 4>(a, b, c, i, k, n);
        i += 4;
    }
    if i + 2 <= m {
        row_tile::<T, 2>(a, b, c, i, k, n);
        i += 2;
    }
    if i < m {
        row_tile::<T, 1>(a, b, c, i, k, n);
    }
}

/// Rows `i..i+R` of [`matmul_into`], `NR` columns at a time.
#[inline(always)]
fn row_tile<T: Scalar, const R: usize>(a: &[T], b: &[T], c: &mut [T], i: usize, k: usize, n: usize) {
    // a[i+r][p] gathered as packed[p][r] so the inner loop reads it in order.
    let mut packed = vec![[T::zero(); R]; k];
    for (p, col) in packed.iter_mut().enumerate() {
        for (r, v) in col.iter_mut().enumerate() {
            *v = a[(i + r) * k + p];
        }
    }
    let b = &b[..k * n];
    let nb = n / NR * NR;
    for j in (0..nb).step_by(NR) {
        let mut acc = [[T::zero(); NR]; R];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i + r) * n + j..][..NR]);
        }
        for (av, brow) in packed.iter().zip(b.chunks_exact(n)) {
            let bv: &[T; NR] = brow[j..j + NR].try_into().expect("tile width");
            for (row, &x) in acc.iter_mut().zip(av) {
                for (s, &y) in row.iter_mut().zip(bv) {
                    *s = *s + x * y;
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            c[(i + r) * n + j..][..NR].copy_from_slice(row);
        }
    }
    if nb < n {
        column_tail(&packed, b, c, i, nb, n);
    }
}

/// Columns past the last full tile. Kept out of line so the tile loop
/// above vectorizes.
#[inline(never)]
fn column_tail<T: Scalar, const R: usize>(packed: &[[T; R]], b: &[T], c: &mut [T], i: usize, from: usize, n: usize) {
    for r in 0..R {
        for j in from..n {
            let mut s = c[(i + r) * n + j];
            for (av, brow) in packed.iter().zip(b.chunks_exact(n)) {
                s = s + av[r] * brow[j];
            }
            c[(i + r) * n + j] = s;
        }
    }
}

/// Rows of the left operand handled per pass over the right operand.
const ROW_BLOCK: usize = 16;

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    with_avx2!(matmul_bt_avx2<T>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        matmul_bt_blocks(a, b, c, m, k, n)
    })
}

#[inline(always)]
fn matmul_bt_blocks<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(m - i0);
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            for i in i0..i0 + rows {
                let v = dot(&a[i * k..(i + 1) * k], brow);
                c[i * n + j] = c[i * n + j] + v;
            }
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(av, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// In-place max-subtracted softmax over each contiguous row of length `cols`.
pub(crate) fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
}

/// Returns `(output, mean, rstd)` for row-wise layer normalization.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let rows = if d == 0 { 0 } else { x.len() / d };
    let dt = T::from_f64(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().fold(T::zero(), |s, &v| s + v) / dt;
        let var = xr.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dt;
        let rstd = T::one() / (var + eps).sqrt();
        let or = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Masked mean negative log-likelihood. Returns `(loss, probs, selected)`
/// where `probs` are the row softmaxes and `selected` counts masked rows.
pub(crate) fn cross_entropy_forward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    mask: &[u8],
) -> (T, Vec<T>, usize) {
    let mut probs = logits.to_vec();
    softmax_rows_inplace(&mut probs, vocab);
    let mut total = T::zero();
    let mut selected = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0 {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        total = total + (lse - row[t as usize]);
        selected += 1;
    }
    let loss = if selected == 0 {
        T::zero()
    } else {
        total / T::from_f64(selected as f64)
    };
    (loss, probs, selected)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU, `x · σ(2u)` with `u = c(x + kx³)`, which equals
/// `x · (1 + tanh u) / 2`.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

/// `σ(2u)`. Saturates cleanly: `exp` overflowing to infinity gives zero.
#[inline]
pub(crate) fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_K) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

/// Multi-head scaled dot-product attention over row-major `[batch*seq, hidden]`
/// projections. Returns the output and the attention probabilities
/// `[batch, heads, seq, seq]`, zero above the diagonal in causal mode.
pub(crate) fn attention_forward<T: Scalar>(qd: &[T], kd: &[T], vd: &[T], hidden: usize, shape: AttentionShape) -> (Vec<T>, Vec<T>) {
    let AttentionShape { batch, seq, heads, causal } = shape;
    let rows = batch * seq;
    let dh = hidden / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut out = vec![T::zero(); rows * hidden];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &qd[(b * seq + i) * hidden + h * dh..][..dh];
                let visible = if causal { i + 1 } else { seq };
                let prow = &mut p[i * seq..(i + 1) * seq];
                for j in 0..visible {
                    let kj = &kd[(b * seq + j) * hidden + h * dh..][..dh];
                    prow[j] = dot(qi, kj) * scale;
                }
                softmax_rows_inplace(&mut prow[..visible], visible);
                let orow = &mut out[(b * seq + i) * hidden + h * dh..][..dh];
                for j in 0..visible {
                    axpy(prow[j], &vd[(b * seq + j) * hidden + h * dh..][..dh], orow);
                }
            }
        }
    }
    (out, probs)
}

fn require_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Matrix product of `[m×k]` and `[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

/// Softmax along `axis`, with max subtraction so large logits cannot overflow.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    if inner == 1 {
        softmax_rows_inplace(&mut out, len);
    } else {
        let mut lane = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, v) in lane.iter_mut().enumerate() {
                    *v = out[base + j * inner];
                }
                softmax_rows_inplace(&mut lane, len);
                for (j, v) in lane.iter().enumerate() {
                    out[base + j * inner] = *v;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Per-position normalization over the trailing dimension followed by an affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("feature dim {d}, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let (out, _, _) = layer_norm_forward(x.data(), gamma.data(), beta.data(), T::from_f64(eps));
    Tensor::new(x.shape().to_vec(), out)
}

/// Result of [`cross_entropy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// Set when the mask selected no positions; the loss is then defined as 0.
    pub empty_mask: bool,
}

/// Mean over masked rows of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[u8],
) -> Result<CrossEntropy<T>> {
    let (rows, vocab) = require_matrix(logits, "cross_entropy")?;
    check_targets(rows, vocab, targets, mask)?;
    let (loss, _, selected) = cross_entropy_forward(logits.data(), vocab, targets, mask);
    if selected == 0 {
        log::warn!("cross_entropy called with an all-zero mask; loss defined as 0");
    }
    Ok(CrossEntropy {
        loss,
        empty_mask: selected == 0,
    })
}

pub(crate) fn check_targets(rows: usize, vocab: usize, targets: &[u32], mask: &[u8]) -> Result<()> {
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "cross_entropy",
            format!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, size: vocab });
    }
    Ok(())
}
