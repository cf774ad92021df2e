//! Forward kernels and the matching vector-Jacobian products.
//!
//! Broadcasting is restricted to the suffix rule: the smaller operand's shape
//! must equal a trailing slice of the larger one (a scalar broadcasts
//! everywhere). Reductions always sum in ascending index order.

use super::{numel, DType, Result, Tensor, TensorError};

pub const GELU_C: f64 = 0.044_715;

fn float_dtype(op: &'static str, t: &Tensor) -> Result<DType> {
    if t.dtype().is_float() {
        Ok(t.dtype())
    } else {
        Err(TensorError::Invalid {
            op,
            msg: "expected a floating-point tensor, got i64".into(),
        })
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::AxisOutOfRange { op, axis, rank })
    } else {
        Ok(())
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────────────

/// Output shape of a suffix-broadcast binary op.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sums a gradient of shape `from` down to the suffix shape `to`.
pub fn reduce_to(g: &[f64], to: &[usize]) -> Vec<f64> {
    let inner = numel(to);
    if inner == g.len() {
        return g.to_vec();
    }
    let mut out = vec![0.0; inner];
    for chunk in g.chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let dtype = DType::promote(float_dtype(op, a)?, float_dtype(op, b)?);
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if ad.len() > bd.len() {
        let n = bd.len();
        ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect()
    } else {
        let n = ad.len();
        bd.iter().enumerate().map(|(i, &y)| f(ad[i % n], y)).collect()
    };
    Ok(Tensor::from_raw(shape, data, dtype))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("multiply", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    float_dtype("scale", a)?;
    Ok(a.map(|v| v * c))
}

/// Gradients of `a * b` with respect to each operand, given the output grad.
pub fn mul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (ad, bd) = (a.data(), b.data());
    let n = g.len();
    let ga: Vec<f64> = (0..n).map(|i| g[i] * bd[i % bd.len()]).collect();
    let gb: Vec<f64> = (0..n).map(|i| g[i] * ad[i % ad.len()]).collect();
    (reduce_to(&ga, a.shape()), reduce_to(&gb, b.shape()))
}

// ── Activations ──────────────────────────────────────────────────────────────

fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    float_dtype("gelu", x)?;
    Ok(x.map(gelu_scalar))
}

pub fn gelu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| gv * gelu_derivative(v))
        .collect()
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    float_dtype("relu", x)?;
    Ok(x.map(|v| v.max(0.0)))
}

pub fn relu_backward(x: &Tensor, g: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
        .collect()
}

// ── Normalization and softmax ────────────────────────────────────────────────

fn last_dim(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("needs a non-empty last dimension, got shape {:?}", x.shape()),
        }),
    }
}

/// Normalizes over the last dimension (biased variance), without affine terms.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let dtype = float_dtype("layer_norm", x)?;
    let d = last_dim("layer_norm", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out, dtype))
}

pub fn layer_norm_backward(x: &Tensor, eps: f64, g: &[f64]) -> Vec<f64> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.numel());
    for (row, grow) in x.data().chunks(d).zip(g.chunks(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let g_mean = grow.iter().sum::<f64>() / d as f64;
        let gx_mean = grow.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        out.extend(
            grow.iter()
                .zip(&xhat)
                .map(|(gv, xh)| inv * (gv - g_mean - xh * gx_mean)),
        );
    }
    out
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let dtype = float_dtype("softmax", x)?;
    let d = last_dim("softmax", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out, dtype))
}

pub fn softmax_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let d = *y.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(y.numel());
    for (yrow, grow) in y.data().chunks(d).zip(g.chunks(d)) {
        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
        out.extend(yrow.iter().zip(grow).map(|(yv, gv)| yv * (gv - dot)));
    }
    out
}

fn check_labels(logits: &Tensor, labels: &Tensor) -> Result<usize> {
    let v = last_dim("softmax_cross_entropy", logits)?;
    if labels.dtype() != DType::I64 {
        return Err(TensorError::Invalid {
            op: "softmax_cross_entropy",
            msg: "labels must be an i64 tensor".into(),
        });
    }
    if labels.shape() != &logits.shape()[..logits.rank() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    if let Some(bad) = labels.data().iter().find(|&&l| l < 0.0 || l as usize >= v) {
        return Err(TensorError::Invalid {
            op: "softmax_cross_entropy",
            msg: format!("label {bad} outside vocabulary of {v}"),
        });
    }
    Ok(v)
}

/// Per-position cross entropy `logsumexp(z) − z[label]`; output drops the
/// class dimension.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let dtype = float_dtype("softmax_cross_entropy", logits)?;
    let v = check_labels(logits, labels)?;
    let out: Vec<f64> = logits
        .data()
        .chunks(v)
        .zip(labels.data())
        .map(|(row, &l)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[l as usize]
        })
        .collect();
    Ok(Tensor::from_raw(labels.shape().to_vec(), out, dtype))
}

pub fn softmax_cross_entropy_backward(logits: &Tensor, labels: &Tensor, g: &[f64]) -> Vec<f64> {
    let v = *logits.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(logits.numel());
    for ((row, &l), &gv) in logits.data().chunks(v).zip(labels.data()).zip(g) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().enumerate().map(|(j, e)| {
            let onehot = if j == l as usize { 1.0 } else { 0.0 };
            gv * (e / sum - onehot)
        }));
    }
    out
}

// ── Embedding ────────────────────────────────────────────────────────────────

pub fn embedding(table: &Tensor, ids: &Tensor) -> Result<Tensor> {
    let dtype = float_dtype("embedding_lookup", table)?;
    if table.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "embedding_lookup",
            msg: format!("table must be 2-D, got {:?}", table.shape()),
        });
    }
    if ids.dtype() != DType::I64 {
        return Err(TensorError::Invalid {
            op: "embedding_lookup",
            msg: "ids must be an i64 tensor".into(),
        });
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.numel() * d);
    for &id in ids.data() {
        if id < 0.0 || id as usize >= rows {
            return Err(TensorError::Invalid {
                op: "embedding_lookup",
                msg: format!("id {id} outside table of {rows} rows"),
            });
        }
        let r = id as usize;
        out.extend_from_slice(&table.data()[r * d..(r + 1) * d]);
    }
    let mut shape = ids.shape().to_vec();
    shape.push(d);
    Ok(Tensor::from_raw(shape, out, dtype))
}

pub fn embedding_backward(table_shape: &[usize], ids: &Tensor, g: &[f64]) -> Vec<f64> {
    let d = table_shape[1];
    let mut out = vec![0.0; numel(table_shape)];
    for (&id, grow) in ids.data().iter().zip(g.chunks(d)) {
        let r = id as usize;
        for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(grow) {
            *o += v;
        }
    }
    out
}

// ── Matrix multiplication ────────────────────────────────────────────────────

/// Shape bookkeeping for `a @ b`: batch count, m, k, n, and whether `b` is a
/// shared 2-D matrix.
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let b_shared = b.len() == 2;
    if !b_shared && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        batch: numel(&a[..a.len() - 2]),
        m,
        k,
        n,
        b_shared,
        out_shape,
    })
}

/// `out[m×n] += a[m×k] · b[k×n]`, summing over k in ascending order.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_2d(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `a [..., m, k] @ b [k, n] | [..., k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = DType::promote(float_dtype("matmul", a)?, float_dtype("matmul", b)?);
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ablk = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bblk = if d.b_shared {
            b.data()
        } else {
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        };
        gemm_acc(
            ablk,
            bblk,
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    Ok(Tensor::from_raw(d.out_shape, out, dtype))
}

/// Returns `(dA, dB)` for `a @ b` given the output gradient.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("shapes validated in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for bi in 0..d.batch {
        let ablk = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let gblk = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        let (boff, bblk) = if d.b_shared {
            (0, b.data())
        } else {
            let off = bi * d.k * d.n;
            (off, &b.data()[off..off + d.k * d.n])
        };
        // dA = G · Bᵀ
        let bt = transpose_2d(bblk, d.k, d.n);
        gemm_acc(
            gblk,
            &bt,
            &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k],
            d.m,
            d.n,
            d.k,
        );
        // dB = Aᵀ · G
        let at = transpose_2d(ablk, d.m, d.k);
        gemm_acc(&at, gblk, &mut gb[boff..boff + d.k * d.n], d.k, d.m, d.n);
    }
    (ga, gb)
}

// ── Layout ───────────────────────────────────────────────────────────────────

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(TensorError::Invalid {
            op: "transpose",
            msg: format!("permutation {perm:?} does not match rank {rank}"),
        });
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("{perm:?} is not a permutation of 0..{rank}"),
            });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Output axis `i` is input axis `perm[i]`.
pub fn transpose(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    check_perm(perm, x.rank())?;
    Ok(Tensor::from_raw(
        perm.iter().map(|&p| x.shape()[p]).collect(),
        transpose_data(x.data(), x.shape(), perm),
        x.dtype(),
    ))
}

pub fn transpose_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", axis, x.rank())?;
    if start + len > x.shape()[axis] {
        return Err(TensorError::Invalid {
            op: "slice",
            msg: format!(
                "range {start}..{} exceeds dim {axis} of size {}",
                start + len,
                x.shape()[axis]
            ),
        });
    }
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis + 1..]);
    let full = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_raw(shape, out, x.dtype()))
}

/// Places `g` (the gradient of a slice) into a zero tensor of `full_shape`.
pub fn slice_backward(full_shape: &[usize], axis: usize, start: usize, g: &[f64]) -> Vec<f64> {
    let outer = numel(&full_shape[..axis]);
    let inner = numel(&full_shape[axis + 1..]);
    let full = full_shape[axis];
    let len = g.len() / (outer * inner).max(1);
    let mut out = vec![0.0; numel(full_shape)];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
    }
    out
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    check_axis("concat", axis, first.rank())?;
    let mut dtype = first.dtype();
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        if p.dtype().is_float() && dtype.is_float() {
            dtype = DType::promote(dtype, p.dtype());
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_raw(shape, out, dtype))
}

// ── Reductions ───────────────────────────────────────────────────────────────

pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let dtype = float_dtype("reduce_sum", x)?;
    Ok(Tensor::scalar(x.data().iter().sum(), dtype))
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let dtype = float_dtype("reduce_mean", x)?;
    if x.numel() == 0 {
        return Err(TensorError::Invalid {
            op: "reduce_mean",
            msg: "mean of an empty tensor".into(),
        });
    }
    Ok(Tensor::scalar(
        x.data().iter().sum::<f64>() / x.numel() as f64,
        dtype,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &i).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        match matmul(&a, &b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let logits = t(&[1, 2], &[0.0, 0.0]);
        let labels = Tensor::from_indices(&[1], &[0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((ce.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = t(&[4], &[0.3, -1.7, 2.9, 0.05]);
        let y = layer_norm(&x, 0.0).unwrap();
        let mean = y.data().iter().sum::<f64>() / 4.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_round_trip() {
        let x = t(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>());
        let perm = [2, 0, 1];
        let y = transpose(&x, &perm).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let back = transpose(&y, &inverse_perm(&perm)).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn slice_concat_round_trip() {
        let x = t(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>());
        let a = slice(&x, 1, 0, 1).unwrap();
        let b = slice(&x, 1, 1, 3).unwrap();
        assert!(concat(&[&a, &b], 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn broadcast_requires_suffix() {
        assert!(broadcast_shape("add", &[2, 3], &[3]).is_ok());
        assert!(broadcast_shape("add", &[2, 3], &[]).is_ok());
        assert!(broadcast_shape("add", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn f32_outputs_are_rounded() {
        let a = Tensor::new(vec![1], vec![0.1], DType::F32).unwrap();
        let b = Tensor::new(vec![1], vec![0.2], DType::F32).unwrap();
        let s = add(&a, &b).unwrap();
        assert_eq!(s.dtype(), DType::F32);
        assert_eq!(s.data()[0], (0.1f32 as f64 + 0.2f32 as f64) as f32 as f64);
    }
}
