//! Forward kernels. Every differentiable op in [`super::Graph`] evaluates
//! through one of these, and they are usable on their own for inference.
//!
//! Tensors of rank ≥ 1 are treated as a stack of rows along the last axis
//! wherever an op is "row-wise" (layer norm, softmax, normalisation).

use super::tensor::{Real, Tensor};
use super::NumericsError;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn rank_at_least<T: Real>(op: &'static str, x: &Tensor<T>, r: usize) -> Result<(), NumericsError> {
    if x.rank() < r {
        return Err(NumericsError::Rank {
            op,
            expected: r,
            shape: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank_exact<T: Real>(op: &'static str, x: &Tensor<T>, r: usize) -> Result<(), NumericsError> {
    if x.rank() != r {
        return Err(NumericsError::Rank {
            op,
            expected: r,
            shape: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Raw `[m,k]·[k,n]` product on slices, accumulated into `out`. The inner sum runs in ascending `k`
/// for every output cell, so a row's result never depends on other rows.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `[m,k]·[n,k]ᵀ` on slices, accumulated into `out`.
pub(crate) fn gemm_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// `[k,m]ᵀ·[k,n]` on slices, accumulated into `out`.
pub(crate) fn gemm_at<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    rank_exact("matmul", a, 2)?;
    rank_exact("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(a.data(), b.data(), m, k, n, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Adds `bias` to every row of `x`.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    rank_at_least("add_bias", x, 1)?;
    rank_exact("add_bias", bias, 1)?;
    let d = x.last_dim();
    if bias.numel() != d {
        return Err(shape_err("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += *b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `y = xW + b` with `b` broadcast over rows.
pub fn linear<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    add_bias(&matmul(x, weight)?, bias)
}

pub(crate) struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_cached<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<LayerNormOut<T>, NumericsError> {
    rank_at_least("layer_norm", x, 1)?;
    let d = x.last_dim();
    if d == 0 {
        return Err(NumericsError::Domain("layer_norm over an empty axis".into()));
    }
    if eps <= T::zero() {
        return Err(NumericsError::Domain("layer_norm eps must be positive".into()));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.numel() / d;
    let dn = T::lit(d as f64);
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for i in 0..d {
            let h = (xr[i] - mean) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = gain.data()[i] * h + bias.data()[i];
        }
    }
    Ok(LayerNormOut {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat,
        inv_std,
    })
}

/// Row-wise layer normalisation with population variance.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NumericsError> {
    Ok(layer_norm_cached(x, gain, bias, eps)?.y)
}

/// Row-wise softmax along the last axis. Entries whose mask bit is false
/// get probability exactly zero; each row needs at least one live entry.
pub fn masked_softmax<T: Real>(
    x: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>, NumericsError> {
    rank_at_least("softmax", x, 1)?;
    let k = x.last_dim();
    if k == 0 {
        return Err(NumericsError::Domain("softmax over an empty axis".into()));
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(shape_err("softmax mask", x.shape(), &[m.len()]));
        }
    }
    let mut out = vec![T::zero(); x.numel()];
    for (r, (xr, or)) in x.data().chunks(k).zip(out.chunks_mut(k)).enumerate() {
        let live = |i: usize| mask.is_none_or(|m| m[r * k + i]);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (i, &v) in xr.iter().enumerate() {
            if live(i) {
                any = true;
                if v > max {
                    max = v;
                }
            }
        }
        if !any {
            return Err(NumericsError::Domain(format!(
                "softmax row {r} has no unmasked entries"
            )));
        }
        // A row of NaN or -inf leaves `max` at -inf; the arithmetic below
        // then yields NaN, which callers detect as a non-finite result.
        let mut total = T::zero();
        for (i, &v) in xr.iter().enumerate() {
            if live(i) {
                let e = (v - max).exp();
                or[i] = e;
                total += e;
            }
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    masked_softmax(v, None)
}

/// Mean over the rows whose mask bit is set.
///
/// `[r,d]` with a mask of length `r` gives `[d]`; `[b,r,d]` with a mask of
/// length `b·r` gives `[b,d]`.
pub fn masked_mean_pool<T: Real>(
    rows: &Tensor<T>,
    mask: &[bool],
) -> Result<Tensor<T>, NumericsError> {
    let (groups, r, d, out_shape) = match rows.shape() {
        [r, d] => (1, *r, *d, vec![*d]),
        [b, r, d] => (*b, *r, *d, vec![*b, *d]),
        _ => {
            return Err(NumericsError::Rank {
                op: "masked_mean_pool",
                expected: 2,
                shape: rows.shape().to_vec(),
            })
        }
    };
    if mask.len() != groups * r {
        return Err(shape_err("masked_mean_pool mask", rows.shape(), &[mask.len()]));
    }
    let mut out = vec![T::zero(); groups * d];
    for g in 0..groups {
        let live = mask[g * r..(g + 1) * r].iter().filter(|&&b| b).count();
        if live == 0 {
            return Err(NumericsError::Domain(format!(
                "masked_mean_pool group {g} has an empty mask"
            )));
        }
        let inv = T::one() / T::lit(live as f64);
        let o = &mut out[g * d..(g + 1) * d];
        for i in 0..r {
            if !mask[g * r + i] {
                continue;
            }
            let base = (g * r + i) * d;
            for (oj, &v) in o.iter_mut().zip(&rows.data()[base..base + d]) {
                *oj += v;
            }
        }
        for oj in o.iter_mut() {
            *oj *= inv;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn tanh_map<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|v| v.tanh()).collect(),
    )
}

pub fn dot<T: Real>(u: &Tensor<T>, v: &Tensor<T>) -> Result<T, NumericsError> {
    if u.rank() != 1 || u.shape() != v.shape() {
        return Err(shape_err("dot", u.shape(), v.shape()));
    }
    Ok(u.data().iter().zip(v.data()).map(|(&a, &b)| a * b).sum())
}

/// Per-row dot product: `[r,d]·[r,d] → [r]`, or `[d]·[d] → scalar`.
pub fn row_dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    rank_at_least("row_dot", a, 1)?;
    if a.shape() != b.shape() {
        return Err(shape_err("row_dot", a.shape(), b.shape()));
    }
    let d = a.last_dim();
    let out: Vec<T> = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
        .collect();
    let shape = a.shape()[..a.rank() - 1].to_vec();
    Ok(Tensor::from_parts(shape, out))
}

/// Row-wise `v / ‖v‖₂`. The returned norms feed the backward pass.
pub(crate) fn l2_normalize_cached<T: Real>(
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>), NumericsError> {
    rank_at_least("l2_normalize", x, 1)?;
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.numel() / d.max(1));
    for (r, row) in out.chunks_mut(d).enumerate() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n <= T::zero() {
            return Err(NumericsError::Domain(format!(
                "l2_normalize of a zero vector (row {r})"
            )));
        }
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), norms))
}

pub fn l2_normalize<T: Real>(v: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    Ok(l2_normalize_cached(v)?.0)
}

/// Batched product of `[b,m,k]` with `[b,k,n]`, or with `[b,n,k]ᵀ` when
/// `transpose_b` is set.
pub fn batch_matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
) -> Result<Tensor<T>, NumericsError> {
    rank_exact("batch_matmul", a, 3)?;
    rank_exact("batch_matmul", b, 3)?;
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, n) = if transpose_b {
        if b.shape()[2] != k {
            return Err(shape_err("batch_matmul", a.shape(), b.shape()));
        }
        (b.shape()[0], b.shape()[1])
    } else {
        if b.shape()[1] != k {
            return Err(shape_err("batch_matmul", a.shape(), b.shape()));
        }
        (b.shape()[0], b.shape()[2])
    };
    if bs != bs2 {
        return Err(shape_err("batch_matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        let ab = &a.data()[i * m * k..(i + 1) * m * k];
        let bb = &b.data()[i * k * n..(i + 1) * k * n];
        let ob = &mut out[i * m * n..(i + 1) * m * n];
        if transpose_b {
            gemm_bt(ab, bb, m, k, n, ob);
        } else {
            gemm(ab, bb, m, k, n, ob);
        }
    }
    Ok(Tensor::from_parts(vec![bs, m, n], out))
}

/// Selects slices along axis 0.
pub fn gather_rows<T: Real>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>, NumericsError> {
    rank_at_least("gather_rows", x, 1)?;
    let n = x.shape()[0];
    let block = x.numel().checked_div(n).unwrap_or(0);
    let mut out = Vec::with_capacity(index.len() * block);
    for &i in index {
        if i >= n {
            return Err(NumericsError::Index { index: i, len: n });
        }
        out.extend_from_slice(&x.data()[i * block..(i + 1) * block]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = index.len();
    Ok(Tensor::from_parts(shape, out))
}

/// Concatenates along the last axis; leading shapes must agree.
pub fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, NumericsError> {
    let first = parts
        .first()
        .ok_or_else(|| NumericsError::Domain("concat of zero tensors".into()))?;
    rank_at_least("concat", first, 1)?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
    }
    let rows = first.numel() / first.last_dim().max(1);
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Mean over rows of `−log softmax(logits_r)[target_r]`, via log-sum-exp.
/// Also returns the row softmax for the backward pass.
pub(crate) fn cross_entropy_cached<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Vec<T>), NumericsError> {
    rank_exact("cross_entropy", logits, 2)?;
    let (rows, c) = (logits.shape()[0], logits.shape()[1]);
    if c < 2 {
        return Err(NumericsError::Domain(format!(
            "contrastive loss needs at least 2 candidates, got {c}"
        )));
    }
    if rows == 0 || targets.len() != rows {
        return Err(shape_err("cross_entropy targets", logits.shape(), &[targets.len()]));
    }
    let mut probs = vec![T::zero(); rows * c];
    let mut total = T::zero();
    for r in 0..rows {
        let t = targets[r];
        if t >= c {
            return Err(NumericsError::Index { index: t, len: c });
        }
        let row = logits.row(r);
        let mut top = 0;
        for j in 1..c {
            if row[j] > row[top] {
                top = j;
            }
        }
        let max = row[top];
        // The top entry contributes exactly 1; summing the rest separately
        // keeps ln(1 + rest) accurate when the other scores are far below.
        let rest: T = (0..c).filter(|&j| j != top).map(|j| (row[j] - max).exp()).sum();
        let lse = max + rest.ln_1p();
        total += (max - row[t]) + rest.ln_1p();
        for j in 0..c {
            probs[r * c + j] = (row[j] - lse).exp();
        }
    }
    Ok((total / T::lit(rows as f64), probs))
}

/// `−log( exp(s_pos) / Σ exp(s_i) )` for a single score row.
pub fn contrastive_loss<T: Real>(scores: &Tensor<T>, positive: usize) -> Result<T, NumericsError> {
    rank_exact("contrastive_loss", scores, 1)?;
    let row = scores.reshape(&[1, scores.numel()])?;
    Ok(cross_entropy_cached(&row, &[positive])?.0)
}
