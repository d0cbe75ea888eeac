use super::{dim_err, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on row sums accepted by [`row_entropy`].
const ROW_SUM_TOL: f64 = 1e-3;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, k) = a.expect_matrix("matmul")?;
    let (k2, c) = b.expect_matrix("matmul")?;
    if k != k2 {
        return Err(dim_err("matmul", format!("inner dimensions {k} and {k2} differ")));
    }
    let mut out = vec![T::zero(); r * c];
    T::gemm(r, k, c, a.data(), (k as isize, 1), b.data(), (c as isize, 1), &mut out, false);
    Tensor::new(vec![r, c], out)
}

fn check_finite<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op.to_string()))
    }
}

fn check_classes<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let (n, m) = x.expect_matrix(op)?;
    if m < 2 {
        return Err(dim_err(op, format!("need at least 2 classes, got {m}")));
    }
    Ok((n, m))
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        let inv = total.recip();
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = check_classes(logits, "softmax")?;
    check_finite(logits, "softmax")?;
    Tensor::new(vec![n, m], softmax_rows(logits.data(), m))
}

pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = check_classes(logits, "log_softmax")?;
    check_finite(logits, "log_softmax")?;
    Tensor::new(vec![n, m], log_softmax_rows(logits.data(), m))
}

#[inline]
pub(crate) fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_FLOOR)).min(T::one()).ln()
}

/// Shannon entropy (nats) of each row of a probability matrix.
pub fn row_entropy<T: Scalar>(p: &Tensor<T>) -> Result<Vec<T>> {
    let (_, m) = p.expect_matrix("row_entropy")?;
    let mut out = Vec::with_capacity(p.rows());
    for (i, row) in p.data().chunks_exact(m.max(1)).enumerate() {
        let total: T = row.iter().copied().sum();
        if (total.as_f64() - 1.0).abs() > ROW_SUM_TOL {
            return Err(TensorError::Contract {
                op: "row_entropy",
                detail: format!("row {i} sums to {total}"),
            });
        }
        out.push(entropy_of(row));
    }
    Ok(out)
}

#[inline]
pub(crate) fn entropy_of<T: Scalar>(row: &[T]) -> T {
    let mut h = T::zero();
    for &q in row {
        if q > T::zero() {
            h -= q * clamped_ln(q);
        }
    }
    h
}
