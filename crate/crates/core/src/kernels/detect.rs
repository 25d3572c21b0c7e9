//! Detection loss primitives over row matrices of per-anchor outputs.
//!
//! Both losses operate on a caller-selected subset of rows so that positive
//! anchors and hard-mined negatives can be picked outside the graph; the
//! selection is a constant with respect to differentiation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn row_dims<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [r, k] => Ok((r, k)),
        _ => Err(Error::Dim(format!("expected row matrix, got {:?}", t.shape()))),
    }
}

/// Numerically stable cross-entropy of one row against a class index.
pub fn row_ce<S: Scalar>(logits: &Tensor<S>, row: usize, class: usize) -> S {
    let (_, k) = row_dims(logits).expect("logits shape");
    let r = &logits.data()[row * k..(row + 1) * k];
    let max = r.iter().cloned().fold(S::neg_infinity(), S::max);
    let sum: S = r.iter().map(|&v| (v - max).exp()).sum();
    sum.ln() + max - r[class]
}

/// Mean cross-entropy over the selected rows. Empty selection yields 0.
pub fn ce_rows_forward<S: Scalar>(
    logits: &Tensor<S>,
    rows: &[u32],
    targets: &[u32],
) -> Result<S> {
    let (r, k) = row_dims(logits)?;
    if rows.len() != targets.len() {
        return Err(Error::Dim(format!(
            "{} rows vs {} targets",
            rows.len(),
            targets.len()
        )));
    }
    if rows.is_empty() {
        return Ok(S::zero());
    }
    let mut acc = S::zero();
    for (&row, &t) in rows.iter().zip(targets) {
        debug_assert!((row as usize) < r && (t as usize) < k);
        acc = acc + row_ce(logits, row as usize, t as usize);
    }
    Ok(acc / S::from_f64(rows.len() as f64))
}

pub fn ce_rows_backward<S: Scalar>(
    logits: &Tensor<S>,
    rows: &[u32],
    targets: &[u32],
    upstream: S,
    dlogits: &mut Tensor<S>,
) {
    if rows.is_empty() {
        return;
    }
    let (_, k) = row_dims(logits).expect("logits shape");
    let scale = upstream / S::from_f64(rows.len() as f64);
    let data = logits.data();
    let dl = dlogits.data_mut();
    for (&row, &t) in rows.iter().zip(targets) {
        let base = row as usize * k;
        let r = &data[base..base + k];
        let max = r.iter().cloned().fold(S::neg_infinity(), S::max);
        let sum: S = r.iter().map(|&v| (v - max).exp()).sum();
        for c in 0..k {
            let p = (r[c] - max).exp() / sum;
            let onehot = if c == t as usize { S::one() } else { S::zero() };
            dl[base + c] = dl[base + c] + scale * (p - onehot);
        }
    }
}

/// Smooth-L1 with threshold 1: quadratic inside, linear outside.
pub fn smooth_l1<S: Scalar>(diff: S) -> S {
    let a = diff.abs();
    if a < S::one() {
        S::from_f64(0.5) * diff * diff
    } else {
        a - S::from_f64(0.5)
    }
}

fn smooth_l1_grad<S: Scalar>(diff: S) -> S {
    if diff.abs() < S::one() {
        diff
    } else {
        diff.signum()
    }
}

/// Mean smooth-L1 over every coordinate of the selected rows.
pub fn smooth_l1_rows_forward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    rows: &[u32],
) -> Result<S> {
    let (r, k) = row_dims(pred)?;
    if pred.shape() != target.shape() {
        return Err(Error::Dim(format!(
            "pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if rows.is_empty() {
        return Ok(S::zero());
    }
    let mut acc = S::zero();
    for &row in rows {
        debug_assert!((row as usize) < r);
        let base = row as usize * k;
        for c in 0..k {
            acc = acc + smooth_l1(pred.data()[base + c] - target.data()[base + c]);
        }
    }
    Ok(acc / S::from_f64((rows.len() * k) as f64))
}

pub fn smooth_l1_rows_backward<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    rows: &[u32],
    upstream: S,
    dpred: &mut Tensor<S>,
) {
    if rows.is_empty() {
        return;
    }
    let k = pred.shape()[1];
    let scale = upstream / S::from_f64((rows.len() * k) as f64);
    let dp = dpred.data_mut();
    for &row in rows {
        let base = row as usize * k;
        for c in 0..k {
            let d = pred.data()[base + c] - target.data()[base + c];
            dp[base + c] = dp[base + c] + scale * smooth_l1_grad(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
        assert!((smooth_l1(0.5f64) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn ce_uniform_logits_is_log_k() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let v = ce_rows_forward(&logits, &[0, 1], &[2, 0]).unwrap();
        assert!((v - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_empty_selection_is_zero() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        assert_eq!(ce_rows_forward(&logits, &[], &[]).unwrap(), 0.0);
    }
}
