use crate::error::{Result, RirError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch with a numerically stable log-sum-exp.
/// Returns the loss and the logit gradient (softmax - onehot) / N.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(RirError::Input(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(RirError::Input(format!("label {bad} out of range [0, {k})")));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = T::zero();
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
        let mut denom = T::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[labels[ni]] - max);
        for ki in 0..k {
            let p = (row[ki] - max).exp() / denom;
            let onehot = if ki == labels[ni] { T::one() } else { T::zero() };
            *grad.at2_mut(ni, ki) = (p - onehot) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
