use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Logistic function, evaluated without overflow for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Summed binary cross-entropy over predictions already in (0, 1).
///
/// Returns the loss and its gradient with respect to the pre-sigmoid logits,
/// `ŷ − y` per element. Predictions on or outside the boundary are rejected
/// rather than clamped.
pub fn bce_loss_and_grad(predictions: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(
            "bce_loss_and_grad",
            (predictions.len(), 1),
            (labels.len(), 1),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(predictions.len());
    for (i, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "prediction {p} at index {i} is outside the open interval (0, 1)"
            )));
        }
        check_label(y, i)?;
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(p - y);
    }
    Ok((loss, grad))
}

/// Summed binary cross-entropy computed from logits.
///
/// Uses `max(z, 0) − y·z + ln(1 + e^{−|z|})`, so saturated logits never
/// produce infinities. Gradient is `σ(z) − y` per element.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::dim("bce_with_logits", (logits.len(), 1), (labels.len(), 1)));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, (&z, &y)) in logits.iter().zip(labels).enumerate() {
        check_label(y, i)?;
        loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
        grad.push(sigmoid(z) - y);
    }
    Ok((loss, grad))
}

fn check_label(y: f64, i: usize) -> Result<()> {
    if y != 0.0 && y != 1.0 {
        return Err(Error::Domain(format!("label {y} at index {i} is not binary")));
    }
    Ok(())
}

/// `(1/m)·Σ_rows ‖predicted_v − target_v‖²` with gradient `(2/m)(predicted − target)`.
///
/// The squared norm sums over columns; the mean runs over the `m` rows.
pub fn mse_loss_and_grad(predicted: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if predicted.shape() != target.shape() {
        return Err(Error::dim("mse_loss_and_grad", predicted.shape(), target.shape()));
    }
    let m = predicted.rows();
    if m == 0 {
        return Ok((0.0, DenseMatrix::zeros(0, predicted.cols())));
    }
    let diff = predicted.sub(target)?;
    let loss = diff.squared_norm() / m as f64;
    Ok((loss, diff.scale(2.0 / m as f64)))
}
