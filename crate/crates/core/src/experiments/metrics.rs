//! Error metrics on CSI given as interleaved `[re, im]` real vectors.
//!
//! For such vectors the real part of the complex inner product equals the
//! plain real dot product, so both metrics reduce to real arithmetic.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {pred} predicted vs {truth} true values")]
    Length { pred: usize, truth: usize },
    #[error("reference has zero norm")]
    ZeroNorm,
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

/// `‖pred − truth‖² / ‖truth‖²`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    let num: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(num / den)
}

/// `Re⟨pred, truth⟩ / (‖pred‖ ‖truth‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let np: f64 = pred.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nt == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    let dot: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    Ok((dot / (np * nt)).clamp(-1.0, 1.0))
}

/// Mean of per-sample NMSE over equally sized consecutive chunks.
pub fn mean_nmse(pred: &[f64], truth: &[f64], chunk: usize) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let n = pred.len() / chunk.max(1);
    if n == 0 {
        return Err(MetricError::ZeroNorm);
    }
    let mut sum = 0.0;
    for (p, t) in pred.chunks_exact(chunk).zip(truth.chunks_exact(chunk)) {
        sum += nmse(p, t)?;
    }
    Ok(sum / n as f64)
}

/// Mean of per-sample cosine similarity over consecutive chunks.
pub fn mean_cosine(pred: &[f64], truth: &[f64], chunk: usize) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let n = pred.len() / chunk.max(1);
    if n == 0 {
        return Err(MetricError::ZeroNorm);
    }
    let mut sum = 0.0;
    for (p, t) in pred.chunks_exact(chunk).zip(truth.chunks_exact(chunk)) {
        sum += cosine_similarity(p, t)?;
    }
    Ok(sum / n as f64)
}
