//! Confidence-thresholded pseudo labels and their diagnostics.

use thiserror::Error;

use crate::autograd::Tensor;

/// Default confidence threshold.
pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PseudoError {
    #[error("threshold {0} is outside (0, 1)")]
    Threshold(f64),
    #[error("prediction batch is empty")]
    EmptyBatch,
    #[error("predictions must be a B × C matrix, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error("{rows} prediction rows but {labels} truth labels")]
    LengthMismatch { rows: usize, labels: usize },
}

fn check(pred: &Tensor, tau: f64) -> Result<usize, PseudoError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(PseudoError::Threshold(tau));
    }
    let (b, _) = pred.dims2().ok_or_else(|| PseudoError::Shape(pred.shape().to_vec()))?;
    Ok(b)
}

/// Index and value of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// `Some(argmax)` for rows whose maximum strictly exceeds `tau`, `None`
/// (abstain) otherwise.
pub fn assign_pseudo_labels(weak_pred: &Tensor, tau: f64) -> Result<Vec<Option<usize>>, PseudoError> {
    let b = check(weak_pred, tau)?;
    Ok((0..b)
        .map(|i| {
            let (j, m) = argmax(weak_pred.row(i));
            (m > tau).then_some(j)
        })
        .collect())
}

/// Fraction of rows that receive a pseudo label.
pub fn mask_rate(weak_pred: &Tensor, tau: f64) -> Result<f64, PseudoError> {
    let labels = assign_pseudo_labels(weak_pred, tau)?;
    if labels.is_empty() {
        return Err(PseudoError::EmptyBatch);
    }
    Ok(labels.iter().filter(|l| l.is_some()).count() as f64 / labels.len() as f64)
}

/// Fraction of pseudo-labeled rows whose label matches the truth, or `None`
/// when no row passes the threshold.
pub fn purity(weak_pred: &Tensor, tau: f64, truth: &[usize]) -> Result<Option<f64>, PseudoError> {
    let labels = assign_pseudo_labels(weak_pred, tau)?;
    if labels.len() != truth.len() {
        return Err(PseudoError::LengthMismatch {
            rows: labels.len(),
            labels: truth.len(),
        });
    }
    let (mut passed, mut correct) = (0usize, 0usize);
    for (l, &t) in labels.iter().zip(truth) {
        if let Some(j) = l {
            passed += 1;
            correct += usize::from(*j == t);
        }
    }
    Ok((passed > 0).then(|| correct as f64 / passed as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_strict() {
        let p = Tensor::matrix(3, 3, vec![0.96, 0.02, 0.02, 0.5, 0.3, 0.2, 0.95, 0.05, 0.0]).unwrap();
        assert_eq!(assign_pseudo_labels(&p, 0.95).unwrap(), vec![Some(0), None, None]);
    }

    #[test]
    fn ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), (1, 0.4));
    }

    #[test]
    fn bad_threshold_and_empty_batch() {
        let p = Tensor::full(&[2, 2], 0.5);
        assert_eq!(mask_rate(&p, 1.0), Err(PseudoError::Threshold(1.0)));
        assert_eq!(mask_rate(&p, 0.0), Err(PseudoError::Threshold(0.0)));
        let empty = Tensor::new(vec![0, 2], vec![]);
        if let Ok(e) = empty {
            assert_eq!(mask_rate(&e, 0.5), Err(PseudoError::EmptyBatch));
        }
    }

    #[test]
    fn purity_sentinel_when_nothing_passes() {
        let p = Tensor::full(&[4, 4], 0.25);
        assert_eq!(purity(&p, 0.95, &[0, 1, 2, 3]).unwrap(), None);
        assert_eq!(mask_rate(&p, 0.95).unwrap(), 0.0);
    }
}
