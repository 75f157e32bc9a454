//! Confusion matrices and weighted/unweighted accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{PcqError, Result};

/// `K x K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Confusion(pub Vec<Vec<u64>>);

impl Confusion {
    pub fn zeros(k: usize) -> Self {
        Confusion(vec![vec![0; k]; k])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.0[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    /// Elementwise sum.
    pub fn add(&mut self, other: &Confusion) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(PcqError::InvalidInput("confusion sizes differ".into()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn wa_ua(&self) -> Result<(f64, f64)> {
        compute_wa_ua(&self.0)
    }
}

/// `wa = trace / total`; `ua` = mean recall over classes with support.
pub fn compute_wa_ua(confusion: &[Vec<u64>]) -> Result<(f64, f64)> {
    let k = confusion.len();
    if confusion.iter().any(|r| r.len() != k) {
        return Err(PcqError::InvalidInput(
            "confusion matrix must be square".into(),
        ));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(PcqError::InvalidInput(
            "confusion matrix is all zero".into(),
        ));
    }
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let mut recall_sum = 0.0;
    let mut supported = 0usize;
    for (i, row) in confusion.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support > 0 {
            recall_sum += row[i] as f64 / support as f64;
            supported += 1;
        }
    }
    Ok((trace as f64 / total as f64, recall_sum / supported as f64))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_example() {
        let (wa, ua) = compute_wa_ua(&[vec![3, 1], vec![1, 1]]).unwrap();
        assert!((wa - 4.0 / 6.0).abs() < 1e-12);
        assert!((ua - 0.625).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(compute_wa_ua(&[vec![0, 0], vec![0, 0]]).is_err());
        assert!(compute_wa_ua(&[vec![1, 0]]).is_err());
        let (wa, ua) = compute_wa_ua(&[vec![5, 0], vec![0, 0]]).unwrap();
        assert_eq!((wa, ua), (1.0, 1.0));
    }

    #[test]
    fn pooled_is_elementwise_sum() {
        let mut a = Confusion(vec![vec![1, 2], vec![3, 4]]);
        a.add(&Confusion(vec![vec![1, 0], vec![0, 1]])).unwrap();
        assert_eq!(a.0, vec![vec![2, 2], vec![3, 5]]);
        assert_eq!(a.total(), 12);
    }

    #[test]
    fn mean_std_of_constant() {
        assert_eq!(mean_std(&[1.0; 10]), (1.0, 0.0));
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!((m, s), (0.5, 0.5));
    }
}
