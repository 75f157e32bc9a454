//! k-fold cross-validation and its reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PcqError, Result};
use crate::network::PcqConfig;

use super::dataset::Dataset;
use super::metrics::{mean_std, Confusion};
use super::train::{run_fold, FoldReport, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub mean_wa: f64,
    pub std_wa: f64,
    pub mean_ua: f64,
    pub std_ua: f64,
    pub pooled_confusion: Confusion,
    pub model: PcqConfig,
    pub train: TrainConfig,
}

/// Unweighted mean/std over folds plus the pooled confusion.
pub fn summarize(
    classes: Vec<String>,
    folds: Vec<FoldReport>,
    model: PcqConfig,
    train: TrainConfig,
) -> Result<CvSummary> {
    if folds.is_empty() {
        return Err(PcqError::InvalidInput("no fold reports".into()));
    }
    let mut pooled = Confusion::zeros(classes.len());
    for f in &folds {
        pooled.add(&f.confusion)?;
    }
    let was: Vec<f64> = folds.iter().map(|f| f.wa).collect();
    let uas: Vec<f64> = folds.iter().map(|f| f.ua).collect();
    let (mean_wa, std_wa) = mean_std(&was);
    let (mean_ua, std_ua) = mean_std(&uas);
    Ok(CvSummary {
        classes,
        folds,
        mean_wa,
        std_wa,
        mean_ua,
        std_ua,
        pooled_confusion: pooled,
        model,
        train,
    })
}

/// Runs folds `0..train.folds` in parallel; each fold is trained
/// sequentially from its own seed.
pub fn run_cv(data: &Dataset, model: &PcqConfig, train: &TrainConfig) -> Result<CvSummary> {
    train.validate()?;
    model.validate()?;
    let reports = (0..train.folds)
        .into_par_iter()
        .map(|f| run_fold(f, data, model, train).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    summarize(
        data.taxonomy.classes.clone(),
        reports,
        model.clone(),
        train.clone(),
    )
}

impl CvSummary {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned per-fold table, the summary row and the pooled confusion.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4}  {:>7}  {:>7}  {:>10}  {:>10}  stop",
            "fold", "WA", "UA", "best_epoch", "eval_clips"
        );
        for f in &self.folds {
            let stop = match f.stop_reason {
                super::train::StopReason::EarlyStop => "early_stop",
                super::train::StopReason::MaxEpochs => "max_epochs",
            };
            let _ = writeln!(
                s,
                "{:>4}  {:>7.4}  {:>7.4}  {:>10}  {:>10}  {stop}",
                f.fold_id, f.wa, f.ua, f.best_epoch, f.eval_clips
            );
        }
        let _ = writeln!(
            s,
            "mean  WA {:.4} +/- {:.4}  UA {:.4} +/- {:.4}",
            self.mean_wa, self.std_wa, self.mean_ua, self.std_ua
        );
        let width = self
            .classes
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap_or(4)
            .max(6);
        let _ = write!(s, "\n{:>width$}", "true\\pred");
        for c in &self.classes {
            let _ = write!(s, "  {c:>width$}");
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.pooled_confusion.0) {
            let _ = write!(s, "{c:>width$}");
            for v in row {
                let _ = write!(s, "  {v:>width$}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::StopReason;

    fn report(fold: u8, wa: f64, conf: Vec<Vec<u64>>) -> FoldReport {
        FoldReport {
            fold_id: fold,
            confusion: Confusion(conf),
            wa,
            ua: wa,
            best_epoch: 1,
            stop_reason: StopReason::MaxEpochs,
            train_clips: 1,
            eval_clips: 1,
            epochs: vec![],
        }
    }

    #[test]
    fn perfect_folds_summary() {
        let folds = (0..10)
            .map(|f| report(f, 1.0, vec![vec![1, 0], vec![0, 1]]))
            .collect();
        let s = summarize(
            vec!["a".into(), "b".into()],
            folds,
            PcqConfig::default(),
            TrainConfig::default(),
        )
        .unwrap();
        assert_eq!((s.mean_wa, s.std_wa), (1.0, 0.0));
        assert_eq!(s.pooled_confusion.0, vec![vec![10, 0], vec![0, 10]]);
        assert!(s.text_table().contains("mean  WA 1.0000"));
    }
}
