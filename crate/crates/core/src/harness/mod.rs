//! Training, cross-validation, metrics, synthetic data and exports.

pub mod cv;
pub mod dataset;
pub mod export;
pub mod metrics;
pub mod synth;
pub mod taxonomy;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PcqError, Result};
use crate::network::PcqConfig;

pub use cv::{run_cv, summarize, CvSummary};
pub use dataset::{load_dataset, ClipSample, Dataset, FeatureOptions, SegmentSample};
pub use export::{export_fusion_features, load_model, save_model, write_predictions, ModelMeta};
pub use metrics::{compute_wa_ua, mean_std, Confusion};
pub use synth::{synth_corpus, MANIFEST_FILE};
pub use taxonomy::LabelTaxonomy;
pub use train::{
    batch_loss, evaluate, fit, predict_clip, run_fold, segment_examples, train_step, EpochRecord,
    FitOutcome, FoldOutcome, FoldReport, StopReason, TrainConfig,
};

/// The JSON run configuration: model, training and data sections. Missing
/// keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: PcqConfig,
    pub train: TrainConfig,
    /// `iemocap4`, `emodb7` or `custom:a,b,...`.
    pub taxonomy: String,
    pub features: FeatureOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: PcqConfig::default(),
            train: TrainConfig::default(),
            taxonomy: "iemocap4".into(),
            features: FeatureOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PcqError::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| PcqError::Config(format!("{}: {e}", path.display())))
    }

    pub fn taxonomy(&self) -> Result<LabelTaxonomy> {
        LabelTaxonomy::by_name(&self.taxonomy)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let t = self.taxonomy()?;
        if t.num_classes() != self.model.num_classes {
            return Err(PcqError::Config(format!(
                "taxonomy {} has {} classes, model.num_classes is {}",
                t.name,
                t.num_classes(),
                self.model.num_classes
            )));
        }
        Ok(())
    }
}
