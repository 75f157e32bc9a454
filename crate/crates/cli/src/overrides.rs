//! Run-configuration flags shared by the training commands. Each flag
//! overrides the matching key of the JSON config.

use std::path::PathBuf;

use clap::Args;
use pcq_core::encoder::EncoderBackend;
use pcq_core::harness::RunConfig;
use pcq_core::network::{FusionQuery, PcqConfig};
use pcq_core::Result;

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run config with `model`, `train`, `taxonomy` and `features` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `iemocap4`, `emodb7` or `custom:a,b,...`; sets the class count.
    #[arg(long)]
    pub taxonomy: Option<String>,
    /// Small network: channel plan 4,8,12,16 over a 40x32 grid.
    #[arg(long)]
    pub miniature: bool,
    #[arg(long)]
    pub no_pdc: bool,
    #[arg(long)]
    pub no_csq: bool,
    /// `q4` or `q1`.
    #[arg(long)]
    pub fusion_q: Option<FusionQuery>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// `standin` or `precomputed`.
    #[arg(long)]
    pub encoder: Option<EncoderBackend>,
    /// Width of precomputed embeddings.
    #[arg(long)]
    pub emb_width: Option<usize>,
    #[arg(long)]
    pub emb_dir: Option<PathBuf>,
    /// Spectrogram cache written by `features`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub log1p: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Seeds both parameter init and batch shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<u8>,
}

impl Overrides {
    /// Config file (or defaults), then flags; the class count follows the
    /// taxonomy.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = &self.taxonomy {
            cfg.taxonomy = t.clone();
        }
        let m = &mut cfg.model;
        if self.miniature {
            let mini = PcqConfig::miniature();
            m.channel_plan = mini.channel_plan;
            m.input_hw = mini.input_hw;
            m.classifier_hidden = mini.classifier_hidden;
            m.encoder.standin_widths = mini.encoder.standin_widths;
        }
        m.use_pdc &= !self.no_pdc;
        m.use_csq &= !self.no_csq;
        set(&mut m.fusion_q, self.fusion_q);
        set(&mut m.dropout, self.dropout);
        set(&mut m.encoder.backend, self.encoder);
        set(&mut m.encoder.precomputed_dim, self.emb_width);
        set(&mut m.seed, self.seed);
        let t = &mut cfg.train;
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.patience, self.patience);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.seed, self.seed);
        set(&mut t.folds, self.folds);
        let f = &mut cfg.features;
        f.log1p |= self.log1p;
        if self.cache_dir.is_some() {
            f.cache_dir = self.cache_dir.clone();
        }
        if self.emb_dir.is_some() {
            f.emb_dir = self.emb_dir.clone();
        }
        cfg.model.num_classes = cfg.taxonomy()?.num_classes();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"train": {"lr": 0.5, "patience": 3}, "taxonomy": "emodb7"}"#,
        )
        .unwrap();
        let o = Overrides {
            config: Some(path),
            lr: Some(1e-3),
            no_csq: true,
            seed: Some(9),
            ..Overrides::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.patience, 3);
        assert_eq!(cfg.model.num_classes, 7);
        assert!(!cfg.model.use_csq);
        assert_eq!((cfg.model.seed, cfg.train.seed), (9, 9));
    }

    #[test]
    fn miniature_keeps_other_keys() {
        let o = Overrides {
            miniature: true,
            dropout: Some(0.0),
            ..Overrides::default()
        };
        let cfg = o.resolve().unwrap();
        assert_eq!(cfg.model.channel_plan, vec![4, 8, 12, 16]);
        assert_eq!(cfg.model.dropout, 0.0);
        assert_eq!(cfg.model.num_classes, 4);
    }
}
