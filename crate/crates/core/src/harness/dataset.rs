//! In-memory training data: every clip's segments as model-ready tensors.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Params};
use crate::dsp::{read_cached, read_index, read_wav, segment_clip, SpectrogramExtractor};
use crate::encoder::{EmbeddingStore, EncoderBackend};
use crate::error::{PcqError, Result};
use crate::manifest::{Manifest, ManifestRow};
use crate::network::PcqConfig;
use crate::tensor::Tensor;

use super::taxonomy::LabelTaxonomy;

/// How segment features are obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct FeatureOptions {
    pub log1p: bool,
    /// Spectrogram cache written by `batch_features`; computed from WAV when absent.
    pub cache_dir: Option<PathBuf>,
    /// Directory of `.emb` files, required by the precomputed encoder backend.
    pub emb_dir: Option<PathBuf>,
}


#[derive(Debug, Clone)]
pub struct SegmentSample {
    /// `[1, H, W]` at the network's input grid.
    pub spec: Tensor<f32>,
    /// `[1, 48000]` audio or `[T, D]` embedding.
    pub speech: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct ClipSample {
    pub clip_id: String,
    pub label: usize,
    pub fold: u8,
    pub segments: Vec<SegmentSample>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub taxonomy: LabelTaxonomy,
    pub clips: Vec<ClipSample>,
}

impl Dataset {
    pub fn fold(&self, fold: u8) -> Vec<&ClipSample> {
        self.clips.iter().filter(|c| c.fold == fold).collect()
    }

    pub fn excluding_fold(&self, fold: u8) -> Vec<&ClipSample> {
        self.clips.iter().filter(|c| c.fold != fold).collect()
    }

    pub fn all(&self) -> Vec<&ClipSample> {
        self.clips.iter().collect()
    }
}

/// Average-pools a `[1, H, W]` map down to `(h, w)`; identity when equal.
pub fn pool_to(spec: Tensor<f32>, hw: [usize; 2]) -> Result<Tensor<f32>> {
    if spec.shape()[1..] == hw {
        return Ok(spec);
    }
    let empty = Params::<f32>::default();
    let mut g = Graph::new(&empty);
    let x = g.input(spec);
    let y = g.adaptive_avg_pool(x, hw[0], hw[1])?;
    Ok(g.value(y).clone())
}

/// Loads every manifest row. Labels are mapped through the taxonomy's merge
/// rules first; the first failing row aborts the load.
pub fn load_dataset(
    manifest: &Manifest,
    taxonomy: &LabelTaxonomy,
    model: &PcqConfig,
    opts: &FeatureOptions,
) -> Result<Dataset> {
    taxonomy.validate()?;
    if taxonomy.num_classes() != model.num_classes {
        return Err(PcqError::Config(format!(
            "taxonomy {} has {} classes but the model expects {}",
            taxonomy.name,
            taxonomy.num_classes(),
            model.num_classes
        )));
    }
    let backend = model.encoder.backend;
    let store = match (backend, &opts.emb_dir) {
        (EncoderBackend::Precomputed, Some(d)) => Some(EmbeddingStore::new(d)),
        (EncoderBackend::Precomputed, None) => {
            return Err(PcqError::Config(
                "precomputed encoder backend needs an embedding directory".into(),
            ))
        }
        (EncoderBackend::Standin, _) => None,
    };
    let cache_index = match &opts.cache_dir {
        Some(dir) => {
            let index = read_index(dir)?;
            if index.log1p != opts.log1p {
                return Err(PcqError::Config(format!(
                    "feature cache log1p={} but log1p={} requested",
                    index.log1p, opts.log1p
                )));
            }
            Some(index)
        }
        None => None,
    };
    let extractor = SpectrogramExtractor::new(opts.log1p);

    let load_row = |row: &ManifestRow| -> Result<ClipSample> {
        let label = taxonomy.index_of(&row.label)?;
        let need_audio = opts.cache_dir.is_none() || backend == EncoderBackend::Standin;
        let segments = if need_audio {
            let clip = read_wav(&manifest.resolve(row), &row.clip_id)?;
            segment_clip(&clip)?
        } else {
            Vec::new()
        };
        let count = if need_audio {
            segments.len()
        } else {
            let index = cache_index
                .as_ref()
                .expect("cache present when audio is not needed");
            match index
                .entries
                .iter()
                .filter(|e| e.clip_id == row.clip_id)
                .count()
            {
                0 => {
                    return Err(PcqError::Data(format!(
                        "clip {} missing from feature cache",
                        row.clip_id
                    )))
                }
                n => n,
            }
        };
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let spec = match &opts.cache_dir {
                Some(dir) => read_cached(dir, &row.clip_id, i)?,
                None => extractor.compute(&segments[i])?,
            };
            let spec = pool_to(spec.to_input(), model.input_hw)?;
            let speech = match &store {
                Some(s) => s.load(&row.clip_id, i)?.frames,
                None => Tensor::new(&[1, segments[i].samples.len()], segments[i].samples.clone())?,
            };
            out.push(SegmentSample { spec, speech });
        }
        Ok(ClipSample {
            clip_id: row.clip_id.clone(),
            label,
            fold: row.fold,
            segments: out,
        })
    };

    let clips = manifest
        .rows
        .par_iter()
        .map(load_row)
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        taxonomy: taxonomy.clone(),
        clips,
    })
}
