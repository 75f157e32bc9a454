//! Model checkpoints with their configuration, per-clip predictions and
//! fusion-vector export.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Graph, Params};
use crate::error::{PcqError, Result};
use crate::network::{PcqConfig, PcqNetwork};

use super::dataset::{ClipSample, Dataset};
use super::taxonomy::LabelTaxonomy;
use super::train::predict_clip;

/// Stored in the checkpoint header so a checkpoint is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: PcqConfig,
    pub taxonomy: LabelTaxonomy,
    pub log1p: bool,
}

pub fn save_model(path: &Path, meta: &ModelMeta, params: &Params<f32>) -> Result<()> {
    save_checkpoint(path, params, serde_json::to_value(meta)?)
}

pub fn load_model(path: &Path) -> Result<(PcqNetwork, Params<f32>, ModelMeta)> {
    let ckpt = load_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(ckpt.header.meta.clone())
        .map_err(|e| PcqError::Data(format!("{}: bad model metadata: {e}", path.display())))?;
    let (net, mut params) = PcqNetwork::new(meta.model.clone())?;
    ckpt.apply(&mut params)?;
    Ok((net, params, meta))
}

/// Mean fusion vector over a clip's segments, dropout off.
pub fn clip_fusion(net: &PcqNetwork, params: &Params<f32>, clip: &ClipSample) -> Result<Vec<f32>> {
    let mut sum = vec![0.0f64; net.config.fusion_width()];
    for seg in &clip.segments {
        let mut g = Graph::new(params);
        let (spec, speech) = net.inputs(&mut g, &seg.spec, &seg.speech)?;
        let trace = net.forward::<f32, ChaCha8Rng>(&mut g, spec, speech, None)?;
        for (s, &v) in sum.iter_mut().zip(g.value(trace.fusion).data()) {
            *s += v as f64;
        }
    }
    let n = clip.segments.len().max(1) as f64;
    Ok(sum.into_iter().map(|s| (s / n) as f32).collect())
}

fn csv_err(path: &Path, e: csv::Error) -> PcqError {
    PcqError::Data(format!("{}: {e}", path.display()))
}

/// CSV `clip_id,f0..f{n-1},label`, one row per clip in dataset order.
pub fn export_fusion_features(
    net: &PcqNetwork,
    params: &Params<f32>,
    data: &Dataset,
    out: &Path,
) -> Result<usize> {
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    let width = net.config.fusion_width();
    let mut header = vec!["clip_id".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(out, e))?;
    for clip in &data.clips {
        let f = clip_fusion(net, params, clip)?;
        let mut rec = vec![clip.clip_id.clone()];
        rec.extend(f.iter().map(|v| v.to_string()));
        rec.push(data.taxonomy.classes[clip.label].clone());
        w.write_record(&rec).map_err(|e| csv_err(out, e))?;
    }
    w.flush().map_err(|e| PcqError::io(out, e))?;
    Ok(data.clips.len())
}

/// CSV `clip_id,label,predicted,p_<class>...`.
pub fn write_predictions(
    net: &PcqNetwork,
    params: &Params<f32>,
    data: &Dataset,
    out: &Path,
) -> Result<usize> {
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    let classes = &data.taxonomy.classes;
    let mut header = vec!["clip_id".to_string(), "label".into(), "predicted".into()];
    header.extend(classes.iter().map(|c| format!("p_{c}")));
    w.write_record(&header).map_err(|e| csv_err(out, e))?;
    for clip in &data.clips {
        let p = predict_clip(net, params, clip)?;
        let mut rec = vec![
            clip.clip_id.clone(),
            classes[clip.label].clone(),
            classes[p.label].clone(),
        ];
        rec.extend(p.probs.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(|e| csv_err(out, e))?;
    }
    w.flush().map_err(|e| PcqError::io(out, e))?;
    Ok(data.clips.len())
}
