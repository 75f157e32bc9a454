//! Mini-batch training, clip-level evaluation and early stopping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, GradAccumulator, Gradients, Graph, Params};
use crate::error::{PcqError, Result};
use crate::network::{clip_prediction, ClipPrediction, PcqConfig, PcqNetwork};
use crate::tensor::Tensor;

use super::dataset::{ClipSample, Dataset, SegmentSample};
use super::metrics::Confusion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without a validation-WA improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub folds: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-5,
            weight_decay: 0.01,
            patience: 20,
            max_epochs: 200,
            seed: 0,
            folds: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PcqError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(PcqError::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(PcqError::Config("max_epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(PcqError::Config("lr must be positive".into()));
        }
        if !(1..=crate::manifest::MAX_FOLDS).contains(&self.folds) {
            return Err(PcqError::Config("folds must be 1..=10".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_wa: Option<f64>,
    pub val_ua: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: u8,
    pub confusion: Confusion,
    pub wa: f64,
    pub ua: f64,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub epochs: Vec<EpochRecord>,
}

/// A segment paired with its clip's label.
pub type Example<'a> = (&'a SegmentSample, usize);

pub fn segment_examples<'a>(clips: &[&'a ClipSample]) -> Vec<Example<'a>> {
    clips
        .iter()
        .flat_map(|c| c.segments.iter().map(move |s| (s, c.label)))
        .collect()
}

/// Cross-entropy of one segment and its gradients. Dropout is active only
/// when `dropout_seed` is given.
pub fn segment_loss_grad(
    net: &PcqNetwork,
    params: &Params<f32>,
    (seg, label): Example<'_>,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients<f32>)> {
    let mut g = Graph::new(params);
    let (spec, speech) = net.inputs(&mut g, &seg.spec, &seg.speech)?;
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let trace = net.forward(&mut g, spec, speech, rng.as_mut())?;
    let loss = g.softmax_cross_entropy(trace.logits, label)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(PcqError::Numerical(format!("non-finite loss {value}")));
    }
    Ok((value, g.backward(loss)?))
}

/// Mean loss over `batch` with dropout off.
pub fn batch_loss(net: &PcqNetwork, params: &Params<f32>, batch: &[Example<'_>]) -> Result<f64> {
    let losses = batch
        .par_iter()
        .map(|&ex| {
            let mut g = Graph::new(params);
            let (spec, speech) = net.inputs(&mut g, &ex.0.spec, &ex.0.speech)?;
            let trace = net.forward::<f32, ChaCha8Rng>(&mut g, spec, speech, None)?;
            let loss = g.softmax_cross_entropy(trace.logits, ex.1)?;
            Ok(g.value(loss).data()[0] as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// One optimizer step on the mean batch loss; returns that loss. Per-sample
/// work runs in parallel and is reduced in batch order, so results do not
/// depend on scheduling.
pub fn train_step(
    net: &PcqNetwork,
    params: &mut Params<f32>,
    opt: &mut AdamW,
    batch: &[Example<'_>],
    dropout_seeds: Option<&[u64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(PcqError::InvalidInput("empty batch".into()));
    }
    let frozen: &Params<f32> = params;
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, &ex)| segment_loss_grad(net, frozen, ex, dropout_seeds.map(|s| s[i])))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = GradAccumulator::new(frozen);
    let mut total = 0.0;
    for (loss, grads) in &results {
        total += loss;
        acc.add(grads);
    }
    let n = batch.len() as f32;
    acc.scale(1.0 / n);
    if acc.slots().iter().flatten().any(|t| !t.all_finite()) {
        return Err(PcqError::Numerical("non-finite gradient".into()));
    }
    opt.step(params, acc.slots())?;
    Ok(total / batch.len() as f64)
}

/// Segment logits with dropout off.
pub fn segment_logits(
    net: &PcqNetwork,
    params: &Params<f32>,
    seg: &SegmentSample,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new(params);
    let (spec, speech) = net.inputs(&mut g, &seg.spec, &seg.speech)?;
    let trace = net.forward::<f32, ChaCha8Rng>(&mut g, spec, speech, None)?;
    let logits = g.value(trace.logits).clone();
    if !logits.all_finite() {
        return Err(PcqError::Numerical("non-finite logits".into()));
    }
    Ok(logits)
}

pub fn predict_clip(
    net: &PcqNetwork,
    params: &Params<f32>,
    clip: &ClipSample,
) -> Result<ClipPrediction> {
    let logits = clip
        .segments
        .iter()
        .map(|s| segment_logits(net, params, s))
        .collect::<Result<Vec<_>>>()?;
    clip_prediction(&logits)
}

pub fn evaluate(
    net: &PcqNetwork,
    params: &Params<f32>,
    clips: &[&ClipSample],
) -> Result<Confusion> {
    let preds = clips
        .par_iter()
        .map(|c| predict_clip(net, params, c).map(|p| (c.label, p.label)))
        .collect::<Result<Vec<_>>>()?;
    let mut conf = Confusion::zeros(net.config.num_classes);
    for (t, p) in preds {
        conf.record(t, p);
    }
    Ok(conf)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: Params<f32>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

/// Trains from `params`. With a validation set, the weights of the epoch with
/// the highest validation WA (earliest on ties) are restored at the end and
/// training stops after `patience` epochs without improvement. Without one,
/// training runs `max_epochs` and keeps the final weights.
pub fn fit(
    net: &PcqNetwork,
    mut params: Params<f32>,
    train: &[&ClipSample],
    val: Option<&[&ClipSample]>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut examples = segment_examples(train);
    if examples.is_empty() {
        return Err(PcqError::Config("no training segments".into()));
    }
    let mut opt = AdamW::new(&params, cfg.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Params<f32>)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        examples.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let loss = train_step(net, &mut params, &mut opt, batch, Some(&seeds))?;
            loss_sum += loss * batch.len() as f64;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / examples.len() as f64,
            val_wa: None,
            val_ua: None,
        };
        if let Some(val) = val {
            let (wa, ua) = evaluate(net, &params, val)?.wa_ua()?;
            record.val_wa = Some(wa);
            record.val_ua = Some(ua);
            if best.as_ref().is_none_or(|b| wa > b.0) {
                best = Some((wa, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        on_epoch(&record);
        epochs.push(record);
        if since_best >= cfg.patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, epochs.len()),
    };
    Ok(FitOutcome {
        params,
        epochs,
        best_epoch,
        stop_reason,
    })
}

/// Seed for everything fold-specific, so folds are independent of run order.
pub fn fold_seed(base: u64, fold: u8) -> u64 {
    base ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct FoldOutcome {
    pub report: FoldReport,
    pub network: PcqNetwork,
    pub params: Params<f32>,
}

/// Trains on every fold except `fold_id` and evaluates clip-level predictions
/// on `fold_id`.
pub fn run_fold(
    fold_id: u8,
    data: &Dataset,
    model: &PcqConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let val = data.fold(fold_id);
    if val.is_empty() {
        return Err(PcqError::Config(format!("fold {fold_id} is empty")));
    }
    let train = data.excluding_fold(fold_id);
    if train.is_empty() {
        return Err(PcqError::Config(format!(
            "no training clips outside fold {fold_id}"
        )));
    }
    let seed = fold_seed(cfg.seed, fold_id);
    let model = PcqConfig {
        seed: fold_seed(model.seed, fold_id),
        ..model.clone()
    };
    let (net, params) = PcqNetwork::new(model)?;
    let fit = fit(&net, params, &train, Some(&val), cfg, seed, |_| {})?;
    let confusion = evaluate(&net, &fit.params, &val)?;
    let (wa, ua) = confusion.wa_ua()?;
    Ok(FoldOutcome {
        report: FoldReport {
            fold_id,
            confusion,
            wa,
            ua,
            best_epoch: fit.best_epoch,
            stop_reason: fit.stop_reason,
            train_clips: train.len(),
            eval_clips: val.len(),
            epochs: fit.epochs,
        },
        network: net,
        params: fit.params,
    })
}
