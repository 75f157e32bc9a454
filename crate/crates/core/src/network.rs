//! The full progressive channel-query network.
//!
//! Spectrogram -> MLCNN (`x_1..x_L`); speech branch -> query tokens
//! (`Q_1..Q_{L-1}`); one CSQ stage per adjacent layer pair (`z_j`);
//! `Q_4 = x_L * pool(Q_1)`; global average pools of the `z_j`, `x_L` and
//! `Q_4` are concatenated and classified by a two-layer MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Init, ParamBuilder, ParamId, Params, Var};
use crate::csq::{CsqConfig, CsqModule, DEFAULT_DILATIONS};
use crate::encoder::{EncoderBackend, EncoderConfig, QueryEncoder, QueryTokens};
use crate::error::{shape_err, PcqError, Result};
use crate::mlcnn::{adjacent_pairs, LayerOutputs, Mlcnn, MlcnnConfig, DEFAULT_CHANNEL_PLAN};
use crate::tensor::{Scalar, Tensor};

/// Which query map feeds the fusion vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionQuery {
    /// `Gap(Q_4)`, the attention product with the last MLCNN layer.
    Q4,
    /// `Gap(Q_1)`, a single scalar.
    Q1,
}

impl std::str::FromStr for FusionQuery {
    type Err = PcqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q4" => Ok(FusionQuery::Q4),
            "q1" => Ok(FusionQuery::Q1),
            other => Err(PcqError::Config(format!("unknown fusion query {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcqConfig {
    pub num_classes: usize,
    pub channel_plan: Vec<usize>,
    /// Spectrogram grid the MLCNN sees; larger inputs are average-pooled down.
    pub input_hw: [usize; 2],
    pub use_pdc: bool,
    pub use_csq: bool,
    pub fusion_q: FusionQuery,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    pub group_count: usize,
    pub dilations: Vec<usize>,
    pub encoder: EncoderConfig,
}

impl Default for PcqConfig {
    fn default() -> Self {
        PcqConfig {
            num_classes: 4,
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            input_hw: [300, 200],
            use_pdc: true,
            use_csq: true,
            fusion_q: FusionQuery::Q4,
            classifier_hidden: 128,
            dropout: 0.3,
            seed: 0,
            group_count: DEFAULT_DILATIONS.len(),
            dilations: DEFAULT_DILATIONS.to_vec(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl PcqConfig {
    /// Small variant for gradient checks and CPU smoke training: channel plan
    /// `[4, 8, 12, 16]` over a `40 x 32` input grid.
    pub fn miniature() -> Self {
        PcqConfig {
            channel_plan: vec![4, 8, 12, 16],
            input_hw: [40, 32],
            classifier_hidden: 32,
            encoder: EncoderConfig {
                standin_widths: vec![8, 8, 16, 16],
                ..EncoderConfig::default()
            },
            ..PcqConfig::default()
        }
    }

    pub fn mlcnn(&self) -> MlcnnConfig {
        MlcnnConfig {
            channel_plan: self.channel_plan.clone(),
            use_pdc: self.use_pdc,
        }
    }

    /// `(C, H, W)` of every MLCNN output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.mlcnn()
            .output_shapes((self.input_hw[0], self.input_hw[1]))
    }

    pub fn fusion_width(&self) -> usize {
        let plan = &self.channel_plan;
        let last = *plan.last().unwrap_or(&0);
        let z: usize = if self.use_csq {
            plan[..plan.len().saturating_sub(1)].iter().sum()
        } else {
            0
        };
        let q = match self.fusion_q {
            FusionQuery::Q4 => last,
            FusionQuery::Q1 => 1,
        };
        z + last + q
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(PcqError::Config("num_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PcqError::Config("dropout must be in [0, 1)".into()));
        }
        if self.classifier_hidden == 0 {
            return Err(PcqError::Config(
                "classifier_hidden must be positive".into(),
            ));
        }
        self.mlcnn().validate()?;
        self.encoder.validate()?;
        let shapes = self.layer_shapes();
        if shapes.iter().any(|&(_, h, w)| h == 0 || w == 0) {
            return Err(PcqError::Config(format!(
                "input grid {:?} too small for {} layers",
                self.input_hw,
                self.channel_plan.len()
            )));
        }
        Ok(())
    }
}

/// Parameter counts per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub mlcnn: usize,
    pub encoder: usize,
    pub csq: usize,
    pub classifier: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct PcqNetwork {
    pub config: PcqConfig,
    mlcnn: Mlcnn,
    encoder: QueryEncoder,
    csq: Vec<CsqModule>,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct PcqTrace {
    pub layers: LayerOutputs,
    pub frames: Var,
    pub queries: QueryTokens,
    pub q4: Var,
    pub zs: Vec<Var>,
    pub fusion: Var,
    pub logits: Var,
}

impl PcqNetwork {
    /// Builds the network and its freshly initialised parameters.
    pub fn new(config: PcqConfig) -> Result<(Self, Params<f32>)> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.seed);
        let shapes = config.layer_shapes();
        let mlcnn = b.scope("mlcnn", |b| Mlcnn::new(b, config.mlcnn()))?;
        let encoder = b.scope("encoder", |b| {
            QueryEncoder::new(b, config.encoder.clone(), shapes[0].2)
        })?;
        let mut csq = Vec::new();
        if config.use_csq {
            for (j, pair) in shapes.windows(2).enumerate() {
                let cfg = CsqConfig {
                    c_low: pair[0].0,
                    c_high: pair[1].0,
                    group_count: config.group_count,
                    dilations: config.dilations.clone(),
                };
                csq.push(b.scope(&format!("csq{}", j + 1), |b| CsqModule::new(b, cfg))?);
            }
        }
        let fw = config.fusion_width();
        let hid = config.classifier_hidden;
        let k = config.num_classes;
        let (fc1, fc2) = b.scope("classifier", |b| {
            let fc1 = (
                b.add(
                    "fc1.weight",
                    &[hid, fw],
                    Init::KaimingUniform { fan_in: fw },
                )?,
                b.add("fc1.bias", &[hid], Init::Zeros)?,
            );
            let fc2 = (
                b.add(
                    "fc2.weight",
                    &[k, hid],
                    Init::KaimingUniform { fan_in: hid },
                )?,
                b.add("fc2.bias", &[k], Init::Zeros)?,
            );
            Ok((fc1, fc2))
        })?;
        Ok((
            PcqNetwork {
                config,
                mlcnn,
                encoder,
                csq,
                fc1,
                fc2,
            },
            b.finish(),
        ))
    }

    pub fn encoder(&self) -> &QueryEncoder {
        &self.encoder
    }

    pub fn param_breakdown<F: Scalar>(params: &Params<F>) -> ParamBreakdown {
        let csq = params
            .iter()
            .filter(|(_, p)| p.name.starts_with("csq"))
            .map(|(_, p)| p.value.len())
            .sum();
        ParamBreakdown {
            mlcnn: params.numel_under("mlcnn."),
            encoder: params.numel_under("encoder."),
            csq,
            classifier: params.numel_under("classifier."),
            total: params.numel(),
        }
    }

    /// `spec` is `[1, H, W]` (pooled to `input_hw` when larger); `speech` is
    /// the encoder-branch input: raw audio `[1, 48000]` for the stand-in or a
    /// `[T, D]` embedding for the precomputed backend. Passing an RNG enables
    /// dropout.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        spec: Var,
        speech: Var,
        rng: Option<&mut R>,
    ) -> Result<PcqTrace> {
        let [ih, iw] = self.config.input_hw;
        let (c, h, w) = g.value(spec).dims3()?;
        let x = if (h, w) == (ih, iw) {
            spec
        } else if c == 1 && h >= ih && w >= iw {
            g.adaptive_avg_pool(spec, ih, iw)?
        } else {
            return Err(shape_err!(
                "spectrogram input {:?} cannot feed a {ih}x{iw} network",
                g.shape(spec)
            ));
        };

        let layers = self.mlcnn.forward(g, x)?;
        let sizes: Vec<(usize, usize)> = layers
            .xs
            .iter()
            .map(|&v| {
                let s = g.shape(v);
                (s[1], s[2])
            })
            .collect();
        let frames = self.encoder.encode(g, speech)?;
        let queries = self
            .encoder
            .make_query_tokens(g, frames, &sizes[..sizes.len() - 1])?;

        let x_last = layers.last();
        let (hl, wl) = *sizes.last().unwrap();
        let q1 = queries.tokens[0];
        let q1_small = g.adaptive_avg_pool(q1, hl, wl)?;
        let q4 = g.mul(x_last, q1_small)?;

        let mut zs = Vec::new();
        if self.config.use_csq {
            for ((pair, module), &q) in adjacent_pairs(&layers)
                .iter()
                .zip(&self.csq)
                .zip(&queries.tokens)
            {
                zs.push(module.forward(g, pair.low, pair.high, q)?);
            }
        }

        let mut pooled = Vec::new();
        for &z in &zs {
            pooled.push(g.global_avg_pool(z)?);
        }
        pooled.push(g.global_avg_pool(x_last)?);
        pooled.push(match self.config.fusion_q {
            FusionQuery::Q4 => g.global_avg_pool(q4)?,
            FusionQuery::Q1 => g.global_avg_pool(q1)?,
        });
        let fusion = concat_vectors(g, &pooled)?;

        let (w1, b1) = (g.param(self.fc1.0), g.param(self.fc1.1));
        let hdn = g.linear(fusion, w1, Some(b1))?;
        let hdn = g.relu(hdn);
        let hdn = g.dropout(hdn, self.config.dropout, rng);
        let (w2, b2) = (g.param(self.fc2.0), g.param(self.fc2.1));
        let logits = g.linear(hdn, w2, Some(b2))?;

        Ok(PcqTrace {
            layers,
            frames,
            queries,
            q4,
            zs,
            fusion,
            logits,
        })
    }

    /// Places one segment's inputs on `g` in the order `forward` expects.
    pub fn inputs<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        spec: &Tensor<f32>,
        speech: &Tensor<f32>,
    ) -> Result<(Var, Var)> {
        let spec = match spec.rank() {
            2 => spec
                .clone()
                .reshape(&[1, spec.shape()[0], spec.shape()[1]])?,
            _ => spec.clone(),
        };
        let speech = match (self.config.encoder.backend, speech.rank()) {
            (EncoderBackend::Standin, 1) => speech.clone().reshape(&[1, speech.len()])?,
            _ => speech.clone(),
        };
        Ok((g.input(spec.cast()), g.input(speech.cast())))
    }
}

/// Concatenates rank-1 vectors.
fn concat_vectors<F: Scalar>(g: &mut Graph<'_, F>, parts: &[Var]) -> Result<Var> {
    let as_maps = parts
        .iter()
        .map(|&p| {
            let n = g.shape(p)[0];
            g.reshape(p, &[n, 1, 1])
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat_channels(&as_maps)?;
    let n = g.shape(cat)[0];
    g.reshape(cat, &[n])
}

/// Clip-level decision from per-segment logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub label: usize,
    pub probs: Vec<f64>,
}

/// Averages segment softmax probabilities; ties go to the lower class index.
pub fn clip_prediction(segment_logits: &[Tensor<f32>]) -> Result<ClipPrediction> {
    let first = segment_logits
        .first()
        .ok_or_else(|| PcqError::InvalidInput("clip has no segment predictions".into()))?;
    let k = first.len();
    let mut mean = vec![0.0f64; k];
    for l in segment_logits {
        if l.len() != k {
            return Err(shape_err!("segment logits disagree in length"));
        }
        let logits: Vec<f64> = l.data().iter().map(|&v| v as f64).collect();
        for (m, p) in mean.iter_mut().zip(softmax(&logits)) {
            *m += p;
        }
    }
    let n = segment_logits.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(ClipPrediction {
        label: probs_argmax(&mean),
        probs: mean,
    })
}

/// Index of the first maximal probability.
pub fn probs_argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
