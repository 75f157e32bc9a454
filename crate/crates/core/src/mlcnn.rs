//! Multi-layer lightweight CNN over the spectrogram.
//!
//! Each layer is a bias-free 3x3 transition conv, ReLU, a PDC block (or a
//! plain 3x3 conv for the ablation), then 2x2 max pooling. Every pooled
//! layer output is exposed, and adjacent outputs are paired for the
//! channel-query stages.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Init, ParamBuilder, ParamId, Var};
use crate::error::{shape_err, PcqError, Result};
use crate::pdc::{conv3x3_param_count, pdc_param_count, PdcBlock, PdcConfig};
use crate::tensor::Scalar;

pub const DEFAULT_CHANNEL_PLAN: [usize; 4] = [16, 32, 48, 64];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlcnnConfig {
    /// Output channels per layer; its length is the layer count (2..=4).
    pub channel_plan: Vec<usize>,
    /// `false` swaps every PDC block for a plain 3x3 conv.
    pub use_pdc: bool,
}

impl Default for MlcnnConfig {
    fn default() -> Self {
        MlcnnConfig {
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            use_pdc: true,
        }
    }
}

impl MlcnnConfig {
    pub fn layers(&self) -> usize {
        self.channel_plan.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.layers()) {
            return Err(PcqError::Config(format!(
                "MLCNN needs 2 to 4 layers, got {}",
                self.layers()
            )));
        }
        if self.channel_plan.contains(&0) {
            return Err(PcqError::Config(
                "channel plan entries must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(C, H, W)` of every layer output for an `H x W` input.
    pub fn output_shapes(&self, input_hw: (usize, usize)) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = input_hw;
        self.channel_plan
            .iter()
            .map(|&c| {
                h /= 2;
                w /= 2;
                (c, h, w)
            })
            .collect()
    }

    /// Closed-form parameter count; equals the constructed branch.
    pub fn param_count(&self) -> usize {
        let mut prev = 1;
        let mut total = 0;
        for &c in &self.channel_plan {
            total += 9 * prev * c;
            total += if self.use_pdc {
                pdc_param_count(c)
            } else {
                conv3x3_param_count(c)
            };
            prev = c;
        }
        total
    }

    /// Per-layer `(transition, body)` counts.
    pub fn layer_breakdown(&self) -> Vec<(usize, usize)> {
        let mut prev = 1;
        self.channel_plan
            .iter()
            .map(|&c| {
                let t = 9 * prev * c;
                prev = c;
                let body = if self.use_pdc {
                    pdc_param_count(c)
                } else {
                    conv3x3_param_count(c)
                };
                (t, body)
            })
            .collect()
    }

    /// Receptive field (in input pixels) of one unit of the last layer.
    pub fn receptive_field(&self) -> usize {
        // Per layer: 3x3 transition, 3x3 body (depthwise or plain), 2x2/2 pool.
        let mut rf = 1;
        let mut jump = 1;
        for _ in 0..self.layers() {
            for (k, s) in [(3, 1), (3, 1), (2, 2)] {
                rf += (k - 1) * jump;
                jump *= s;
            }
        }
        rf
    }
}

#[derive(Debug, Clone)]
enum Body {
    Pdc(PdcBlock),
    Conv3x3(ParamId),
}

#[derive(Debug, Clone)]
struct Layer {
    transition: ParamId,
    body: Body,
}

#[derive(Debug, Clone)]
pub struct Mlcnn {
    pub config: MlcnnConfig,
    layers: Vec<Layer>,
}

/// Pooled outputs `x_1 .. x_L`.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    pub xs: Vec<Var>,
}

/// `f_m = (x_m, x_{m+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjacentPair {
    pub low: Var,
    pub high: Var,
}

impl LayerOutputs {
    pub fn last(&self) -> Var {
        *self.xs.last().expect("at least two layers")
    }
}

/// Pairs consecutive layer outputs. The pairs hold the same handles as
/// `outs`, not copies.
pub fn adjacent_pairs(outs: &LayerOutputs) -> Vec<AdjacentPair> {
    outs.xs
        .windows(2)
        .map(|w| AdjacentPair {
            low: w[0],
            high: w[1],
        })
        .collect()
}

impl Mlcnn {
    pub fn new(b: &mut ParamBuilder, config: MlcnnConfig) -> Result<Self> {
        config.validate()?;
        let mut prev = 1;
        let mut layers = Vec::new();
        for (i, &c) in config.channel_plan.iter().enumerate() {
            let layer = b.scope(&format!("layer{}", i + 1), |b| {
                let transition = b.add(
                    "transition.weight",
                    &[c, prev, 3, 3],
                    Init::KaimingUniform { fan_in: 9 * prev },
                )?;
                let body = if config.use_pdc {
                    Body::Pdc(b.scope("pdc", |b| PdcBlock::new(b, PdcConfig::new(c)?))?)
                } else {
                    Body::Conv3x3(b.add(
                        "conv3x3.weight",
                        &[c, c, 3, 3],
                        Init::KaimingUniform { fan_in: 9 * c },
                    )?)
                };
                Ok(Layer { transition, body })
            })?;
            layers.push(layer);
            prev = c;
        }
        Ok(Mlcnn { config, layers })
    }

    /// `x` is the `[1, H, W]` spectrogram map.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<LayerOutputs> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != 1 {
            return Err(shape_err!("MLCNN input must have one channel, got {c}"));
        }
        let min = 1 << self.layers.len();
        if h < min || w < min {
            return Err(shape_err!(
                "MLCNN input {h}x{w} too small for {} pooling stages",
                self.layers.len()
            ));
        }
        let mut cur = x;
        let mut xs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let wt = g.param(layer.transition);
            let t = g.conv2d(cur, wt, ConvSpec::padded(1))?;
            let t = g.relu(t);
            let b = match &layer.body {
                Body::Pdc(p) => p.forward(g, t)?,
                Body::Conv3x3(id) => {
                    let wt = g.param(*id);
                    g.conv2d(t, wt, ConvSpec::padded(1))?
                }
            };
            cur = g.max_pool2(b)?;
            xs.push(cur);
        }
        Ok(LayerOutputs { xs })
    }
}
