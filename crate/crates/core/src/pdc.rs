//! Parameter-efficient depth convolution (PDC) block.
//!
//! Pointwise expand `C -> 2C`, ReLU, depthwise 3x3, channel attention
//! (global average pool, `2C -> C/3 -> 2C` squeeze-excite, sigmoid gate),
//! pointwise project `2C -> C`. Everything is bias-free, which gives exactly
//! `(16/3) C^2 + 18 C` weights when `3 | C`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Init, ParamBuilder, ParamId, Var};
use crate::error::{shape_err, PcqError, Result};
use crate::tensor::Scalar;

pub const EXPANSION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdcConfig {
    pub channels: usize,
}

impl PdcConfig {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(PcqError::Config("PDC channels must be >= 1".into()));
        }
        Ok(PdcConfig { channels })
    }

    pub fn internal_width(&self) -> usize {
        EXPANSION * self.channels
    }

    /// `floor(C/3)`, at least 1.
    pub fn se_hidden(&self) -> usize {
        (self.channels / 3).max(1)
    }
}

/// Exact parameter count of the constructed block.
pub fn pdc_param_count(channels: usize) -> usize {
    let cfg = PdcConfig { channels };
    let (c, wide, hidden) = (channels, cfg.internal_width(), cfg.se_hidden());
    let expand = wide * c;
    let depthwise = 9 * wide;
    let squeeze_excite = 2 * wide * hidden;
    let project = c * wide;
    expand + depthwise + squeeze_excite + project
}

/// `(16/3) C^2 + 18 C`.
pub fn pdc_formula(channels: usize) -> f64 {
    let c = channels as f64;
    16.0 / 3.0 * c * c + 18.0 * c
}

/// Bias-free 3x3 convolution `C -> C`, the block PDC replaces.
pub fn conv3x3_param_count(channels: usize) -> usize {
    9 * channels * channels
}

/// Smallest `C` for which the PDC block is cheaper than a plain 3x3 conv.
pub fn pdc_crossover() -> usize {
    (1..)
        .find(|&c| pdc_param_count(c) < conv3x3_param_count(c))
        .expect("crossover exists")
}

#[derive(Debug, Clone)]
pub struct PdcBlock {
    pub config: PdcConfig,
    expand: ParamId,
    depthwise: ParamId,
    squeeze: ParamId,
    excite: ParamId,
    project: ParamId,
}

/// Intermediate values of one PDC forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PdcTrace {
    /// Depthwise output, the `2C`-wide map the attention gates.
    pub depthwise: Var,
    /// Channel weights, `[2C]`, each in `(0, 1)`.
    pub weights: Var,
    pub gated: Var,
    pub output: Var,
}

impl PdcBlock {
    pub fn new(b: &mut ParamBuilder, config: PdcConfig) -> Result<Self> {
        let c = config.channels;
        let wide = config.internal_width();
        let hidden = config.se_hidden();
        Ok(PdcBlock {
            config,
            expand: b.add(
                "pw1.weight",
                &[wide, c, 1, 1],
                Init::KaimingUniform { fan_in: c },
            )?,
            depthwise: b.add(
                "dw.weight",
                &[wide, 1, 3, 3],
                Init::KaimingUniform { fan_in: 9 },
            )?,
            squeeze: b.add(
                "se.fc1.weight",
                &[hidden, wide],
                Init::KaimingUniform { fan_in: wide },
            )?,
            excite: b.add(
                "se.fc2.weight",
                &[wide, hidden],
                Init::KaimingUniform { fan_in: hidden },
            )?,
            project: b.add(
                "pw2.weight",
                &[c, wide, 1, 1],
                Init::KaimingUniform { fan_in: wide },
            )?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.output)
    }

    pub fn forward_traced<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<PdcTrace> {
        let c = g.value(x).dims3()?.0;
        if c != self.config.channels {
            return Err(shape_err!(
                "PDC block built for {} channels, got {c}",
                self.config.channels
            ));
        }
        let w = g.param(self.expand);
        let h = g.conv2d(x, w, ConvSpec::default())?;
        let h = g.relu(h);
        let w = g.param(self.depthwise);
        let depthwise = g.depthwise_conv3x3(h, w, 1)?;
        let weights = self.channel_weights(g, depthwise)?;
        let wide = self.config.internal_width();
        let gate = g.reshape(weights, &[wide, 1, 1])?;
        let gated = g.mul(depthwise, gate)?;
        let w = g.param(self.project);
        let output = g.conv2d(gated, w, ConvSpec::default())?;
        Ok(PdcTrace {
            depthwise,
            weights,
            gated,
            output,
        })
    }

    /// `sigmoid(fc2(relu(fc1(gap(h)))))`.
    pub fn channel_weights<F: Scalar>(&self, g: &mut Graph<'_, F>, h: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(h)?;
        let w1 = g.param(self.squeeze);
        let s = g.linear(pooled, w1, None)?;
        let s = g.relu(s);
        let w2 = g.param(self.excite);
        let e = g.linear(s, w2, None)?;
        Ok(g.sigmoid(e))
    }
}
