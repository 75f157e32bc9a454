//! Channel semantic query (CSQ) module.
//!
//! The deep input is aligned to the shallow one (1x1 conv for channels,
//! bilinear resize for space). Both are split into `group_count` contiguous
//! channel groups; group `i` of each is averaged to one channel and stacked
//! with the query token into a 3-channel block. Each block gets its own 3x3
//! dilated conv, the blocks are concatenated, and a 1x1 conv merges them back
//! to `C_l` channels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Init, ParamBuilder, ParamId, Var};
use crate::error::{shape_err, PcqError, Result};
use crate::tensor::Scalar;

pub const DEFAULT_DILATIONS: [usize; 4] = [7, 5, 2, 1];
/// Shallow slice + deep slice + query token.
pub const BLOCK_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsqConfig {
    pub c_low: usize,
    pub c_high: usize,
    pub group_count: usize,
    pub dilations: Vec<usize>,
}

impl CsqConfig {
    pub fn new(c_low: usize, c_high: usize) -> Self {
        CsqConfig {
            c_low,
            c_high,
            group_count: DEFAULT_DILATIONS.len(),
            dilations: DEFAULT_DILATIONS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_count == 0 || !self.group_count.is_multiple_of(2) {
            return Err(PcqError::Config(format!(
                "group count must be even and positive, got {}",
                self.group_count
            )));
        }
        if self.dilations.len() != self.group_count {
            return Err(PcqError::Config(format!(
                "{} dilations for {} groups",
                self.dilations.len(),
                self.group_count
            )));
        }
        if self.dilations.contains(&0) {
            return Err(PcqError::Config("dilations must be >= 1".into()));
        }
        if !self.c_low.is_multiple_of(self.group_count) {
            return Err(PcqError::Config(format!(
                "shallow channels {} not divisible into {} groups",
                self.c_low, self.group_count
            )));
        }
        if self.c_high == 0 {
            return Err(PcqError::Config("deep channels must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let align = self.c_low * self.c_high;
        let dilated = self.group_count * BLOCK_WIDTH * BLOCK_WIDTH * 9;
        let merge = self.c_low * self.group_count * BLOCK_WIDTH;
        align + dilated + merge
    }
}

#[derive(Debug, Clone)]
pub struct CsqModule {
    pub config: CsqConfig,
    align: ParamId,
    dilated: Vec<ParamId>,
    merge: ParamId,
}

/// Intermediate values of one CSQ pass.
#[derive(Debug, Clone)]
pub struct CsqTrace {
    pub aligned: Var,
    /// Group blocks, each `[3, H_l, W_l]`.
    pub blocks: Vec<Var>,
    /// Per-group dilated conv outputs, before the merge conv.
    pub etas: Vec<Var>,
    pub output: Var,
}

impl CsqModule {
    pub fn new(b: &mut ParamBuilder, config: CsqConfig) -> Result<Self> {
        config.validate()?;
        let align = b.add(
            "align.weight",
            &[config.c_low, config.c_high, 1, 1],
            Init::KaimingUniform {
                fan_in: config.c_high,
            },
        )?;
        let dilated = (0..config.group_count)
            .map(|i| {
                b.add(
                    &format!("dilated{}.weight", i + 1),
                    &[BLOCK_WIDTH, BLOCK_WIDTH, 3, 3],
                    Init::KaimingUniform {
                        fan_in: 9 * BLOCK_WIDTH,
                    },
                )
            })
            .collect::<Result<_>>()?;
        let merged = config.group_count * BLOCK_WIDTH;
        let merge = b.add(
            "merge.weight",
            &[config.c_low, merged, 1, 1],
            Init::KaimingUniform { fan_in: merged },
        )?;
        Ok(CsqModule {
            config,
            align,
            dilated,
            merge,
        })
    }

    /// 1x1 conv `C_h -> C_l`, then bilinear resize to `(H_l, W_l)`.
    pub fn align<F: Scalar>(&self, g: &mut Graph<'_, F>, low: Var, high: Var) -> Result<Var> {
        let (_, hl, wl) = g.value(low).dims3()?;
        let ch = g.value(high).dims3()?.0;
        if ch != self.config.c_high {
            return Err(shape_err!(
                "CSQ deep input has {ch} channels, expected {}",
                self.config.c_high
            ));
        }
        let w = g.param(self.align);
        let h = g.conv2d(high, w, ConvSpec::default())?;
        g.bilinear_resize(h, hl, wl)
    }

    /// Stacks `[mean(low group i), mean(high group i), query]` per group.
    pub fn group_and_query<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        low: Var,
        high_aligned: Var,
        query: Var,
    ) -> Result<Vec<Var>> {
        let (cl, hl, wl) = g.value(low).dims3()?;
        if cl != self.config.c_low || g.shape(high_aligned) != g.shape(low) {
            return Err(shape_err!(
                "CSQ inputs must both be [{}, {hl}, {wl}], got {:?} and {:?}",
                self.config.c_low,
                g.shape(low),
                g.shape(high_aligned)
            ));
        }
        if g.shape(query) != [1, hl, wl] {
            return Err(shape_err!(
                "query token must be [1, {hl}, {wl}], got {:?}",
                g.shape(query)
            ));
        }
        let per = cl / self.config.group_count;
        (0..self.config.group_count)
            .map(|i| {
                let l = g.narrow_channels(low, i * per, per)?;
                let l = g.mean_channels(l)?;
                let h = g.narrow_channels(high_aligned, i * per, per)?;
                let h = g.mean_channels(h)?;
                g.concat_channels(&[l, h, query])
            })
            .collect()
    }

    /// Group `i`'s block through its own dilated conv; no mixing across groups.
    pub fn dilate<F: Scalar>(&self, g: &mut Graph<'_, F>, blocks: &[Var]) -> Result<Vec<Var>> {
        if blocks.len() != self.config.group_count {
            return Err(shape_err!(
                "{} blocks for {} groups",
                blocks.len(),
                self.config.group_count
            ));
        }
        blocks
            .iter()
            .zip(&self.dilated)
            .zip(&self.config.dilations)
            .map(|((&blk, &w), &d)| {
                let w = g.param(w);
                g.conv2d(blk, w, ConvSpec::dilated_same(d))
            })
            .collect()
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        low: Var,
        high: Var,
        query: Var,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, low, high, query)?.output)
    }

    pub fn forward_traced<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        low: Var,
        high: Var,
        query: Var,
    ) -> Result<CsqTrace> {
        let cl = g.value(low).dims3()?.0;
        if cl != self.config.c_low {
            return Err(shape_err!(
                "CSQ shallow input has {cl} channels, expected {}",
                self.config.c_low
            ));
        }
        let aligned = self.align(g, low, high)?;
        let blocks = self.group_and_query(g, low, aligned, query)?;
        let etas = self.dilate(g, &blocks)?;
        let cat = g.concat_channels(&etas)?;
        let w = g.param(self.merge);
        let output = g.conv2d(cat, w, ConvSpec::default())?;
        Ok(CsqTrace {
            aligned,
            blocks,
            etas,
            output,
        })
    }
}
