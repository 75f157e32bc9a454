//! Differentiable tensor ops, parameters, AdamW, and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, random_projection, GradCheckConfig, GradCheckReport};
pub use graph::{softmax, ActivationPattern, Gradients, Graph, Var};
pub use kernels::ConvSpec;
pub use optim::{AdamW, AdamWConfig, GradAccumulator};
pub use params::{Init, ParamBuilder, ParamId, Parameter, Params};

use crate::error::{shape_err, Result};
use crate::tensor::Scalar;

impl<F: Scalar> Graph<'_, F> {
    /// Depthwise 3x3 convolution (`groups == C`), padded to keep `H x W`.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let c = self.value(x).dims3()?.0;
        if self.shape(w) != [c, 1, 3, 3] {
            return Err(shape_err!(
                "depthwise weight must be [{c}, 1, 3, 3], got {:?}",
                self.shape(w)
            ));
        }
        let spec = ConvSpec {
            padding: (dilation, dilation),
            dilation: (dilation, dilation),
            groups: c,
            ..ConvSpec::default()
        };
        self.conv2d(x, w, spec)
    }

    /// 1-D convolution over `[C, L]` inputs, expressed as a height-1 conv2d.
    /// `w` is `[C_out, C_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (c, l) = match self.shape(x) {
            &[c, l] => (c, l),
            s => return Err(shape_err!("conv1d input must be [C, L], got {:?}", s)),
        };
        let (co, ci, k) = match self.shape(w) {
            &[a, b, k] => (a, b, k),
            s => return Err(shape_err!("conv1d weight must be rank 3, got {:?}", s)),
        };
        let x4 = self.reshape(x, &[c, 1, l])?;
        let w4 = self.reshape(w, &[co, ci, 1, k])?;
        let spec = ConvSpec {
            stride: (1, stride),
            ..ConvSpec::default()
        };
        let y = self.conv2d(x4, w4, spec)?;
        let lo = self.shape(y)[2];
        self.reshape(y, &[co, lo])
    }
}
