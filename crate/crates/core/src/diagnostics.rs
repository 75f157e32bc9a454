//! Named finite-difference gradient checks over the ops and modules, shared
//! by the test suites and the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    grad_check, random_projection, ConvSpec, GradCheckConfig, GradCheckReport, Graph, ParamBuilder,
    Params, Var,
};
use crate::csq::{CsqConfig, CsqModule};
use crate::encoder::{EncoderBackend, EncoderConfig, QueryEncoder};
use crate::error::{PcqError, Result};
use crate::mlcnn::{Mlcnn, MlcnnConfig};
use crate::network::{PcqConfig, PcqNetwork};
use crate::pdc::{PdcBlock, PdcConfig};
use crate::tensor::Tensor;

pub const CASES: [&str; 12] = [
    "conv2d",
    "conv2d_dilated7",
    "conv2d_depthwise",
    "bilinear_up",
    "bilinear_down",
    "adaptive_avg_pool",
    "global_avg_pool",
    "pdc",
    "mlcnn_two_layer",
    "csq",
    "query_tokens",
    "pcq_miniature",
];

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check(
    params: &Params<f64>,
    shapes: &[&[usize]],
    seed: u64,
    cfg: GradCheckConfig,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let inputs: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| random(s, seed.wrapping_mul(1009).wrapping_add(i as u64)))
        .collect();
    grad_check(
        params,
        &inputs,
        |g, v| {
            let out = f(g, v)?;
            random_projection(g, out, seed)
        },
        cfg,
    )
}

/// Runs one named case. Parameters are initialised from `seed`, inputs are
/// uniform in `[-1, 1)`.
pub fn run_case(name: &str, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let none = Params::<f64>::default();
    match name {
        "conv2d" => check(&none, &[&[3, 9, 8], &[4, 3, 3, 3]], seed, cfg, |g, v| {
            g.conv2d(v[0], v[1], ConvSpec::padded(1))
        }),
        "conv2d_dilated7" => check(&none, &[&[3, 16, 16], &[3, 3, 3, 3]], seed, cfg, |g, v| {
            g.conv2d(v[0], v[1], ConvSpec::dilated_same(7))
        }),
        "conv2d_depthwise" => check(&none, &[&[4, 7, 6], &[4, 1, 3, 3]], seed, cfg, |g, v| {
            g.depthwise_conv3x3(v[0], v[1], 1)
        }),
        "bilinear_up" => check(&none, &[&[2, 3, 4]], seed, cfg, |g, v| {
            g.bilinear_resize(v[0], 7, 9)
        }),
        "bilinear_down" => check(&none, &[&[2, 8, 7]], seed, cfg, |g, v| {
            g.bilinear_resize(v[0], 3, 5)
        }),
        "adaptive_avg_pool" => check(&none, &[&[2, 7, 5]], seed, cfg, |g, v| {
            g.adaptive_avg_pool(v[0], 3, 2)
        }),
        "global_avg_pool" => check(&none, &[&[3, 4, 5]], seed, cfg, |g, v| {
            g.global_avg_pool(v[0])
        }),
        "pdc" => {
            let mut b = ParamBuilder::new(seed);
            let blk = PdcBlock::new(&mut b, PdcConfig::new(6)?)?;
            let p = b.finish().cast::<f64>();
            check(&p, &[&[6, 8, 8]], seed, cfg, |g, v| blk.forward(g, v[0]))
        }
        "mlcnn_two_layer" => {
            let mut b = ParamBuilder::new(seed);
            let cfg_m = MlcnnConfig {
                channel_plan: vec![16, 32],
                use_pdc: true,
            };
            let m = Mlcnn::new(&mut b, cfg_m)?;
            let p = b.finish().cast::<f64>();
            check(&p, &[&[1, 20, 16]], seed, cfg, |g, v| {
                Ok(m.forward(g, v[0])?.last())
            })
        }
        "csq" => {
            let mut b = ParamBuilder::new(seed);
            let m = CsqModule::new(&mut b, CsqConfig::new(8, 12))?;
            let p = b.finish().cast::<f64>();
            check(
                &p,
                &[&[8, 12, 10], &[12, 6, 5], &[1, 12, 10]],
                seed,
                cfg,
                |g, v| m.forward(g, v[0], v[1], v[2]),
            )
        }
        "query_tokens" => {
            let mut b = ParamBuilder::new(seed);
            let enc = QueryEncoder::new(
                &mut b,
                EncoderConfig {
                    backend: EncoderBackend::Precomputed,
                    precomputed_dim: 8,
                    ..EncoderConfig::default()
                },
                10,
            )?;
            let p = b.finish().cast::<f64>();
            check(&p, &[&[20, 8]], seed, cfg, |g, v| {
                let q = enc.make_query_tokens(g, v[0], &[(12, 10), (6, 5), (3, 2)])?;
                let flat = q
                    .tokens
                    .iter()
                    .map(|&t| {
                        let n = g.value(t).len();
                        g.reshape(t, &[n, 1, 1])
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat_channels(&flat)
            })
        }
        "pcq_miniature" => {
            let (net, p) = PcqNetwork::new(PcqConfig {
                seed,
                ..PcqConfig::miniature()
            })?;
            let p = p.cast::<f64>();
            check(&p, &[&[1, 40, 32], &[1, 48_000]], seed, cfg, |g, v| {
                Ok(net.forward::<f64, ChaCha8Rng>(g, v[0], v[1], None)?.logits)
            })
        }
        other => Err(PcqError::Config(format!(
            "unknown gradient-check case {other:?}"
        ))),
    }
}
