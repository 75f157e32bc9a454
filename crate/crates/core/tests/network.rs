//! End-to-end shape, parameter-count and structural checks of the network.

use pcq_core::autodiff::{Graph, Params};
use pcq_core::csq::CsqConfig;
use pcq_core::dsp::{read_wav, segment_clip, spectrogram, write_wav_pcm16};
use pcq_core::encoder::{EncoderBackend, EncoderConfig};
use pcq_core::mlcnn::MlcnnConfig;
use pcq_core::network::{FusionQuery, PcqConfig, PcqNetwork, PcqTrace};
use pcq_core::pdc::pdc_param_count;
use pcq_core::{PcqError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn run<'p>(
    net: &PcqNetwork,
    g: &mut Graph<'p, f32>,
    spec: &Tensor<f32>,
    speech: &Tensor<f32>,
) -> PcqTrace {
    let (s, a) = net.inputs(g, spec, speech).unwrap();
    net.forward::<f32, ChaCha8Rng>(g, s, a, None).unwrap()
}

fn shape3(g: &Graph<'_, f32>, v: pcq_core::autodiff::Var) -> (usize, usize, usize) {
    g.value(v).dims3().unwrap()
}

#[test]
fn default_pipeline_from_wav() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let samples: Vec<f32> = (0..48_000)
        .map(|i| 0.3 * (std::f32::consts::TAU * 440.0 * i as f32 / 16_000.0).sin())
        .collect();
    write_wav_pcm16(&path, &samples).unwrap();
    let clip = read_wav(&path, "tone").unwrap();
    let segs = segment_clip(&clip).unwrap();
    assert_eq!(segs.len(), 1);
    let spec = spectrogram(&segs[0]).unwrap();
    assert_eq!(spec.values.shape(), &[300, 200]);

    let (net, params) = PcqNetwork::new(PcqConfig::default()).unwrap();
    let mut g = Graph::new(&params);
    let audio = Tensor::new(&[1, 48_000], segs[0].samples.clone()).unwrap();
    let tr = run(&net, &mut g, &spec.to_input(), &audio);

    let xs: Vec<_> = tr.layers.xs.iter().map(|&v| shape3(&g, v)).collect();
    assert_eq!(
        xs,
        vec![(16, 150, 100), (32, 75, 50), (48, 37, 25), (64, 18, 12)]
    );
    assert_eq!(g.shape(tr.frames), &[150, 64]);
    let qs: Vec<_> = tr.queries.tokens.iter().map(|&v| shape3(&g, v)).collect();
    assert_eq!(qs, vec![(1, 150, 100), (1, 75, 50), (1, 37, 25)]);
    let zs: Vec<_> = tr.zs.iter().map(|&v| shape3(&g, v)).collect();
    assert_eq!(zs, vec![(16, 150, 100), (32, 75, 50), (48, 37, 25)]);
    assert_eq!(shape3(&g, tr.q4), (64, 18, 12));
    assert_eq!(g.shape(tr.fusion), &[224]);
    assert_eq!(g.shape(tr.logits), &[4]);
    assert!(g.value(tr.logits).all_finite());
}

#[test]
fn ablation_fusion_widths_and_logits() {
    for (use_pdc, use_csq, fusion_q, width) in [
        (true, true, FusionQuery::Q4, 224),
        (false, true, FusionQuery::Q4, 224),
        (true, false, FusionQuery::Q4, 128),
        (false, false, FusionQuery::Q4, 128),
        (true, true, FusionQuery::Q1, 161),
    ] {
        let cfg = PcqConfig {
            use_pdc,
            use_csq,
            fusion_q,
            num_classes: 7,
            ..PcqConfig::default()
        };
        assert_eq!(cfg.fusion_width(), width);
        let (net, params) = PcqNetwork::new(cfg).unwrap();
        let mut g = Graph::new(&params);
        let tr = run(
            &net,
            &mut g,
            &random(&[1, 300, 200], 1),
            &random(&[1, 48_000], 2),
        );
        assert_eq!(g.shape(tr.fusion), &[width]);
        assert_eq!(g.shape(tr.logits), &[7]);
        assert_eq!(tr.zs.is_empty(), !use_csq);
    }
}

/// Parameter counts derived from the layer definitions, independent of the
/// parameter store.
fn expected_counts(cfg: &PcqConfig) -> (usize, usize, usize) {
    let mut prev = 1;
    let mut mlcnn = 0;
    for &c in &cfg.channel_plan {
        mlcnn += 9 * prev * c
            + if cfg.use_pdc {
                pdc_param_count(c)
            } else {
                9 * c * c
            };
        prev = c;
    }
    let csq = if cfg.use_csq {
        cfg.channel_plan
            .windows(2)
            .map(|w| w[0] * w[1] + 4 * 81 + w[0] * 12)
            .sum()
    } else {
        0
    };
    let fw = cfg.fusion_width();
    let classifier = fw * 128 + 128 + 128 * cfg.num_classes + cfg.num_classes;
    (mlcnn, csq, classifier)
}

#[test]
fn parameter_breakdown_matches_arithmetic() {
    for (use_pdc, use_csq) in [(true, true), (false, true), (true, false), (false, false)] {
        let cfg = PcqConfig {
            use_pdc,
            use_csq,
            ..PcqConfig::default()
        };
        let (_, params) = PcqNetwork::new(cfg.clone()).unwrap();
        let b = PcqNetwork::param_breakdown(&params);
        let (mlcnn, csq, classifier) = expected_counts(&cfg);
        assert_eq!(b.mlcnn, mlcnn);
        assert_eq!(b.csq, csq);
        assert_eq!(b.classifier, classifier);
        assert_eq!(b.total, b.mlcnn + b.encoder + b.csq + b.classifier);
        assert!(b.encoder < 1_000_000);
    }
    let with = MlcnnConfig::default().param_count();
    let without = MlcnnConfig {
        use_pdc: false,
        ..MlcnnConfig::default()
    }
    .param_count();
    assert!(without > with);
    assert_eq!(
        without - with,
        [16usize, 32, 48, 64]
            .iter()
            .map(|&c| 9 * c * c - pdc_param_count(c))
            .sum::<usize>()
    );
    assert_eq!(
        CsqConfig::new(16, 32).param_count(),
        16 * 32 + 324 + 16 * 12
    );
}

#[test]
fn frozen_forward_is_pure() {
    let (net, params) = PcqNetwork::new(PcqConfig::miniature()).unwrap();
    let spec = random(&[1, 40, 32], 3);
    let audio = random(&[1, 48_000], 4);
    let mut a = Graph::new(&params);
    let ta = run(&net, &mut a, &spec, &audio);
    let mut b = Graph::new(&params);
    let tb = run(&net, &mut b, &spec, &audio);
    let bits = |g: &Graph<'_, f32>, v| {
        g.value(v)
            .data()
            .iter()
            .map(|x: &f32| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a, ta.logits), bits(&b, tb.logits));
}

/// Adaptive average pool with floor/ceil bin edges, written out directly.
fn naive_adaptive(x: &Tensor<f32>, oh: usize, ow: usize) -> Vec<f32> {
    let (_, h, w) = x.dims3().unwrap();
    let mut out = Vec::new();
    for i in 0..oh {
        let (y0, y1) = (i * h / oh, ((i + 1) * h).div_ceil(oh));
        for j in 0..ow {
            let (x0, x1) = (j * w / ow, ((j + 1) * w).div_ceil(ow));
            let mut s = 0.0f64;
            for y in y0..y1 {
                for xx in x0..x1 {
                    s += x.at(&[0, y, xx]) as f64;
                }
            }
            out.push((s / ((y1 - y0) * (x1 - x0)) as f64) as f32);
        }
    }
    out
}

#[test]
fn q4_is_last_layer_times_pooled_q1() {
    let (net, params) = PcqNetwork::new(PcqConfig::default()).unwrap();
    let mut g = Graph::new(&params);
    let tr = run(
        &net,
        &mut g,
        &random(&[1, 300, 200], 5),
        &random(&[1, 48_000], 6),
    );
    let x4 = g.value(tr.layers.last()).clone();
    let q1 = g.value(tr.queries.tokens[0]).clone();
    let pooled = naive_adaptive(&q1, 18, 12);
    let q4 = g.value(tr.q4);
    for c in 0..64 {
        for k in 0..18 * 12 {
            let want = x4.data()[c * 216 + k] * pooled[k];
            let got = q4.data()[c * 216 + k];
            assert!(
                (want - got).abs() <= 1e-5 * (1.0 + want.abs()),
                "c {c} k {k}"
            );
        }
    }
}

#[test]
fn zero_query_zeroes_q4() {
    let cfg = PcqConfig {
        encoder: EncoderConfig {
            backend: EncoderBackend::Precomputed,
            ..EncoderConfig::default()
        },
        ..PcqConfig::miniature()
    };
    let (net, params) = PcqNetwork::new(cfg).unwrap();
    let mut g = Graph::new(&params);
    // zero embeddings and zero-initialised projection bias give Q1 == 0
    let tr = run(
        &net,
        &mut g,
        &random(&[1, 40, 32], 7),
        &Tensor::zeros(&[150, 768]),
    );
    assert!(g
        .value(tr.queries.tokens[0])
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(g.value(tr.q4).data().iter().all(|&v| v == 0.0));
    assert!(g.value(tr.layers.last()).data().iter().any(|&v| v != 0.0));
}

#[test]
fn precomputed_width_mismatch_is_shape_error() {
    let cfg = PcqConfig {
        encoder: EncoderConfig {
            backend: EncoderBackend::Precomputed,
            ..EncoderConfig::default()
        },
        ..PcqConfig::miniature()
    };
    let (net, params) = PcqNetwork::new(cfg).unwrap();
    let mut g = Graph::new(&params);
    let (s, a) = net
        .inputs(
            &mut g,
            &random(&[1, 40, 32], 1),
            &Tensor::zeros(&[150, 512]),
        )
        .unwrap();
    let err = net.forward::<f32, ChaCha8Rng>(&mut g, s, a, None);
    assert!(matches!(err, Err(PcqError::Shape(_))));
}

#[test]
fn spectrogram_smaller_than_grid_is_rejected() {
    let (net, params) = PcqNetwork::new(PcqConfig::default()).unwrap();
    let mut g = Graph::new(&params);
    let (s, a) = net
        .inputs(&mut g, &random(&[1, 40, 32], 1), &random(&[1, 48_000], 2))
        .unwrap();
    assert!(net.forward::<f32, ChaCha8Rng>(&mut g, s, a, None).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    // Default widths: the miniature's 2-unit squeeze layers can start dead.
    for seed in 0..3 {
        let (net, params) = PcqNetwork::new(PcqConfig {
            seed,
            ..PcqConfig::default()
        })
        .unwrap();
        let mut g = Graph::new(&params);
        let tr = run(
            &net,
            &mut g,
            &random(&[1, 300, 200], seed),
            &random(&[1, 48_000], seed + 10),
        );
        let loss = g.softmax_cross_entropy(tr.logits, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, p) in params.iter() {
            let gr = grads
                .param(id)
                .unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(
                gr.data().iter().any(|&v| v != 0.0),
                "seed {seed}: {} all zero",
                p.name
            );
        }
    }
}

#[test]
fn parameter_names_are_stable() {
    let names = |p: &Params<f32>| p.iter().map(|(_, x)| x.name.clone()).collect::<Vec<_>>();
    let (_, a) = PcqNetwork::new(PcqConfig::default()).unwrap();
    let (_, b) = PcqNetwork::new(PcqConfig::default()).unwrap();
    assert_eq!(names(&a), names(&b));
    assert!(names(&a).contains(&"mlcnn.layer2.pdc.pw1.weight".to_string()));
    assert!(names(&a).contains(&"csq3.merge.weight".to_string()));
}
