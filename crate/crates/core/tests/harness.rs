//! Training-loop, cross-validation, corpus and export behaviour.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pcq_core::dsp::batch_features;
use pcq_core::encoder::{EmbeddingStore, EncoderBackend, EncoderConfig};
use pcq_core::harness::train::segment_examples;
use pcq_core::harness::{
    batch_loss, compute_wa_ua, export_fusion_features, fit, load_dataset, load_model, run_fold,
    save_model, synth_corpus, train_step, Dataset, FeatureOptions, LabelTaxonomy, ModelMeta,
    RunConfig, StopReason, TrainConfig,
};
use pcq_core::manifest::Manifest;
use pcq_core::network::{PcqConfig, PcqNetwork};
use pcq_core::PcqError;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn two_class() -> LabelTaxonomy {
    LabelTaxonomy::custom("pair", vec!["low".into(), "high".into()]).unwrap()
}

fn mini(k: usize) -> PcqConfig {
    PcqConfig {
        num_classes: k,
        ..PcqConfig::miniature()
    }
}

fn corpus(dir: &Path, n: usize, tax: &LabelTaxonomy, seed: u64) -> Manifest {
    synth_corpus(dir, n, tax, seed, 10).unwrap()
}

fn dataset(m: &Manifest, tax: &LabelTaxonomy, model: &PcqConfig) -> Dataset {
    load_dataset(m, tax, model, &FeatureOptions::default()).unwrap()
}

// ---- metrics ----

proptest! {
    #[test]
    fn ua_invariant_to_duplicating_a_class(
        rows in prop::collection::vec(prop::collection::vec(0u64..20, 3), 3),
        class in 0usize..3,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().sum::<u64>() > 0));
        let (wa, ua) = compute_wa_ua(&rows).unwrap();
        let mut dup = rows.clone();
        dup[class].iter_mut().for_each(|v| *v *= 2);
        let (wa2, ua2) = compute_wa_ua(&dup).unwrap();
        prop_assert!((ua - ua2).abs() < 1e-12);
        // WA moves unless the duplicated class's recall equals the old WA
        let recall = rows[class][class] as f64 / rows[class].iter().sum::<u64>() as f64;
        if (recall - wa).abs() > 1e-12 {
            prop_assert!((wa - wa2).abs() > 1e-15);
        }
    }

    #[test]
    fn balanced_sets_have_wa_equal_ua(
        support in 1u64..30,
        hits in prop::collection::vec(0u64..30, 4),
    ) {
        let rows: Vec<Vec<u64>> = hits
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let h = h.min(support);
                let mut r = vec![0; 4];
                r[i] = h;
                r[(i + 1) % 4] = support - h;
                r
            })
            .collect();
        let (wa, ua) = compute_wa_ua(&rows).unwrap();
        prop_assert!((wa - ua).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&wa));
    }
}

// ---- corpus ----

#[test]
fn synthetic_corpus_layout() {
    let tax = LabelTaxonomy::iemocap4();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = corpus(a.path(), 10, &tax, 1);
    let mb = corpus(b.path(), 10, &tax, 2);
    assert_eq!(ma.rows.len(), 40);
    assert_eq!(fs::read_dir(a.path().join("wav")).unwrap().count(), 40);
    assert!(ma.fold_sizes().values().all(|&n| n == 4));
    for (x, y) in ma.rows.iter().zip(&mb.rows) {
        assert_eq!(
            (&x.clip_id, &x.label, x.fold),
            (&y.clip_id, &y.label, y.fold)
        );
    }
    let wav = |d: &Path| fs::read(d.join(&ma.rows[0].path)).unwrap();
    assert_ne!(wav(a.path()), wav(b.path()));
    let reread = Manifest::read(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(reread.rows, ma.rows);
}

#[test]
fn synthetic_corpus_needs_enough_clips() {
    let dir = tempfile::tempdir().unwrap();
    let err = synth_corpus(dir.path(), 5, &LabelTaxonomy::iemocap4(), 0, 10);
    assert!(matches!(err, Err(PcqError::Config(_))));
}

// ---- features ----

fn digest_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, Sha256::digest(fs::read(&p).unwrap()).to_vec())
        })
        .collect()
}

#[test]
fn feature_cache_is_idempotent_and_loadable() {
    let tax = two_class();
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &tax, 3);
    let cache = dir.path().join("cache");
    let first = batch_features(&m, &cache, false).unwrap();
    let d1 = digest_dir(&cache);
    let second = batch_features(&m, &cache, false).unwrap();
    assert_eq!(first, second);
    assert_eq!(d1, digest_dir(&cache));
    assert!(first.errors.is_empty());

    let model = mini(2);
    let from_wav = dataset(&m, &tax, &model);
    let opts = FeatureOptions {
        cache_dir: Some(cache.clone()),
        ..FeatureOptions::default()
    };
    let from_cache = load_dataset(&m, &tax, &model, &opts).unwrap();
    for (a, b) in from_wav.clips.iter().zip(&from_cache.clips) {
        assert_eq!(a.segments.len(), b.segments.len());
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert_eq!(x.spec, y.spec);
        }
    }
    let mismatch = FeatureOptions {
        cache_dir: Some(cache),
        log1p: true,
        ..FeatureOptions::default()
    };
    assert!(matches!(
        load_dataset(&m, &tax, &model, &mismatch),
        Err(PcqError::Config(_))
    ));
}

#[test]
fn precomputed_embeddings_feed_the_model() {
    let tax = two_class();
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &tax, 4);
    let model = PcqConfig {
        encoder: EncoderConfig {
            backend: EncoderBackend::Precomputed,
            precomputed_dim: 32,
            ..EncoderConfig::default()
        },
        ..mini(2)
    };
    let emb = dir.path().join("emb");
    fs::create_dir_all(&emb).unwrap();
    let opts = FeatureOptions {
        emb_dir: Some(emb.clone()),
        ..FeatureOptions::default()
    };
    assert!(matches!(
        load_dataset(&m, &tax, &model, &opts),
        Err(PcqError::MissingEmbedding(_))
    ));
    let plain = dataset(&m, &tax, &mini(2));
    let store = EmbeddingStore::new(&emb);
    for c in &plain.clips {
        for i in 0..c.segments.len() {
            let frames = pcq_core::Tensor::full(&[150, 32], 0.01 * i as f32);
            store.save(&c.clip_id, i, &frames).unwrap();
        }
    }
    let data = load_dataset(&m, &tax, &model, &opts).unwrap();
    let (net, params) = PcqNetwork::new(model).unwrap();
    let conf = pcq_core::harness::evaluate(&net, &params, &data.all()).unwrap();
    assert_eq!(conf.total(), 20);
}

// ---- training ----

#[test]
fn single_step_lowers_batch_loss() {
    let tax = two_class();
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &tax, 5);
    let data = dataset(&m, &tax, &mini(2));
    let clips = data.all();
    let examples = segment_examples(&clips[..8]);
    for seed in 0..5 {
        let (net, mut params) = PcqNetwork::new(PcqConfig { seed, ..mini(2) }).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = pcq_core::autodiff::AdamW::new(&params, cfg.optimizer());
        let before = batch_loss(&net, &params, &examples).unwrap();
        train_step(&net, &mut params, &mut opt, &examples, None).unwrap();
        let after = batch_loss(&net, &params, &examples).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn run_fold_partition_and_determinism() {
    let tax = two_class();
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &tax, 6);
    assert_eq!(m.rows.len(), 20);
    let data = dataset(&m, &tax, &mini(2));
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    for fold in 0..10 {
        let held = data.fold(fold);
        assert_eq!(held.len(), 2);
        seen.extend(held.iter().map(|c| c.clip_id.clone()));
    }
    seen.sort();
    let mut all: Vec<_> = m.rows.iter().map(|r| r.clip_id.clone()).collect();
    all.sort();
    assert_eq!(seen, all);

    let a = run_fold(3, &data, &mini(2), &cfg).unwrap().report;
    let b = run_fold(3, &data, &mini(2), &cfg).unwrap().report;
    assert_eq!(a.eval_clips, 2);
    assert_eq!(a.train_clips, 18);
    assert_eq!(a.confusion.total(), 2);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn empty_fold_is_config_error() {
    let tax = two_class();
    let dir = tempfile::tempdir().unwrap();
    let mut m = corpus(dir.path(), 10, &tax, 7);
    m.rows.iter_mut().for_each(|r| r.fold = r.fold.min(4));
    let data = dataset(&m, &tax, &mini(2));
    let err = run_fold(7, &data, &mini(2), &TrainConfig::default());
    assert!(matches!(err, Err(PcqError::Config(_))));
}

#[test]
fn early_stopping_restores_best_epoch() {
    let tax = two_class();
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &tax, 8);
    let data = dataset(&m, &tax, &mini(2));
    let (net, params) = PcqNetwork::new(mini(2)).unwrap();
    let train = data.excluding_fold(0);
    let val = data.fold(0);
    let cfg = TrainConfig {
        lr: 1e-3,
        patience: 3,
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let out = fit(&net, params, &train, Some(&val), &cfg, 1, |_| {}).unwrap();
    let was: Vec<f64> = out.epochs.iter().map(|e| e.val_wa.unwrap()).collect();
    let best = was[out.best_epoch - 1];
    assert!(was.iter().all(|&w| w <= best));
    assert!(was[..out.best_epoch - 1].iter().all(|&w| w < best));
    if out.stop_reason == StopReason::EarlyStop {
        let e = out.epochs.len();
        assert!(out.best_epoch <= e - cfg.patience);
    } else {
        assert_eq!(out.epochs.len(), cfg.max_epochs);
    }
    let conf = pcq_core::harness::evaluate(&net, &out.params, &val).unwrap();
    assert_eq!(conf.wa_ua().unwrap().0, best);
}

// ---- checkpoints and exports ----

#[test]
fn checkpoint_roundtrip_and_fusion_export() {
    let tax = LabelTaxonomy::iemocap4();
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, &tax, 9);
    for use_csq in [true, false] {
        let model = PcqConfig {
            use_csq,
            ..PcqConfig::default()
        };
        let data = dataset(&m, &tax, &model);
        let (net, params) = PcqNetwork::new(model.clone()).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        let meta = ModelMeta {
            model,
            taxonomy: tax.clone(),
            log1p: false,
        };
        save_model(&ckpt, &meta, &params).unwrap();
        let (net2, params2, meta2) = load_model(&ckpt).unwrap();
        assert_eq!(meta2, meta);
        for (a, b) in params.iter().zip(params2.iter()) {
            assert_eq!(a.1.value, b.1.value);
        }
        let out = dir.path().join("fusion.csv");
        assert_eq!(
            export_fusion_features(&net, &params, &data, &out).unwrap(),
            40
        );
        let text = fs::read_to_string(&out).unwrap();
        let again = dir.path().join("fusion2.csv");
        export_fusion_features(&net2, &params2, &data, &again).unwrap();
        assert_eq!(text, fs::read_to_string(&again).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 41);
        let width = if use_csq { 224 } else { 128 };
        for l in &lines {
            assert_eq!(l.split(',').count(), width + 2);
        }
    }
}

#[test]
fn run_config_partial_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(
        &path,
        r#"{"model": {"num_classes": 7}, "train": {"batch_size": 32}, "taxonomy": "emodb7"}"#,
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.train.batch_size, 32);
    assert_eq!(cfg.train.lr, 1e-5);
    assert_eq!(cfg.model.classifier_hidden, 128);
    fs::write(&path, r#"{"taxonomy": "emodb7"}"#).unwrap();
    assert!(matches!(
        RunConfig::load(&path).unwrap().validate(),
        Err(PcqError::Config(_))
    ));
}
