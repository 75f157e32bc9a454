use std::path::Path;

use pcq_core::autodiff::{GradCheckConfig, ParamBuilder};
use pcq_core::diagnostics::{run_case, CASES};
use pcq_core::dsp::batch_features;
use pcq_core::harness::{
    evaluate, export_fusion_features, fit, load_dataset, load_model, run_cv, save_model,
    synth_corpus, write_predictions, Dataset, FeatureOptions, LabelTaxonomy, ModelMeta, RunConfig,
    MANIFEST_FILE,
};
use pcq_core::manifest::{make_folds, Manifest};
use pcq_core::network::{PcqConfig, PcqNetwork};
use pcq_core::pdc::{conv3x3_param_count, pdc_formula, PdcBlock, PdcConfig};
use pcq_core::{PcqError, Result};
use serde_json::json;

use crate::{Block, Command, Model};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            out,
            per_class,
            taxonomy,
            seed,
            folds,
        } => {
            let tax = LabelTaxonomy::by_name(&taxonomy)?;
            let m = synth_corpus(&out, per_class, &tax, seed, folds)?;
            println!(
                "{} clips -> {}",
                m.rows.len(),
                out.join(MANIFEST_FILE).display()
            );
            Ok(())
        }
        Command::Features {
            manifest,
            out,
            log1p,
        } => {
            let m = Manifest::read(&manifest)?;
            let index = batch_features(&m, &out, log1p)?;
            for e in &index.errors {
                eprintln!("skipped {}: {}", e.clip_id, e.error);
            }
            println!(
                "{} segments cached in {}, {} clips failed",
                index.entries.len(),
                out.display(),
                index.errors.len()
            );
            Ok(())
        }
        Command::MakeFolds {
            manifest,
            out,
            folds,
            by,
            seed,
        } => {
            let mut m = Manifest::read(&manifest)?;
            make_folds(&mut m, folds, by.into(), seed)?;
            let out = out.unwrap_or(manifest);
            m.write(&out)?;
            for (f, n) in m.fold_sizes() {
                println!("fold {f}: {n} clips");
            }
            Ok(())
        }
        Command::Train {
            manifest,
            out,
            holdout_fold,
            report,
            overrides,
        } => train(
            &manifest,
            &out,
            holdout_fold,
            report.as_deref(),
            &overrides.resolve()?,
        ),
        Command::Eval {
            ckpt,
            manifest,
            out,
            cache_dir,
            emb_dir,
        } => {
            let (net, params, meta) = load_model(&ckpt)?;
            let data = checkpoint_dataset(&manifest, &meta, cache_dir, emb_dir)?;
            let n = write_predictions(&net, &params, &data, &out)?;
            let (wa, ua) = evaluate(&net, &params, &data.all())?.wa_ua()?;
            println!("{n} clips  WA {wa:.4}  UA {ua:.4} -> {}", out.display());
            Ok(())
        }
        Command::Cv {
            manifest,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let data = dataset(&manifest, &cfg)?;
            let summary = run_cv(&data, &cfg.model, &cfg.train)?;
            write(&out, &summary.to_json()?)?;
            print!("{}", summary.text_table());
            Ok(())
        }
        Command::Params {
            block,
            channels,
            model,
            overrides,
        } => match (block, model) {
            (Some(Block::Pdc), _) => pdc_table(&channels),
            (None, Some(Model::Mlcnn)) => mlcnn_table(&overrides.resolve()?.model),
            (None, _) => pcq_table(&overrides.resolve()?.model),
        },
        Command::Gradcheck {
            cases,
            seeds,
            epsilon,
            tol,
        } => gradcheck(&cases, seeds, epsilon, tol),
        Command::ExportFeatures {
            ckpt,
            manifest,
            out,
            cache_dir,
            emb_dir,
        } => {
            let (net, params, meta) = load_model(&ckpt)?;
            let data = checkpoint_dataset(&manifest, &meta, cache_dir, emb_dir)?;
            let n = export_fusion_features(&net, &params, &data, &out)?;
            println!(
                "{n} clips x {} features -> {}",
                net.config.fusion_width(),
                out.display()
            );
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| PcqError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn dataset(manifest: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let m = Manifest::read(manifest)?;
    load_dataset(&m, &cfg.taxonomy()?, &cfg.model, &cfg.features)
}

fn checkpoint_dataset(
    manifest: &Path,
    meta: &ModelMeta,
    cache_dir: Option<std::path::PathBuf>,
    emb_dir: Option<std::path::PathBuf>,
) -> Result<Dataset> {
    let m = Manifest::read(manifest)?;
    let opts = FeatureOptions {
        log1p: meta.log1p,
        cache_dir,
        emb_dir,
    };
    load_dataset(&m, &meta.taxonomy, &meta.model, &opts)
}

fn train(
    manifest: &Path,
    out: &Path,
    holdout: Option<u8>,
    report: Option<&Path>,
    cfg: &RunConfig,
) -> Result<()> {
    let data = dataset(manifest, cfg)?;
    let (train, val) = match holdout {
        Some(f) => {
            let val = data.fold(f);
            if val.is_empty() {
                return Err(PcqError::Config(format!("fold {f} is empty")));
            }
            (data.excluding_fold(f), Some(val))
        }
        None => (data.all(), None),
    };
    if train.is_empty() {
        return Err(PcqError::Config("no training clips".into()));
    }
    let (net, params) = PcqNetwork::new(cfg.model.clone())?;
    let outcome = fit(
        &net,
        params,
        &train,
        val.as_deref(),
        &cfg.train,
        cfg.train.seed,
        |e| match (e.val_wa, e.val_ua) {
            (Some(wa), Some(ua)) => eprintln!(
                "epoch {:>3}  loss {:.4}  val WA {wa:.4}  UA {ua:.4}",
                e.epoch, e.train_loss
            ),
            _ => eprintln!("epoch {:>3}  loss {:.4}", e.epoch, e.train_loss),
        },
    )?;
    let meta = ModelMeta {
        model: cfg.model.clone(),
        taxonomy: cfg.taxonomy()?,
        log1p: cfg.features.log1p,
    };
    save_model(out, &meta, &outcome.params)?;
    if let Some(path) = report {
        let doc = json!({
            "holdout_fold": holdout,
            "train_clips": train.len(),
            "best_epoch": outcome.best_epoch,
            "stop_reason": outcome.stop_reason,
            "epochs": outcome.epochs,
            "model": cfg.model,
            "train": cfg.train,
        });
        write(path, &serde_json::to_string_pretty(&doc)?)?;
    }
    println!(
        "trained on {} clips, kept epoch {} ({:?}) -> {}",
        train.len(),
        outcome.best_epoch,
        outcome.stop_reason,
        out.display()
    );
    Ok(())
}

fn pdc_table(channels: &[usize]) -> Result<()> {
    if channels.is_empty() {
        return Err(PcqError::Config(
            "--channels is required with --block".into(),
        ));
    }
    println!(
        "{:>6} {:>12} {:>14} {:>10}",
        "C", "constructed", "(16/3)C^2+18C", "9C^2"
    );
    for &c in channels {
        let mut b = ParamBuilder::new(0);
        PdcBlock::new(&mut b, PdcConfig::new(c)?)?;
        println!(
            "{c:>6} {:>12} {:>14.2} {:>10}",
            b.finish().numel(),
            pdc_formula(c),
            conv3x3_param_count(c)
        );
    }
    Ok(())
}

fn mlcnn_table(model: &PcqConfig) -> Result<()> {
    let cfg = model.mlcnn();
    cfg.validate()?;
    let body = if cfg.use_pdc { "pdc" } else { "conv3x3" };
    println!(
        "{:>6} {:>6} {:>12} {:>10}",
        "layer", "C", "transition", body
    );
    for (i, ((t, b), c)) in cfg
        .layer_breakdown()
        .into_iter()
        .zip(&cfg.channel_plan)
        .enumerate()
    {
        println!("{:>6} {c:>6} {t:>12} {b:>10}", i + 1);
    }
    println!("total {}", cfg.param_count());
    Ok(())
}

fn pcq_table(model: &PcqConfig) -> Result<()> {
    let (_, params) = PcqNetwork::new(model.clone())?;
    let b = PcqNetwork::param_breakdown(&params);
    for (name, n) in [
        ("mlcnn", b.mlcnn),
        ("encoder", b.encoder),
        ("csq", b.csq),
        ("classifier", b.classifier),
        ("total", b.total),
    ] {
        println!("{name:<12}{n:>10}");
    }
    println!("{:<12}{:>10}", "fusion", model.fusion_width());
    Ok(())
}

fn gradcheck(cases: &[String], seeds: u64, epsilon: f64, tol: f64) -> Result<()> {
    let names: Vec<&str> = if cases.is_empty() {
        CASES.to_vec()
    } else {
        cases.iter().map(String::as_str).collect()
    };
    let cfg = GradCheckConfig {
        epsilon,
        tol,
        ..GradCheckConfig::default()
    };
    let mut failed = Vec::new();
    for name in names {
        for seed in 0..seeds {
            let r = run_case(name, seed, cfg)?;
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "{name:<20} seed {seed}  max rel err {:.3e}  coords {}  frozen {}  {status}",
                r.max_rel_err(),
                r.checked(),
                r.frozen()
            );
            if !r.passed() {
                failed.push(format!("{name}/{seed}"));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(PcqError::CheckFailed(failed.join(", ")))
    }
}
