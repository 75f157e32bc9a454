//! Synthetic, class-separable corpus for exercising the pipeline end to end.
//!
//! Class `k` owns a frequency band inside the spectrogram's 0..4 kHz range;
//! its clips are a cluster of tones plus band-limited noise (a dense sum of
//! random-phase sinusoids) confined to that band. Bands are disjoint.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{write_wav_pcm16, SAMPLE_RATE_HZ};
use crate::error::{PcqError, Result};
use crate::manifest::{Manifest, ManifestRow, MAX_FOLDS};

use super::taxonomy::LabelTaxonomy;

pub const MANIFEST_FILE: &str = "manifest.csv";
const LOW_HZ: f64 = 200.0;
const HIGH_HZ: f64 = 3800.0;
const TONES: usize = 3;
const NOISE_PARTIALS: usize = 24;

/// `(lo, hi)` band of class `k` out of `classes`.
pub fn class_band(k: usize, classes: usize) -> (f64, f64) {
    let width = (HIGH_HZ - LOW_HZ) / classes as f64;
    let lo = LOW_HZ + k as f64 * width;
    // keep a guard gap of a fifth of the band on each side
    (lo + 0.2 * width, lo + 0.8 * width)
}

/// One clip of class `k`.
pub fn synth_clip(k: usize, classes: usize, rng: &mut impl Rng) -> Vec<f32> {
    let secs = rng.gen_range(3.0..=6.0);
    let n = (secs * SAMPLE_RATE_HZ as f64) as usize;
    let (lo, hi) = class_band(k, classes);
    let mut partials: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..TONES {
        partials.push((rng.gen_range(lo..hi), 1.0, rng.gen_range(0.0..TAU)));
    }
    for _ in 0..NOISE_PARTIALS {
        partials.push((rng.gen_range(lo..hi), 0.25, rng.gen_range(0.0..TAU)));
    }
    let norm: f64 = partials.iter().map(|p| p.1).sum();
    let gain = rng.gen_range(0.5..0.9) / norm;
    let sr = SAMPLE_RATE_HZ as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let v: f64 = partials
                .iter()
                .map(|&(f, a, ph)| a * (TAU * f * t + ph).sin())
                .sum();
            (gain * v) as f32
        })
        .collect()
}

/// Writes `n_per_class` WAVs per class under `out_dir/wav` plus
/// `out_dir/manifest.csv`. The `i`-th clip of every class goes to fold
/// `i % folds`, and each fold has its own speaker id.
pub fn synth_corpus(
    out_dir: &Path,
    n_per_class: usize,
    taxonomy: &LabelTaxonomy,
    seed: u64,
    folds: u8,
) -> Result<Manifest> {
    taxonomy.validate()?;
    if folds == 0 || folds > MAX_FOLDS {
        return Err(PcqError::Config(format!("folds must be 1..={MAX_FOLDS}")));
    }
    if n_per_class < folds as usize {
        return Err(PcqError::Config(format!(
            "{n_per_class} clips per class cannot fill {folds} folds"
        )));
    }
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| PcqError::io(&wav_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = taxonomy.num_classes();
    let mut rows = Vec::new();
    for (ci, class) in taxonomy.classes.iter().enumerate() {
        for i in 0..n_per_class {
            let clip_id = format!("{class}_{i:03}");
            let rel = format!("wav/{clip_id}.wav");
            let fold = (i % folds as usize) as u8;
            write_wav_pcm16(&out_dir.join(&rel), &synth_clip(ci, k, &mut rng))?;
            rows.push(ManifestRow {
                clip_id,
                path: rel,
                label: class.clone(),
                speaker: format!("spk{fold:02}"),
                fold,
            });
        }
    }
    let manifest = Manifest::new(rows, out_dir);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
