//! The clip manifest: CSV with header `clip_id,path,label,speaker,fold`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PcqError, Result};

pub const MAX_FOLDS: u8 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub path: String,
    pub label: String,
    pub speaker: String,
    pub fold: u8,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Relative `path` entries resolve against this directory.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            rows,
            base_dir: base_dir.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| PcqError::Data(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| PcqError::Data(format!("{}: {e}", path.display())))?
            .clone();
        let expected = ["clip_id", "path", "label", "speaker", "fold"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(PcqError::Data(format!(
                "{}: header must be {}",
                path.display(),
                expected.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
            let row =
                rec.map_err(|e| PcqError::Data(format!("{} row {}: {e}", path.display(), i + 1)))?;
            rows.push(row);
        }
        let m = Manifest::new(rows, path.parent().unwrap_or(Path::new(".")));
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if r.fold >= MAX_FOLDS {
                return Err(PcqError::Data(format!(
                    "clip {}: fold {} outside 0..{}",
                    r.clip_id, r.fold, MAX_FOLDS
                )));
            }
            if r.clip_id.is_empty() || r.clip_id.contains(['/', '\\']) {
                return Err(PcqError::Data(format!("invalid clip id {:?}", r.clip_id)));
            }
            if !seen.insert(&r.clip_id) {
                return Err(PcqError::Data(format!("duplicate clip id {}", r.clip_id)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| PcqError::Data(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| PcqError::Data(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| PcqError::io(path, e))
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Clips per fold id.
    pub fn fold_sizes(&self) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            *out.entry(r.fold).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldStrategy {
    /// Speakers (sorted) are dealt round-robin to folds; no speaker spans folds.
    Speaker,
    /// Rows are shuffled with the seed and dealt round-robin.
    Random,
}

impl std::str::FromStr for FoldStrategy {
    type Err = PcqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(FoldStrategy::Speaker),
            "random" => Ok(FoldStrategy::Random),
            other => Err(PcqError::Config(format!("unknown fold strategy {other:?}"))),
        }
    }
}

/// Rewrites the fold column.
pub fn make_folds(manifest: &mut Manifest, folds: u8, by: FoldStrategy, seed: u64) -> Result<()> {
    if folds == 0 || folds > MAX_FOLDS {
        return Err(PcqError::Config(format!("folds must be 1..={MAX_FOLDS}")));
    }
    match by {
        FoldStrategy::Speaker => {
            let speakers: std::collections::BTreeSet<String> =
                manifest.rows.iter().map(|r| r.speaker.clone()).collect();
            if speakers.len() < folds as usize {
                return Err(PcqError::Config(format!(
                    "{} speakers cannot fill {folds} folds",
                    speakers.len()
                )));
            }
            let index: BTreeMap<&String, u8> = speakers
                .iter()
                .enumerate()
                .map(|(i, s)| (s, (i % folds as usize) as u8))
                .collect();
            let assigned: Vec<u8> = manifest.rows.iter().map(|r| index[&r.speaker]).collect();
            for (r, f) in manifest.rows.iter_mut().zip(assigned) {
                r.fold = f;
            }
        }
        FoldStrategy::Random => {
            let mut order: Vec<usize> = (0..manifest.rows.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for (k, i) in order.into_iter().enumerate() {
                manifest.rows[i].fold = (k % folds as usize) as u8;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<ManifestRow> {
        (0..n)
            .map(|i| ManifestRow {
                clip_id: format!("c{i}"),
                path: format!("c{i}.wav"),
                label: "happy".into(),
                speaker: format!("s{}", i % 5),
                fold: 0,
            })
            .collect()
    }

    #[test]
    fn csv_roundtrip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        Manifest::new(rows(3), dir.path()).write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("clip_id,path,label,speaker,fold\n"));
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.rows, rows(3));
        assert_eq!(m.resolve(&m.rows[0]), dir.path().join("c0.wav"));
    }

    #[test]
    fn bad_fold_rejected() {
        let mut r = rows(1);
        r[0].fold = 10;
        assert!(Manifest::new(r, ".").validate().is_err());
    }

    #[test]
    fn speaker_folds_keep_speakers_together() {
        let mut m = Manifest::new(rows(20), ".");
        make_folds(&mut m, 5, FoldStrategy::Speaker, 0).unwrap();
        for r in &m.rows {
            let s: usize = r.speaker[1..].parse().unwrap();
            assert_eq!(r.fold as usize, s);
        }
        assert!(make_folds(&mut m, 10, FoldStrategy::Speaker, 0).is_err());
    }

    #[test]
    fn random_folds_balanced() {
        let mut m = Manifest::new(rows(20), ".");
        make_folds(&mut m, 10, FoldStrategy::Random, 3).unwrap();
        assert!(m.fold_sizes().values().all(|&n| n == 2));
    }
}
