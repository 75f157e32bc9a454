//! On-disk spectrogram cache: one little-endian `f32` file per segment plus a
//! JSON index.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::audio::{read_wav, segment_clip};
use super::spectrogram::{Spectrogram, SpectrogramExtractor, NUM_BINS, NUM_FRAMES};
use crate::error::{PcqError, Result};
use crate::manifest::Manifest;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub clip_id: String,
    pub segment_index: usize,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub clip_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub log1p: bool,
    pub entries: Vec<CacheEntry>,
    pub errors: Vec<RowError>,
}

pub fn segment_file_name(clip_id: &str, segment_index: usize) -> String {
    format!("{clip_id}__{segment_index}.f32")
}

pub fn encode_spectrogram(s: &Spectrogram) -> Vec<u8> {
    s.values
        .data()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn decode_spectrogram(bytes: &[u8]) -> Result<Spectrogram> {
    if bytes.len() != 4 * NUM_FRAMES * NUM_BINS {
        return Err(PcqError::Data(format!(
            "cached spectrogram has {} bytes, expected {}",
            bytes.len(),
            4 * NUM_FRAMES * NUM_BINS
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Spectrogram {
        values: Tensor::new(&[NUM_FRAMES, NUM_BINS], data)?,
    })
}

pub fn read_cached(dir: &Path, clip_id: &str, segment_index: usize) -> Result<Spectrogram> {
    let path = dir.join(segment_file_name(clip_id, segment_index));
    let bytes = fs::read(&path).map_err(|e| PcqError::io(&path, e))?;
    decode_spectrogram(&bytes)
}

/// Computes and caches the spectrogram of every segment of every manifest
/// row. Rows that fail (unreadable audio, wrong format) are recorded in the
/// index and skipped. Re-running over the same inputs rewrites identical
/// bytes.
pub fn batch_features(manifest: &Manifest, out_dir: &Path, log1p: bool) -> Result<CacheIndex> {
    fs::create_dir_all(out_dir).map_err(|e| PcqError::io(out_dir, e))?;
    let extractor = SpectrogramExtractor::new(log1p);
    let results: Vec<std::result::Result<Vec<CacheEntry>, RowError>> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let run = || -> Result<Vec<CacheEntry>> {
                let clip = read_wav(&manifest.resolve(row), &row.clip_id)?;
                let mut entries = Vec::new();
                for seg in segment_clip(&clip)? {
                    let spec = extractor.compute(&seg)?;
                    let file = segment_file_name(&row.clip_id, seg.index);
                    let path = out_dir.join(&file);
                    fs::write(&path, encode_spectrogram(&spec))
                        .map_err(|e| PcqError::io(&path, e))?;
                    entries.push(CacheEntry {
                        clip_id: row.clip_id.clone(),
                        segment_index: seg.index,
                        file,
                        shape: [NUM_FRAMES, NUM_BINS],
                    });
                }
                Ok(entries)
            };
            run().map_err(|e| RowError {
                clip_id: row.clip_id.clone(),
                error: e.to_string(),
            })
        })
        .collect();

    let mut index = CacheIndex {
        log1p,
        entries: Vec::new(),
        errors: Vec::new(),
    };
    for r in results {
        match r {
            Ok(e) => index.entries.extend(e),
            Err(e) => index.errors.push(e),
        }
    }
    index
        .entries
        .sort_by(|a, b| (&a.clip_id, a.segment_index).cmp(&(&b.clip_id, b.segment_index)));
    index.errors.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let path = out_dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index)?;
    fs::write(&path, json).map_err(|e| PcqError::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<CacheIndex> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(|e| PcqError::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
