//! Speech-input branch producing the single-channel query tokens.
//!
//! Two backends share one contract, a `[T, D]` sequence of final-layer frame
//! embeddings:
//! - `standin`: a small trainable strided 1-D conv stack over raw audio
//!   (stride product 320, so a 3 s segment yields T = 150);
//! - `precomputed`: embeddings exported offline by an external encoder and
//!   stored as `<clip_id>__<segment_index>.emb`.
//!
//! A learned linear map `D -> W_1` turns each frame into a row, the rows are
//! resized bilinearly to `x_1`'s grid to form `Q_1`, and adaptive average
//! pooling yields the later tokens.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParamBuilder, ParamId, Var};
use crate::dsp::SEGMENT_LEN;
use crate::error::{shape_err, PcqError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderBackend {
    Standin,
    Precomputed,
}

impl std::str::FromStr for EncoderBackend {
    type Err = PcqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standin" => Ok(EncoderBackend::Standin),
            "precomputed" => Ok(EncoderBackend::Precomputed),
            other => Err(PcqError::Config(format!(
                "unknown encoder backend {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backend: EncoderBackend,
    /// Output channels of each stand-in conv; the last is the embedding width.
    pub standin_widths: Vec<usize>,
    /// Kernel size == stride for each stand-in conv.
    pub standin_strides: Vec<usize>,
    /// Embedding width of precomputed features.
    pub precomputed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backend: EncoderBackend::Standin,
            standin_widths: vec![16, 32, 64, 64],
            standin_strides: vec![5, 4, 4, 4],
            precomputed_dim: 768,
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        match self.backend {
            EncoderBackend::Standin => *self.standin_widths.last().unwrap_or(&0),
            EncoderBackend::Precomputed => self.precomputed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend == EncoderBackend::Standin {
            if self.standin_widths.is_empty()
                || self.standin_widths.len() != self.standin_strides.len()
            {
                return Err(PcqError::Config(
                    "stand-in widths and strides must be non-empty and equal length".into(),
                ));
            }
            if self.standin_widths.contains(&0) || self.standin_strides.contains(&0) {
                return Err(PcqError::Config(
                    "stand-in widths/strides must be positive".into(),
                ));
            }
        }
        if self.embed_dim() == 0 {
            return Err(PcqError::Config("embedding width must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced by the stand-in for one segment.
    pub fn standin_frames(&self) -> usize {
        self.standin_strides
            .iter()
            .fold(SEGMENT_LEN, |len, &s| (len - s) / s + 1)
    }
}

/// Final-layer frame embeddings, `[T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub frames: Tensor<f32>,
}

impl EncoderOutput {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(shape_err!(
                "encoder output must be [T, D], got {:?}",
                frames.shape()
            ));
        }
        if !frames.all_finite() {
            return Err(PcqError::Numerical("non-finite encoder embedding".into()));
        }
        Ok(EncoderOutput { frames })
    }
}

/// Query tokens `Q_1 .. Q_{L-1}`, each `[1, H_j, W_j]`.
#[derive(Debug, Clone)]
pub struct QueryTokens {
    pub tokens: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct StandinEncoder {
    convs: Vec<(ParamId, usize)>,
}

impl StandinEncoder {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let mut prev = 1;
        let mut convs = Vec::new();
        for (i, (&w, &s)) in cfg
            .standin_widths
            .iter()
            .zip(&cfg.standin_strides)
            .enumerate()
        {
            let id = b.add(
                &format!("conv{}.weight", i + 1),
                &[w, prev, s],
                Init::KaimingUniform { fan_in: prev * s },
            )?;
            convs.push((id, s));
            prev = w;
        }
        Ok(StandinEncoder { convs })
    }

    /// `audio` is `[1, 48000]`; returns `[T, D]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, audio: Var) -> Result<Var> {
        if g.shape(audio) != [1, SEGMENT_LEN] {
            return Err(shape_err!(
                "stand-in encoder expects [1, {SEGMENT_LEN}], got {:?}",
                g.shape(audio)
            ));
        }
        let mut h = audio;
        for (i, &(id, stride)) in self.convs.iter().enumerate() {
            let w = g.param(id);
            h = g.conv1d(h, w, stride)?;
            if i + 1 < self.convs.len() {
                h = g.relu(h);
            }
        }
        g.transpose(h)
    }
}

#[derive(Debug, Clone)]
pub struct QueryEncoder {
    pub config: EncoderConfig,
    standin: Option<StandinEncoder>,
    proj_weight: ParamId,
    proj_bias: ParamId,
    token_width: usize,
}

impl QueryEncoder {
    /// `token_width` is the width of `Q_1` (that of `x_1`).
    pub fn new(b: &mut ParamBuilder, config: EncoderConfig, token_width: usize) -> Result<Self> {
        config.validate()?;
        let standin = match config.backend {
            EncoderBackend::Standin => {
                Some(b.scope("standin", |b| StandinEncoder::new(b, &config))?)
            }
            EncoderBackend::Precomputed => None,
        };
        let d = config.embed_dim();
        let proj_weight = b.add(
            "query_proj.weight",
            &[token_width, d],
            Init::KaimingUniform { fan_in: d },
        )?;
        let proj_bias = b.add("query_proj.bias", &[token_width], Init::Zeros)?;
        Ok(QueryEncoder {
            config,
            standin,
            proj_weight,
            proj_bias,
            token_width,
        })
    }

    /// Maps the branch input to `[T, D]`: raw audio through the stand-in, or a
    /// precomputed embedding passed through unchanged.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<'_, F>, input: Var) -> Result<Var> {
        match &self.standin {
            Some(s) => s.forward(g, input),
            None => {
                let d = self.config.embed_dim();
                match g.shape(input) {
                    &[_, dd] if dd == d => Ok(input),
                    s => Err(shape_err!(
                        "precomputed embedding must be [T, {d}], got {:?}",
                        s
                    )),
                }
            }
        }
    }

    /// Builds `Q_1` on `sizes[0]`, then pools it successively onto the
    /// remaining sizes.
    pub fn make_query_tokens<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        frames: Var,
        sizes: &[(usize, usize)],
    ) -> Result<QueryTokens> {
        let &(h1, w1) = sizes
            .first()
            .ok_or_else(|| shape_err!("at least one query size required"))?;
        if w1 != self.token_width {
            return Err(shape_err!(
                "query projection width {} does not match target width {w1}",
                self.token_width
            ));
        }
        let t = match g.shape(frames) {
            &[t, _] => t,
            s => return Err(shape_err!("frames must be [T, D], got {:?}", s)),
        };
        let w = g.param(self.proj_weight);
        let b = g.param(self.proj_bias);
        let rows = g.linear(frames, w, Some(b))?;
        let map = g.reshape(rows, &[1, t, w1])?;
        let q1 = g.bilinear_resize(map, h1, w1)?;
        let mut tokens = vec![q1];
        for &(h, w) in &sizes[1..] {
            let prev = *tokens.last().unwrap();
            tokens.push(g.adaptive_avg_pool(prev, h, w)?);
        }
        Ok(QueryTokens { tokens })
    }
}

// ----- precomputed embedding files -----

/// Header of a `.emb` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EmbeddingHeader {
    pub T: usize,
    pub D: usize,
}

pub fn embedding_file_name(clip_id: &str, segment_index: usize) -> String {
    format!("{clip_id}__{segment_index}.emb")
}

/// `u64` LE header length, JSON `{"T":..,"D":..}`, then `T*D` LE `f32`s.
pub fn encode_embedding(frames: &Tensor<f32>) -> Result<Vec<u8>> {
    let (t, d) = match frames.shape() {
        &[t, d] => (t, d),
        s => return Err(shape_err!("embedding must be [T, D], got {:?}", s)),
    };
    let header = serde_json::to_vec(&EmbeddingHeader { T: t, D: d })?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * frames.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EncoderOutput> {
    let bad = |m: &str| PcqError::Data(format!("malformed embedding file: {m}"));
    let hlen = u64::from_le_bytes(
        bytes
            .get(..8)
            .ok_or_else(|| bad("truncated"))?
            .try_into()
            .unwrap(),
    ) as usize;
    let header: EmbeddingHeader = serde_json::from_slice(
        bytes
            .get(8..8 + hlen)
            .ok_or_else(|| bad("truncated header"))?,
    )?;
    let blob = &bytes[8 + hlen..];
    if blob.len() != 4 * header.T * header.D {
        return Err(bad("blob size does not match header"));
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EncoderOutput::new(Tensor::new(&[header.T, header.D], data)?)
}

/// Directory of precomputed `.emb` files.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub dir: PathBuf,
}

impl EmbeddingStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        EmbeddingStore { dir: dir.into() }
    }

    pub fn path(&self, clip_id: &str, segment_index: usize) -> PathBuf {
        self.dir.join(embedding_file_name(clip_id, segment_index))
    }

    pub fn load(&self, clip_id: &str, segment_index: usize) -> Result<EncoderOutput> {
        let path = self.path(clip_id, segment_index);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(PcqError::MissingEmbedding(path))
            }
            Err(e) => return Err(PcqError::io(&path, e)),
        };
        decode_embedding(&bytes)
    }

    pub fn save(&self, clip_id: &str, segment_index: usize, frames: &Tensor<f32>) -> Result<()> {
        write_embedding(&self.path(clip_id, segment_index), frames)
    }
}

pub fn write_embedding(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_embedding(frames)?).map_err(|e| PcqError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Params;

    fn standin(cfg: EncoderConfig, width: usize) -> (QueryEncoder, Params<f32>) {
        let mut b = ParamBuilder::new(2);
        let e = b
            .scope("encoder", |b| QueryEncoder::new(b, cfg, width))
            .unwrap();
        (e, b.finish())
    }

    #[test]
    fn standin_zero_audio_shape() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.standin_frames(), 150);
        let (e, p) = standin(cfg, 100);
        let mut g = Graph::new(&p);
        let a = g.input(Tensor::zeros(&[1, SEGMENT_LEN]));
        let f = e.encode(&mut g, a).unwrap();
        assert_eq!(g.shape(f), &[150, 64]);
        assert!(g.value(f).all_finite());
    }

    #[test]
    fn standin_deterministic() {
        let cfg = EncoderConfig::default();
        let (e, p) = standin(cfg, 100);
        let audio = Tensor::from_fn(&[1, SEGMENT_LEN], |i| ((i as f32) * 0.013).sin() * 0.3);
        let run = || {
            let mut g = Graph::new(&p);
            let a = g.input(audio.clone());
            let f = e.encode(&mut g, a).unwrap();
            g.value(f).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn query_token_shapes_and_pool_identity() {
        let (e, p) = standin(EncoderConfig::default(), 100);
        let mut g = Graph::new(&p);
        let frames = g.input(Tensor::from_fn(&[150, 64], |i| (i % 7) as f32 * 0.1));
        let q = e
            .make_query_tokens(&mut g, frames, &[(150, 100), (75, 50), (37, 25)])
            .unwrap();
        assert_eq!(g.shape(q.tokens[0]), &[1, 150, 100]);
        assert_eq!(g.shape(q.tokens[1]), &[1, 75, 50]);
        assert_eq!(g.shape(q.tokens[2]), &[1, 37, 25]);
        let again = g.adaptive_avg_pool(q.tokens[0], 75, 50).unwrap();
        assert_eq!(g.value(again), g.value(q.tokens[1]));
        let again = g.adaptive_avg_pool(q.tokens[1], 37, 25).unwrap();
        assert_eq!(g.value(again), g.value(q.tokens[2]));
    }

    #[test]
    fn constant_frames_give_time_constant_tokens() {
        let (e, p) = standin(EncoderConfig::default(), 100);
        let mut g = Graph::new(&p);
        let frames = g.input(Tensor::full(&[150, 64], 0.25));
        let q = e
            .make_query_tokens(&mut g, frames, &[(150, 100), (75, 50), (37, 25)])
            .unwrap();
        for &tok in &q.tokens {
            let (_, h, w) = g.value(tok).dims3().unwrap();
            let d = g.value(tok).data();
            for row in 1..h {
                for col in 0..w {
                    assert!((d[row * w + col] - d[col]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn embedding_roundtrip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let store = EmbeddingStore::new(dir.path());
        let frames = Tensor::from_fn(&[149, 768], |i| i as f32 * 1e-3);
        store.save("clip", 2, &frames).unwrap();
        let out = store.load("clip", 2).unwrap();
        assert_eq!(out.frames, frames);
        assert!(matches!(
            store.load("clip", 3),
            Err(PcqError::MissingEmbedding(_))
        ));
    }

    #[test]
    fn precomputed_passthrough_and_dim_check() {
        let cfg = EncoderConfig {
            backend: EncoderBackend::Precomputed,
            ..Default::default()
        };
        let (e, p) = standin(cfg, 100);
        let mut g = Graph::new(&p);
        let emb = Tensor::from_fn(&[149, 768], |i| (i % 11) as f32);
        let v = g.input(emb.clone());
        let out = e.encode(&mut g, v).unwrap();
        assert_eq!(g.value(out), &emb);
        let wrong = g.input(Tensor::zeros(&[149, 64]));
        assert!(e.encode(&mut g, wrong).is_err());
    }
}
