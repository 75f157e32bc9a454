//! Short-time magnitude spectrogram: 40 ms Hamming frames at a 10 ms hop,
//! zero-padded to an 800-point DFT, first 200 bins kept.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::audio::{Segment, SEGMENT_LEN};
use crate::error::{PcqError, Result};
use crate::tensor::Tensor;

pub const FRAME_LEN: usize = 640;
pub const HOP_LEN: usize = 160;
pub const DFT_SIZE: usize = 800;
pub const NUM_FRAMES: usize = 300;
pub const NUM_BINS: usize = 200;

/// A `300 x 200` (frames x bins) non-negative magnitude map.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor<f32>,
}

impl Spectrogram {
    pub const FRAME_MS: u32 = 40;
    pub const HOP_MS: u32 = 10;

    pub fn dft_size(&self) -> usize {
        DFT_SIZE
    }

    /// The `[1, 300, 200]` network input.
    pub fn to_input(&self) -> Tensor<f32> {
        self.values
            .clone()
            .reshape(&[1, NUM_FRAMES, NUM_BINS])
            .expect("fixed spectrogram shape")
    }
}

/// `0.54 - 0.46 cos(2 pi n / (N - 1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

/// Reusable FFT plan and window.
pub struct SpectrogramExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    log1p: bool,
}

impl Default for SpectrogramExtractor {
    fn default() -> Self {
        Self::new(false)
    }
}

impl SpectrogramExtractor {
    /// `log1p` compresses magnitudes to `ln(1 + m)`.
    pub fn new(log1p: bool) -> Self {
        SpectrogramExtractor {
            fft: FftPlanner::new().plan_fft_forward(DFT_SIZE),
            window: hamming(FRAME_LEN),
            log1p,
        }
    }

    /// Windowed frame `i`, zero-padded to the DFT size. Samples past the end
    /// of the segment read as zero.
    pub fn windowed_frame(&self, samples: &[f32], frame: usize) -> Vec<f64> {
        let start = frame * HOP_LEN;
        let mut buf = vec![0.0; DFT_SIZE];
        for (k, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
            if let Some(&s) = samples.get(start + k) {
                *b = s as f64 * w;
            }
        }
        buf
    }

    /// Magnitudes of all 800 bins of one frame.
    pub fn full_spectrum(&self, samples: &[f32], frame: usize) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = self
            .windowed_frame(samples, frame)
            .into_iter()
            .map(|re| Complex::new(re, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf.iter().map(|c| c.norm()).collect()
    }

    pub fn compute(&self, seg: &Segment) -> Result<Spectrogram> {
        if seg.samples.len() != SEGMENT_LEN {
            return Err(PcqError::InvalidInput(format!(
                "spectrogram needs {SEGMENT_LEN} samples, got {}",
                seg.samples.len()
            )));
        }
        let mut values = Vec::with_capacity(NUM_FRAMES * NUM_BINS);
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut buf = vec![Complex::new(0.0, 0.0); DFT_SIZE];
        for frame in 0..NUM_FRAMES {
            for (b, re) in buf.iter_mut().zip(self.windowed_frame(&seg.samples, frame)) {
                *b = Complex::new(re, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            values.extend(buf[..NUM_BINS].iter().map(|c| {
                let m = c.norm();
                (if self.log1p { m.ln_1p() } else { m }) as f32
            }));
        }
        Ok(Spectrogram {
            values: Tensor::new(&[NUM_FRAMES, NUM_BINS], values)?,
        })
    }
}

/// Magnitude spectrogram of one segment with default settings.
pub fn spectrogram(seg: &Segment) -> Result<Spectrogram> {
    SpectrogramExtractor::default().compute(seg)
}
