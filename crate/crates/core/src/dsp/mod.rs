//! Audio ingest, segmentation, and the spectrogram front-end.

mod audio;
pub mod cache;
mod spectrogram;

pub use audio::{
    read_wav, segment_clip, write_wav_pcm16, AudioClip, Segment, SAMPLE_RATE_HZ, SEGMENT_LEN,
};
pub use cache::{batch_features, read_cached, read_index, CacheIndex};
pub use spectrogram::{
    hamming, spectrogram, Spectrogram, SpectrogramExtractor, DFT_SIZE, FRAME_LEN, HOP_LEN,
    NUM_BINS, NUM_FRAMES,
};
