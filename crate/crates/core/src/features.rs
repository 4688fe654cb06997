//! Per-utterance model inputs held in memory: lips and face after the fixed
//! input pooling, log-mel of the waveform, and CTC targets.
//!
//! Input pooling is not learned, so applying it once here is exact. All
//! pooling goes through [`avg_pool_u8`]; training, inference and evaluation
//! therefore see bit-identical inputs.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::{load_utterance, CorpusManifest, Split, UtteranceEntry, UtteranceSample};
use crate::data::render::mix_seed;
use crate::data::text::encode_transcript;
use crate::dsp::compute_mel;
use crate::error::{invalid, Result};
use crate::exec::Exec;

#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    pub speaker_id: String,
    pub utterance_id: String,
    /// Index into [`FeatureSet::speakers`].
    pub speaker: usize,
    pub transcript: String,
    pub graphemes: Vec<u32>,
    /// `[T, C, S, S]`, pooled lip crops in [0, 1].
    pub lips: Vec<f32>,
    /// `[C, F, F]`, pooled face image in [0, 1].
    pub face: Vec<f32>,
    /// `[bins, frames]` log-mel.
    pub mel: Vec<f32>,
}

/// Pooling factors applied before caching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pooling {
    pub lip: usize,
    pub face: usize,
}

impl Pooling {
    pub fn from_config(cfg: &crate::config::ModelConfig) -> Self {
        Self {
            lip: cfg.lip.input_pool,
            face: cfg.face.input_pool,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub items: Vec<UtteranceFeatures>,
    pub speakers: Vec<String>,
    pub lip_dims: [usize; 4],
    pub face_dims: [usize; 3],
    pub mel_dims: [usize; 2],
}

/// Block average of u8 planes `[n, h, w]` by `k`, scaled to [0, 1].
/// Trailing rows and columns that do not fill a block are dropped.
pub fn avg_pool_u8(data: &[u8], n: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let (oh, ow) = (h / k, w / k);
    let div = (k * k * 255) as f32;
    let mut out = Vec::with_capacity(n * oh * ow);
    for p in 0..n {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0u32;
                for dy in 0..k {
                    let row = &plane[(y * k + dy) * w + x * k..][..k];
                    s += row.iter().map(|&v| v as u32).sum::<u32>();
                }
                out.push(s as f32 / div);
            }
        }
    }
    out
}

impl UtteranceFeatures {
    pub fn from_sample(
        sample: &UtteranceSample,
        speaker: usize,
        pooling: Pooling,
        audio: &crate::config::AudioConfig,
    ) -> Result<Self> {
        let [t, c, h, w] = sample.lip_frames.dims;
        let [fc, fh, fw] = sample.face_image.dims;
        let mel = compute_mel(&sample.waveform, audio)?;
        Ok(Self {
            speaker_id: sample.speaker_id.clone(),
            utterance_id: sample.utterance_id.clone(),
            speaker,
            transcript: sample.transcript.clone(),
            graphemes: encode_transcript(&sample.transcript)?.as_slice().to_vec(),
            lips: avg_pool_u8(&sample.lip_frames.data, t * c, h, w, pooling.lip),
            face: avg_pool_u8(&sample.face_image.data, fc, fh, fw, pooling.face),
            mel: mel.values,
        })
    }
}

impl FeatureSet {
    /// Loads `entries` and extracts their features. `speakers` fixes the
    /// label order; entries of other speakers are rejected.
    pub fn build(
        manifest: &CorpusManifest,
        entries: &[&UtteranceEntry],
        speakers: &[String],
        pooling: Pooling,
        exec: Exec,
    ) -> Result<Self> {
        let v = &manifest.video;
        let a = &manifest.audio;
        if pooling.lip == 0
            || pooling.face == 0
            || v.lip_height % pooling.lip != 0
            || v.face_size % pooling.face != 0
        {
            return Err(invalid!(
                "pooling {pooling:?} does not divide lip {} / face {} sizes",
                v.lip_height,
                v.face_size
            ));
        }
        let items = exec.try_map(entries, |e| {
            let speaker = speakers
                .iter()
                .position(|s| *s == e.speaker_id)
                .ok_or_else(|| invalid!("speaker {} has no label", e.speaker_id))?;
            let sample = load_utterance(manifest, &e.speaker_id, &e.utterance_id)?;
            UtteranceFeatures::from_sample(&sample, speaker, pooling, a)
        })?;
        let s = v.lip_height / pooling.lip;
        let f = v.face_size / pooling.face;
        Ok(Self {
            items,
            speakers: speakers.to_vec(),
            lip_dims: [v.frames_per_utterance, v.channels, s, s],
            face_dims: [v.channels, f, f],
            mel_dims: [a.mel_bins, a.mel_frames_per_utterance()],
        })
    }

    /// Features of one split, labelled by the speakers of the whole corpus.
    pub fn for_split(
        manifest: &CorpusManifest,
        split: Split,
        pooling: Pooling,
        exec: Exec,
    ) -> Result<Self> {
        Self::build(
            manifest,
            &manifest.split(split),
            &manifest.speakers(),
            pooling,
            exec,
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn stack<'a>(
        &'a self,
        idx: &[usize],
        dims: &[usize],
        get: impl Fn(usize) -> &'a [f32],
        dtype: DType,
    ) -> Result<Tensor> {
        let per: usize = dims.iter().product();
        let mut v = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            v.extend_from_slice(get(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(dims);
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `[B, T, C, S, S]`.
    pub fn lips(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        self.stack(idx, &self.lip_dims, |i| &self.items[i].lips, dtype)
    }

    /// `[B, C, F, F]`.
    pub fn faces(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        self.stack(idx, &self.face_dims, |i| &self.items[i].face, dtype)
    }

    /// `[B, bins, frames]`.
    pub fn mels(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        self.stack(idx, &self.mel_dims, |i| &self.items[i].mel, dtype)
    }

    pub fn targets(&self, idx: &[usize]) -> Vec<&[u32]> {
        idx.iter()
            .map(|&i| self.items[i].graphemes.as_slice())
            .collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.items[i].speaker as u32).collect()
    }

    pub fn position(&self, speaker_id: &str, utterance_id: &str) -> Option<usize> {
        self.items
            .iter()
            .position(|u| u.speaker_id == speaker_id && u.utterance_id == utterance_id)
    }
}

/// Consecutive index chunks of at most `size`.
pub fn batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Shuffled visiting order of `n` items for one epoch; a pure function of
/// its arguments so that resumed runs replay the same batches.
pub fn epoch_order(n: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, epoch));
    order.shuffle(&mut rng);
    order
}
