//! Audio/video framing, model architecture and training configuration.
//!
//! Run configs are TOML. Loading starts from the defaults of the selected
//! model preset, deep-merges the file on top, applies `dotted.key=value`
//! overrides, and deserializes strictly, so unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub utterance_seconds: f64,
    pub mel_bins: usize,
    pub hop: usize,
    pub win: usize,
    pub fft_size: usize,
    /// Floor applied to linear mel power before the log.
    pub mel_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            utterance_seconds: 3.0,
            mel_bins: 80,
            hop: 320,
            win: 1280,
            fft_size: 1280,
            mel_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn samples_per_utterance(&self) -> usize {
        (self.sample_rate as f64 * self.utterance_seconds).round() as usize
    }

    pub fn mel_frames_per_utterance(&self) -> usize {
        self.samples_per_utterance() / self.hop
    }

    pub fn log_floor(&self) -> f32 {
        self.mel_floor.ln() as f32
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sample_rate as f64 * self.utterance_seconds;
        if self.sample_rate == 0 || self.hop == 0 || self.win == 0 || self.mel_bins == 0 {
            return Err(Error::Config("audio sizes must be positive".into()));
        }
        if (n - n.round()).abs() > 1e-9 || self.samples_per_utterance() % self.hop != 0 {
            return Err(Error::Config(format!(
                "sample_rate x utterance_seconds ({n}) must be a multiple of hop {}",
                self.hop
            )));
        }
        if self.fft_size < self.win {
            return Err(Error::Config(format!(
                "fft_size {} must be >= win {}",
                self.fft_size, self.win
            )));
        }
        if !(self.mel_floor > 0.0) {
            return Err(Error::Config("mel_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoConfig {
    pub frames_per_utterance: usize,
    pub lip_height: usize,
    pub lip_width: usize,
    pub channels: usize,
    /// Square face-image side length fed to the face encoder.
    pub face_size: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            frames_per_utterance: 75,
            lip_height: 144,
            lip_width: 144,
            channels: 3,
            face_size: 128,
        }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lip_height != 144 || self.lip_width != 144 {
            return Err(Error::Config(format!(
                "lip crops must be 144x144, got {}x{}",
                self.lip_height, self.lip_width
            )));
        }
        if self.frames_per_utterance == 0 || self.channels == 0 || self.face_size == 0 {
            return Err(Error::Config("video sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Checks that audio and video framing agree with the decoder's temporal upsampling.
pub fn check_pairing(audio: &AudioConfig, video: &VideoConfig, upsample: usize) -> Result<()> {
    audio.validate()?;
    video.validate()?;
    let mel = audio.mel_frames_per_utterance();
    if mel != upsample * video.frames_per_utterance {
        return Err(Error::Config(format!(
            "{mel} mel frames per utterance but {} video frames x upsample {upsample}",
            video.frames_per_utterance
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Architecture constants at published width.
    Full,
    /// Same topology and contracts with narrow layers, for single-core training runs.
    #[default]
    Compact,
    /// Tiny widths for gradient checks and fast unit tests.
    Micro,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "compact" => Ok(Preset::Compact),
            "micro" => Ok(Preset::Micro),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipEncoderConfig {
    /// Fixed average-pool applied to the 144x144 crop before the first conv (1 = none).
    pub input_pool: usize,
    pub stage_channels: [usize; 3],
    pub stage_pool: usize,
    pub residual_mid: usize,
    pub residual_scale: f64,
    pub dropout: f64,
    /// Spatial pooling after the residual block.
    pub post_pool: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub embed_dim: usize,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceEncoderConfig {
    pub input_pool: usize,
    pub stage_channels: [usize; 4],
    pub dropout: f64,
    pub embed_dim: usize,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProsodyEncoderConfig {
    pub conv_channels: [usize; 4],
    pub gru_hidden: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub initial_channels: usize,
    pub upsample_rates: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<usize>,
    pub pre_kernel: usize,
    pub post_kernel: usize,
    pub leaky_slope: f64,
}

impl GeneratorConfig {
    pub fn total_upsample(&self) -> usize {
        self.upsample_rates.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub mpd_channels: Vec<usize>,
    pub mpd_kernel: usize,
    pub mpd_stride: usize,
    /// Layer sizes of each scale discriminator; the first entry is the input (mel bins).
    pub msd_channels: Vec<usize>,
    pub msd_kernels: Vec<usize>,
    pub msd_strides: Vec<usize>,
    pub msd_groups: Vec<usize>,
    pub msd_scales: usize,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lip: LipEncoderConfig,
    pub face: FaceEncoderConfig,
    pub prosody: ProsodyEncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::full(),
            Preset::Compact => Self::compact(),
            Preset::Micro => Self::micro(),
        }
    }

    pub fn full() -> Self {
        Self {
            lip: LipEncoderConfig {
                input_pool: 1,
                stage_channels: [32, 64, 96],
                stage_pool: 2,
                residual_mid: 32,
                residual_scale: 0.2,
                dropout: 0.3,
                post_pool: 2,
                gru_hidden: 256,
                gru_layers: 2,
                embed_dim: 256,
                leaky_slope: 0.1,
            },
            face: FaceEncoderConfig {
                input_pool: 1,
                stage_channels: [32, 64, 128, 256],
                dropout: 0.1,
                embed_dim: 256,
                leaky_slope: 0.1,
            },
            prosody: ProsodyEncoderConfig {
                conv_channels: [32, 32, 64, 64],
                gru_hidden: 128,
                embed_dim: 256,
            },
            generator: GeneratorConfig {
                initial_channels: 640,
                upsample_rates: vec![1, 1, 2],
                upsample_kernels: vec![16, 16, 4],
                resblock_kernels: vec![3, 7, 11],
                resblock_dilations: vec![1, 3, 5],
                pre_kernel: 7,
                post_kernel: 7,
                leaky_slope: 0.1,
            },
            discriminator: DiscriminatorConfig {
                periods: vec![2, 3, 5],
                mpd_channels: vec![32, 128, 512, 1024, 1024],
                mpd_kernel: 5,
                mpd_stride: 3,
                msd_channels: vec![80, 160, 240, 480, 960, 960],
                msd_kernels: vec![15, 41, 41, 41, 41],
                msd_strides: vec![1, 2, 2, 4, 1],
                msd_groups: vec![1, 4, 16, 16, 16],
                msd_scales: 3,
                leaky_slope: 0.1,
            },
        }
    }

    pub fn compact() -> Self {
        let mut m = Self::full();
        m.lip.input_pool = 12;
        m.lip.stage_channels = [8, 16, 24];
        m.lip.post_pool = 1;
        m.lip.residual_mid = 8;
        m.lip.gru_hidden = 64;
        m.face.input_pool = 2;
        m.face.stage_channels = [8, 16, 24, 32];
        m.prosody.conv_channels = [8, 16, 16, 32];
        m.prosody.gru_hidden = 64;
        m.generator.initial_channels = 64;
        m.discriminator.mpd_channels = vec![16, 32, 32, 32, 32];
        m.discriminator.msd_channels = vec![80, 32, 48, 64, 64, 64];
        m.discriminator.msd_groups = vec![1, 4, 4, 4, 4];
        m
    }

    pub fn micro() -> Self {
        let mut m = Self::compact();
        m.lip.stage_channels = [2, 3, 4];
        m.lip.residual_mid = 2;
        m.lip.gru_hidden = 3;
        m.lip.embed_dim = 4;
        m.face.input_pool = 8;
        m.face.stage_channels = [2, 2, 3, 3];
        m.face.embed_dim = 4;
        m.prosody.conv_channels = [2, 2, 2, 2];
        m.prosody.gru_hidden = 3;
        m.prosody.embed_dim = 4;
        m.generator.initial_channels = 8;
        m.generator.resblock_kernels = vec![3, 5];
        m.generator.resblock_dilations = vec![1, 3];
        m.discriminator.mpd_channels = vec![4, 4, 4, 4, 4];
        m.discriminator.msd_channels = vec![80, 8, 8, 8, 8, 8];
        m.discriminator.msd_groups = vec![1, 2, 2, 2, 2];
        m
    }

    /// Width of one condition frame: lip embedding plus face embedding.
    pub fn condition_dim(&self) -> usize {
        self.lip.embed_dim + self.face.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if g.upsample_rates.len() != g.upsample_kernels.len() || g.upsample_rates.is_empty() {
            return Err(Error::Config(
                "generator upsample_rates and upsample_kernels must have equal nonzero length"
                    .into(),
            ));
        }
        if g.resblock_kernels.is_empty() || g.resblock_dilations.is_empty() {
            return Err(Error::Config(
                "generator needs at least one MRF branch".into(),
            ));
        }
        if g.initial_channels >> g.upsample_rates.len() == 0 {
            return Err(Error::Config(
                "generator initial_channels too small for its stage count".into(),
            ));
        }
        if self.face.embed_dim != self.prosody.embed_dim {
            return Err(Error::Config(format!(
                "face embedding dim {} must equal prosody embedding dim {}",
                self.face.embed_dim, self.prosody.embed_dim
            )));
        }
        let d = &self.discriminator;
        let layers = d.msd_channels.len().saturating_sub(1);
        if layers == 0
            || d.msd_kernels.len() != layers
            || d.msd_strides.len() != layers
            || d.msd_groups.len() != layers
        {
            return Err(Error::Config(
                "msd_kernels/strides/groups need one entry per MSD layer".into(),
            ));
        }
        for (i, &gr) in d.msd_groups.iter().enumerate() {
            if d.msd_channels[i] % gr != 0 || d.msd_channels[i + 1] % gr != 0 {
                return Err(Error::Config(format!(
                    "msd layer {i}: groups {gr} must divide channels"
                )));
            }
        }
        if d.periods.contains(&0) || d.mpd_channels.is_empty() {
            return Err(Error::Config("invalid MPD configuration".into()));
        }
        let l = &self.lip;
        let side = 144 / l.input_pool.max(1) / l.stage_pool.pow(3) / l.post_pool.max(1);
        if side == 0 {
            return Err(Error::Config(
                "lip pooling reduces the crop to nothing".into(),
            ));
        }
        if l.gru_layers == 0 {
            return Err(Error::Config(
                "lip encoder needs at least one GRU layer".into(),
            ));
        }
        if !(0.0..1.0).contains(&l.dropout) || !(0.0..1.0).contains(&self.face.dropout) {
            return Err(Error::Config("dropout rates must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied at every epoch boundary.
    pub lr_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            lr_decay: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Validate every this many steps in addition to epoch ends (0 = epoch ends only).
    pub eval_every: usize,
}

impl StageConfig {
    fn with(lr: f64, batch_size: usize, max_steps: usize, patience: usize) -> Self {
        Self {
            optimizer: OptimizerConfig {
                lr,
                ..OptimizerConfig::default()
            },
            batch_size,
            max_steps,
            patience,
            eval_every: 0,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config(format!("{name}.patience must be >= 1")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be >= 1")));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!(
                "{name}.optimizer has out-of-range values"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub fm: f64,
    pub mel: f64,
    pub cs: f64,
    pub vocoder: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fm: 2.0,
            mel: 45.0,
            cs: 1.0,
            vocoder: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub prosody: StageConfig,
    pub lip: StageConfig,
    pub face: StageConfig,
    pub joint: StageConfig,
    pub weights: LossWeights,
    /// Fine-tune the lip encoder during joint training (frozen by default).
    pub finetune_lip: bool,
    /// Keep updating the face encoder during joint training.
    pub train_face_in_joint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prosody: StageConfig::with(1e-3, 8, 2000, 10),
            lip: StageConfig::with(1e-3, 8, 3000, 10),
            face: StageConfig::with(1e-3, 8, 1500, 10),
            joint: StageConfig::with(2e-4, 8, 2000, 10),
            weights: LossWeights::default(),
            finetune_lip: false,
            train_face_in_joint: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.prosody.validate("train.prosody")?;
        self.lip.validate("train.lip")?;
        self.face.validate("train.face")?;
        self.joint.validate("train.joint")?;
        let w = &self.weights;
        if [w.fm, w.mel, w.cs, w.vocoder].iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model_preset: Preset,
    pub audio: AudioConfig,
    pub video: VideoConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub griffin_lim_iters: usize,
    /// Apply the literal one-half factor to the I2I-selected embedding.
    pub i2i_halve: bool,
}

impl RunConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 1,
            model_preset: preset,
            audio: AudioConfig::default(),
            video: VideoConfig::default(),
            model: ModelConfig::preset(preset),
            train: TrainConfig::default(),
            griffin_lim_iters: 60,
            i2i_halve: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        check_pairing(
            &self.audio,
            &self.video,
            self.model.generator.total_upsample(),
        )?;
        if self.griffin_lim_iters == 0 {
            return Err(Error::Config("griffin_lim_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Builds a config from optional TOML text plus `dotted.key=value` overrides.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = match text {
            Some(t) => toml::from_str::<toml::Table>(t)
                .map_err(|e| Error::Config(format!("parse error: {e}")))?,
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut user, ov)?;
        }
        let preset = match user.get("model_preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => {
                return Err(Error::Config(format!(
                    "model_preset must be a string, got {other}"
                )))
            }
            None => Preset::default(),
        };
        let base = toml::Table::try_from(Self::with_preset(preset))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Value::Table(base);
        deep_merge(&mut merged, toml::Value::Table(user));
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash of the canonical serialized config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as a TOML literal, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = parse_literal(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override key {key:?} descends into a non-table"
                )))
            }
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
