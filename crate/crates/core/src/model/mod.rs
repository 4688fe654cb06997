//! Network modules and the bundle that owns their parameters.

pub mod decoder;
pub mod face;
pub mod lip;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AudioConfig, ModelConfig, VideoConfig};
use crate::data::render::mix_seed;
use crate::error::Result;
use crate::nn::ParamStore;

pub use decoder::{
    concat_condition, gan_losses, Generator, LossBundle, PeriodDiscriminator, ScaleDiscriminator,
};
pub use face::{cs_loss, FaceEncoder, ProsodyEncoder};
pub use lip::LipEncoder;

/// Fixed affine map between log-mel values and the unit range the networks
/// work in. The centre sits halfway between the log floor and 0 dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelNorm {
    pub center: f64,
    pub scale: f64,
}

impl MelNorm {
    pub fn new(audio: &AudioConfig) -> Self {
        let floor = audio.mel_floor.ln();
        Self {
            center: floor / 2.0,
            scale: -floor / 4.0,
        }
    }

    pub fn normalize(&self, mel: &Tensor) -> Result<Tensor> {
        Ok(mel.affine(1.0 / self.scale, -self.center / self.scale)?)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.affine(self.scale, self.center)?)
    }
}

/// Parameter-name prefixes of each trainable module.
pub const LIP: &str = "lip.";
pub const FACE: &str = "face.";
pub const PROSODY: &str = "prosody.";
pub const GENERATOR: &str = "gen.";
pub const MPD: &str = "mpd.";
pub const MSD: &str = "msd.";

/// Every network of the system, sharing one parameter store. Each module
/// is initialized from its own seed stream, so its initial weights do not
/// depend on the other modules.
pub struct Models {
    pub ps: ParamStore,
    pub cfg: ModelConfig,
    pub audio: AudioConfig,
    pub video: VideoConfig,
    pub lip: LipEncoder,
    pub face: FaceEncoder,
    pub prosody: ProsodyEncoder,
    pub generator: Generator,
    pub mpd: PeriodDiscriminator,
    pub msd: ScaleDiscriminator,
}

impl Models {
    pub fn new(
        cfg: &ModelConfig,
        audio: &AudioConfig,
        video: &VideoConfig,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(dtype);
        let rng = |k: u64| ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4D0D, k));
        let norm = MelNorm::new(audio);
        let bins = audio.mel_bins;
        let lip = LipEncoder::new(&mut ps, &cfg.lip, video.channels, &mut rng(1))?;
        let face = FaceEncoder::new(
            &mut ps,
            &cfg.face,
            video.channels,
            video.face_size,
            &mut rng(2),
        )?;
        let prosody = ProsodyEncoder::new(&mut ps, &cfg.prosody, bins, norm, &mut rng(3))?;
        let generator = Generator::new(
            &mut ps,
            &cfg.generator,
            cfg.condition_dim(),
            bins,
            norm,
            &mut rng(4),
        )?;
        let mpd = PeriodDiscriminator::new(&mut ps, &cfg.discriminator, bins, norm, &mut rng(5))?;
        let msd = ScaleDiscriminator::new(&mut ps, &cfg.discriminator, bins, norm, &mut rng(6))?;
        Ok(Self {
            ps,
            cfg: cfg.clone(),
            audio: audio.clone(),
            video: video.clone(),
            lip,
            face,
            prosody,
            generator,
            mpd,
            msd,
        })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }
}

/// Converts u8 pixels to a float tensor in [0, 1].
pub fn pixels(data: &[u8], shape: &[usize], dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = data.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Tensor::from_vec(v, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
