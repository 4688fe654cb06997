//! Face encoder (residual 2-D CNN), prosody reference encoder over mel, and
//! the cosine alignment loss between their embeddings.

use candle_core::{Tensor, D};
use rand::Rng;

use super::MelNorm;
use crate::config::{FaceEncoderConfig, ProsodyEncoderConfig};
use crate::error::{invalid, shape_err, Result};
use crate::nn::conv::ConvGeom;
use crate::nn::layers::{
    avg_pool_spatial, dropout, leaky_relu, max_pool_spatial, to_host, BatchNorm, Conv, Gru, Linear,
};
use crate::nn::{Mode, ParamStore};

#[derive(Debug, Clone)]
struct ResStage {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct FaceEncoder {
    cfg: FaceEncoderConfig,
    size: usize,
    stages: Vec<ResStage>,
    proj: Linear,
}

impl FaceEncoder {
    /// `size` is the side of the square input image.
    pub fn new(
        ps: &mut ParamStore,
        cfg: &FaceEncoderConfig,
        channels: usize,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if size / cfg.input_pool / 16 == 0 {
            return Err(shape_err!(
                "face size {size} too small for input pool {} and 4 stages",
                cfg.input_pool
            ));
        }
        let g = ConvGeom::conv2d(3, 1, 1);
        let mut stages = Vec::new();
        let mut cin = channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let n = format!("face.stage{i}");
            stages.push(ResStage {
                conv1: Conv::new(ps, &format!("{n}.conv1"), cin, c, g, 2, false, None, rng)?,
                bn1: BatchNorm::new(ps, &format!("{n}.bn1"), c, rng)?,
                conv2: Conv::new(ps, &format!("{n}.conv2"), c, c, g, 2, false, None, rng)?,
                bn2: BatchNorm::new(ps, &format!("{n}.bn2"), c, rng)?,
                skip: if cin != c {
                    Some(Conv::new(
                        ps,
                        &format!("{n}.skip"),
                        cin,
                        c,
                        ConvGeom::conv2d(1, 1, 0),
                        2,
                        false,
                        None,
                        rng,
                    )?)
                } else {
                    None
                },
            });
            cin = c;
        }
        let proj = Linear::new(ps, "face.proj", cin, cfg.embed_dim, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            size,
            stages,
            proj,
        })
    }

    pub fn pooled_side(&self) -> usize {
        self.size / self.cfg.input_pool
    }

    /// Fixed input pooling of `[B, C, S, S]` images.
    pub fn pool_input(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.size || w != self.size {
            return Err(shape_err!(
                "face images must be {0}x{0}, got {h}x{w}",
                self.size
            ));
        }
        if self.cfg.input_pool == 1 {
            Ok(x.clone())
        } else {
            avg_pool_spatial(x, self.cfg.input_pool)
        }
    }

    /// `[B, C, S, S]` images in [0, 1] → embeddings `[B, D]`.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.forward_pooled(&self.pool_input(x)?, mode)
    }

    pub fn forward_pooled(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let s = self.pooled_side();
        if h != s || w != s {
            return Err(shape_err!(
                "pooled face images must be {s}x{s}, got {h}x{w}"
            ));
        }
        let slope = self.cfg.leaky_slope;
        let mut h = (x - 0.5)?;
        for st in &self.stages {
            let y = leaky_relu(&st.bn1.forward(&st.conv1.forward(&h, mode)?, mode)?, slope)?;
            let y = st.bn2.forward(&st.conv2.forward(&y, mode)?, mode)?;
            let s = match &st.skip {
                Some(c) => c.forward(&h, mode)?,
                None => h.clone(),
            };
            h = max_pool_spatial(&leaky_relu(&(y + s)?, slope)?, 2)?;
            h = dropout(&h, self.cfg.dropout, mode)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        self.proj.forward(&pooled, mode)
    }
}

/// Reference encoder: strided 2-D convs over (time, frequency), a GRU over
/// the remaining frames, and a projection of its final state.
#[derive(Debug, Clone)]
pub struct ProsodyEncoder {
    convs: Vec<(Conv, BatchNorm)>,
    gru: Gru,
    proj: Linear,
    norm: MelNorm,
    bins: usize,
}

/// Shortest mel accepted by the prosody encoder.
pub const MIN_PROSODY_FRAMES: usize = 16;

impl ProsodyEncoder {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &ProsodyEncoderConfig,
        bins: usize,
        norm: MelNorm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = ConvGeom::conv2d(3, 2, 1);
        let mut convs = Vec::new();
        let mut cin = 1;
        let mut f = bins;
        for (i, &c) in cfg.conv_channels.iter().enumerate() {
            convs.push((
                Conv::new(
                    ps,
                    &format!("prosody.conv{i}"),
                    cin,
                    c,
                    g,
                    2,
                    false,
                    None,
                    rng,
                )?,
                BatchNorm::new(ps, &format!("prosody.bn{i}"), c, rng)?,
            ));
            cin = c;
            f = g
                .out_len(2, f)
                .ok_or_else(|| shape_err!("mel bins {bins} too few for the prosody conv stack"))?;
        }
        let gru = Gru::new(ps, "prosody.gru", cin * f, cfg.gru_hidden, rng)?;
        let proj = Linear::new(ps, "prosody.proj", cfg.gru_hidden, cfg.embed_dim, rng)?;
        Ok(Self {
            convs,
            gru,
            proj,
            norm,
            bins,
        })
    }

    /// Mel `[B, bins, T]` (log power) → embeddings `[B, D]`.
    pub fn forward(&self, mel: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, bins, t) = mel.dims3()?;
        if bins != self.bins {
            return Err(shape_err!(
                "prosody encoder expects {} mel bins, got {bins}",
                self.bins
            ));
        }
        if t < MIN_PROSODY_FRAMES {
            return Err(shape_err!(
                "prosody encoder needs at least {MIN_PROSODY_FRAMES} frames, got {t}"
            ));
        }
        let mut h = self
            .norm
            .normalize(mel)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, 1, t, bins))?;
        for (conv, bn) in &self.convs {
            h = leaky_relu(&bn.forward(&conv.forward(&h, mode)?, mode)?, 0.0)?;
        }
        let (_, c, tt, f) = h.dims4()?;
        let h = h
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, tt, c * f))?;
        let (_, last) = self.gru.forward(&h, false, mode)?;
        self.proj.forward(&last, mode)
    }
}

/// Mean over the batch of `1 - cos(f_i, p_i)` for `[B, D]` inputs.
/// Zero vectors are rejected since their direction is undefined.
pub fn cs_loss(f: &Tensor, p: &Tensor) -> Result<Tensor> {
    if f.dims() != p.dims() || f.rank() != 2 {
        return Err(shape_err!(
            "cs loss expects equal [B, D] inputs, got {:?} and {:?}",
            f.dims(),
            p.dims()
        ));
    }
    let nf = f.sqr()?.sum(1)?.sqrt()?;
    let np = p.sqr()?.sum(1)?.sqrt()?;
    if to_host(&nf)?
        .iter()
        .chain(&to_host(&np)?)
        .any(|&n| n == 0.0)
    {
        return Err(invalid!("cosine similarity of a zero vector is undefined"));
    }
    let cos = (f * p)?.sum(1)?.div(&(nf * np)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}
