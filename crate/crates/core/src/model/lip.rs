//! Lip encoder: 3-D conv stages, a scaled residual block, a bidirectional GRU
//! and two heads (per-frame embedding, grapheme logits).

use candle_core::{Tensor, D};
use rand::Rng;

use crate::config::LipEncoderConfig;
use crate::data::text::VOCAB_SIZE;
use crate::error::{shape_err, Result};
use crate::nn::conv::ConvGeom;
use crate::nn::layers::{
    avg_pool_spatial, channel_dropout, leaky_relu, max_pool_spatial, BatchNorm, BiGru, Conv, Linear,
};
use crate::nn::{Mode, ParamStore};

pub const CROP: usize = 144;
/// Temporal convs in the stack; each widens the receptive field by one frame per side.
const TEMPORAL_HALO: usize = 5;
/// Frames per chunk when the conv stack runs chunked in eval mode.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone)]
pub struct LipEncoder {
    cfg: LipEncoderConfig,
    stages: Vec<(Conv, BatchNorm)>,
    res_conv1: Conv,
    res_bn: BatchNorm,
    res_conv2: Conv,
    gru: BiGru,
    embed: Linear,
    logits: Linear,
}

impl LipEncoder {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &LipEncoderConfig,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let geom = ConvGeom::conv3d(3, 1);
        let mut stages = Vec::new();
        let mut cin = channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            stages.push((
                Conv::new(
                    ps,
                    &format!("lip.conv{i}"),
                    cin,
                    c,
                    geom,
                    3,
                    true,
                    None,
                    rng,
                )?,
                BatchNorm::new(ps, &format!("lip.bn{i}"), c, rng)?,
            ));
            cin = c;
        }
        let mid = cfg.residual_mid;
        let res_conv1 = Conv::new(ps, "lip.res.conv1", cin, mid, geom, 3, true, None, rng)?;
        let res_bn = BatchNorm::new(ps, "lip.res.bn", mid, rng)?;
        let res_conv2 = Conv::new(ps, "lip.res.conv2", mid, cin, geom, 3, true, None, rng)?;
        let side = CROP / cfg.input_pool / cfg.stage_pool.pow(3) / cfg.post_pool;
        let flat = cin * side * side;
        let gru = BiGru::new(ps, "lip.gru", flat, cfg.gru_hidden, cfg.gru_layers, rng)?;
        let embed = Linear::new(ps, "lip.embed", 2 * cfg.gru_hidden, cfg.embed_dim, rng)?;
        let logits = Linear::new(ps, "lip.logits", cfg.embed_dim, VOCAB_SIZE, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            res_conv1,
            res_bn,
            res_conv2,
            gru,
            embed,
            logits,
        })
    }

    pub fn config(&self) -> &LipEncoderConfig {
        &self.cfg
    }

    /// Side length of the crop after the fixed input pooling.
    pub fn pooled_side(&self) -> usize {
        CROP / self.cfg.input_pool
    }

    /// Applies the fixed input pooling to `[B, T, C, 144, 144]` crops.
    pub fn pool_input(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        if h != CROP || w != CROP {
            return Err(shape_err!("lip crops must be {CROP}x{CROP}, got {h}x{w}"));
        }
        if self.cfg.input_pool == 1 {
            return Ok(x.clone());
        }
        let y = avg_pool_spatial(&x.reshape((b * t, c, h, w))?, self.cfg.input_pool)?;
        let s = self.pooled_side();
        Ok(y.reshape((b, t, c, s, s))?)
    }

    /// `[B, T, C, 144, 144]` crops in [0, 1] → embeddings `[B, T, D]`.
    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        self.forward_pooled(&self.pool_input(x)?, mode)
    }

    /// Residual block `x + scale * F(x)`, input `[B, C, T, H, W]`.
    pub fn residual(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let h = leaky_relu(
            &self
                .res_bn
                .forward(&self.res_conv1.forward(x, mode)?, mode)?,
            self.cfg.leaky_slope,
        )?;
        let f = self.res_conv2.forward(&h, mode)?;
        Ok((x + (f * self.cfg.residual_scale)?)?)
    }

    fn conv_stack(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, bn) in &self.stages {
            h = leaky_relu(
                &bn.forward(&conv.forward(&h, mode)?, mode)?,
                self.cfg.leaky_slope,
            )?;
            h = max_pool_spatial(&h, self.cfg.stage_pool)?;
        }
        h = self.residual(&h, mode)?;
        h = channel_dropout(&h, self.cfg.dropout, mode)?;
        if self.cfg.post_pool > 1 {
            h = max_pool_spatial(&h, self.cfg.post_pool)?;
        }
        Ok(h)
    }

    /// Runs the conv stack over overlapping time chunks. Exact in eval mode:
    /// every conv is time-local with a one-frame radius.
    fn conv_stack_chunked(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let t = x.dim(2)?;
        if mode.train || t <= EVAL_CHUNK + 2 * TEMPORAL_HALO {
            return self.conv_stack(x, mode);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < t {
            let len = EVAL_CHUNK.min(t - start);
            let lo = start.saturating_sub(TEMPORAL_HALO);
            let hi = (start + len + TEMPORAL_HALO).min(t);
            let y = self.conv_stack(&x.narrow(2, lo, hi - lo)?, mode)?;
            parts.push(y.narrow(2, start - lo, len)?);
            start += len;
        }
        Ok(Tensor::cat(&parts, 2)?)
    }

    /// Pooled crops `[B, T, C, S, S]` → embeddings `[B, T, D]`.
    pub fn forward_pooled(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let (b, t, _, h, w) = x.dims5()?;
        let s = self.pooled_side();
        if h != s || w != s {
            return Err(shape_err!("pooled lip crops must be {s}x{s}, got {h}x{w}"));
        }
        if t == 0 {
            return Err(shape_err!("lip sequence has no frames"));
        }
        let x = (x.permute((0, 2, 1, 3, 4))?.contiguous()? - 0.5)?;
        let h = self.conv_stack_chunked(&x, mode)?;
        let (_, ch, _, hh, hw) = h.dims5()?;
        let h = h
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((b, t, ch * hh * hw))?;
        let h = self.gru.forward(&h, mode)?;
        self.embed.forward(&h, mode)
    }

    /// Embeddings `[B, T, D]` → grapheme logits `[B, T, V]`.
    pub fn ctc_logits(&self, emb: &Tensor, mode: &Mode) -> Result<Tensor> {
        if emb.dim(D::Minus1)? != self.cfg.embed_dim {
            return Err(shape_err!(
                "ctc head expects embedding dim {}, got {:?}",
                self.cfg.embed_dim,
                emb.dims()
            ));
        }
        self.logits.forward(emb, mode)
    }

    pub fn logits_head(&self) -> &Linear {
        &self.logits
    }

    pub fn residual_convs(&self) -> (&Conv, &Conv) {
        (&self.res_conv1, &self.res_conv2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro(scale: f64) -> LipEncoder {
        let mut ps = ParamStore::new(DType::F64);
        let mut cfg = ModelConfig::micro().lip;
        cfg.residual_scale = scale;
        LipEncoder::new(&mut ps, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn rand(shape: &[usize]) -> Tensor {
        Tensor::rand(0.0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn shapes_and_errors() {
        let enc = micro(0.2);
        let e = enc
            .forward(&rand(&[2, 5, 3, 144, 144]), &mut Mode::eval())
            .unwrap();
        assert_eq!(e.dims(), [2, 5, 4]);
        assert_eq!(
            enc.ctc_logits(&e, &Mode::eval()).unwrap().dims(),
            [2, 5, 28]
        );
        let bad = rand(&[1, 5, 3, 128, 128]);
        assert_eq!(
            enc.forward(&bad, &mut Mode::eval()).unwrap_err().category(),
            "shape"
        );
    }

    #[test]
    fn zero_residual_branch_is_identity() {
        let enc = micro(0.2);
        let (_, c2) = enc.residual_convs();
        let zero = |v: &Var| v.set(&v.zeros_like().unwrap()).unwrap();
        zero(c2.weight());
        zero(c2.bias().unwrap());
        let x = rand(&[1, 4, 3, 3, 3]);
        assert_eq!(max_abs(&enc.residual(&x, &Mode::eval()).unwrap(), &x), 0.0);
    }

    #[test]
    fn zero_residual_scale_is_identity() {
        let enc = micro(0.0);
        let x = rand(&[2, 4, 3, 3, 3]);
        assert_eq!(max_abs(&enc.residual(&x, &Mode::eval()).unwrap(), &x), 0.0);
        let enc = micro(0.2);
        assert!(max_abs(&enc.residual(&x, &Mode::eval()).unwrap(), &x) > 0.0);
    }

    #[test]
    fn chunked_eval_matches_whole_sequence() {
        let enc = micro(0.2);
        let x = (rand(&[1, 3, 23, 12, 12]) - 0.5).unwrap();
        let whole = enc.conv_stack(&x, &mut Mode::eval()).unwrap();
        let chunked = enc.conv_stack_chunked(&x, &mut Mode::eval()).unwrap();
        assert!(max_abs(&whole, &chunked) < 1e-12);
    }
}
