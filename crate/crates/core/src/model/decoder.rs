//! Mel generator with multi-receptive-field fusion, period and scale
//! discriminators over mel, and the adversarial loss terms.

use candle_core::{Tensor, D};
use rand::Rng;

use super::MelNorm;
use crate::config::{DiscriminatorConfig, GeneratorConfig};
use crate::error::{shape_err, Result};
use crate::nn::conv::ConvGeom;
use crate::nn::layers::{avg_pool_time, leaky_relu, reflect_pad_right, Conv, ConvTranspose1d};
use crate::nn::{Mode, ParamStore};

/// Joins per-frame lip embeddings `[B, T, Dl]` with one face embedding per
/// utterance `[B, Df]` into conditions `[B, T, Dl + Df]`.
pub fn concat_condition(lip: &Tensor, face: &Tensor) -> Result<Tensor> {
    let (b, t, _) = lip.dims3()?;
    let (bf, df) = face.dims2()?;
    if b != bf {
        return Err(shape_err!("{b} lip sequences but {bf} face embeddings"));
    }
    let f = face.unsqueeze(1)?.broadcast_as((b, t, df))?;
    Ok(Tensor::cat(&[lip, &f.contiguous()?], 2)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    convs1: Vec<Conv>,
    convs2: Vec<Conv>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        ch: usize,
        k: usize,
        dilations: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs1 = Vec::new();
        let mut convs2 = Vec::new();
        for (j, &d) in dilations.iter().enumerate() {
            let g1 = ConvGeom::conv1d(k, 1, d * (k - 1) / 2, d, 1);
            let g2 = ConvGeom::conv1d(k, 1, (k - 1) / 2, 1, 1);
            convs1.push(Conv::new(
                ps,
                &format!("{name}.c1_{j}"),
                ch,
                ch,
                g1,
                1,
                true,
                None,
                rng,
            )?);
            convs2.push(Conv::new(
                ps,
                &format!("{name}.c2_{j}"),
                ch,
                ch,
                g2,
                1,
                true,
                None,
                rng,
            )?);
        }
        Ok(Self { convs1, convs2 })
    }

    fn forward(&self, x: &Tensor, slope: f64, mode: &Mode) -> Result<Tensor> {
        let mut x = x.clone();
        for (c1, c2) in self.convs1.iter().zip(&self.convs2) {
            let h = c1.forward(&leaky_relu(&x, slope)?, mode)?;
            let h = c2.forward(&leaky_relu(&h, slope)?, mode)?;
            x = (x + h)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    pre: Conv,
    ups: Vec<ConvTranspose1d>,
    mrf: Vec<Vec<ResBlock>>,
    post: Conv,
    norm: MelNorm,
    cond_dim: usize,
}

impl Generator {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &GeneratorConfig,
        cond_dim: usize,
        bins: usize,
        norm: MelNorm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ch0 = cfg.initial_channels;
        let pre = Conv::new(
            ps,
            "gen.pre",
            cond_dim,
            ch0,
            ConvGeom::conv1d(cfg.pre_kernel, 1, (cfg.pre_kernel - 1) / 2, 1, 1),
            1,
            true,
            None,
            rng,
        )?;
        let mut ups = Vec::new();
        let mut mrf = Vec::new();
        let mut ch = ch0;
        for (i, (&r, &k)) in cfg
            .upsample_rates
            .iter()
            .zip(&cfg.upsample_kernels)
            .enumerate()
        {
            let next = ch / 2;
            ups.push(ConvTranspose1d::new(
                ps,
                &format!("gen.up{i}"),
                ch,
                next,
                k,
                r,
                None,
                rng,
            )?);
            let blocks = cfg
                .resblock_kernels
                .iter()
                .enumerate()
                .map(|(j, &rk)| {
                    ResBlock::new(
                        ps,
                        &format!("gen.mrf{i}.{j}"),
                        next,
                        rk,
                        &cfg.resblock_dilations,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            mrf.push(blocks);
            ch = next;
        }
        let post = Conv::new(
            ps,
            "gen.post",
            ch,
            bins,
            ConvGeom::conv1d(cfg.post_kernel, 1, (cfg.post_kernel - 1) / 2, 1, 1),
            1,
            true,
            None,
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            pre,
            ups,
            mrf,
            post,
            norm,
            cond_dim,
        })
    }

    /// Conditions `[B, T, Dc]` → log-mel `[B, bins, T * upsample]`.
    pub fn forward(&self, cond: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (_, t, dc) = cond.dims3()?;
        if dc != self.cond_dim || t == 0 {
            return Err(shape_err!(
                "generator expects [B, T>0, {}], got {:?}",
                self.cond_dim,
                cond.dims()
            ));
        }
        let slope = self.cfg.leaky_slope;
        let mut x = self
            .pre
            .forward(&cond.transpose(1, 2)?.contiguous()?, mode)?;
        for (up, blocks) in self.ups.iter().zip(&self.mrf) {
            x = up.forward(&leaky_relu(&x, slope)?, mode)?;
            let mut sum: Option<Tensor> = None;
            for b in blocks {
                let y = b.forward(&x, slope, mode)?;
                sum = Some(match sum {
                    None => y,
                    Some(s) => (s + y)?,
                });
            }
            x = (sum.expect("at least one MRF branch") / blocks.len() as f64)?;
        }
        let y = self.post.forward(&leaky_relu(&x, slope)?, mode)?;
        self.norm.denormalize(&y)
    }
}

/// Output of one sub-discriminator.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct PeriodDisc {
    period: usize,
    convs: Vec<Conv>,
    post: Conv,
}

#[derive(Debug, Clone)]
struct ScaleDisc {
    convs: Vec<Conv>,
    post: Conv,
}

/// Period discriminators: mel `[B, bins, T]` is reflect-padded to a multiple
/// of the period and folded to `[B, bins, T/p, p]` for 2-D convs over time.
#[derive(Debug, Clone)]
pub struct PeriodDiscriminator {
    discs: Vec<PeriodDisc>,
    slope: f64,
    norm: MelNorm,
}

impl PeriodDiscriminator {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &DiscriminatorConfig,
        bins: usize,
        norm: MelNorm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = cfg.mpd_kernel;
        let mut discs = Vec::new();
        for &p in &cfg.periods {
            let mut convs = Vec::new();
            let mut cin = bins;
            for (i, &c) in cfg.mpd_channels.iter().enumerate() {
                let stride = if i + 1 == cfg.mpd_channels.len() {
                    1
                } else {
                    cfg.mpd_stride
                };
                let g = ConvGeom {
                    kernel: [1, k, 1],
                    stride: [1, stride, 1],
                    padding: [0, (k - 1) / 2, 0],
                    dilation: [1; 3],
                    groups: 1,
                };
                convs.push(Conv::new(
                    ps,
                    &format!("mpd.p{p}.conv{i}"),
                    cin,
                    c,
                    g,
                    2,
                    true,
                    None,
                    rng,
                )?);
                cin = c;
            }
            let g = ConvGeom {
                kernel: [1, 3, 1],
                stride: [1; 3],
                padding: [0, 1, 0],
                dilation: [1; 3],
                groups: 1,
            };
            let post = Conv::new(ps, &format!("mpd.p{p}.post"), cin, 1, g, 2, true, None, rng)?;
            discs.push(PeriodDisc {
                period: p,
                convs,
                post,
            });
        }
        Ok(Self {
            discs,
            slope: cfg.leaky_slope,
            norm,
        })
    }

    pub fn forward(&self, mel: &Tensor, mode: &Mode) -> Result<Vec<DiscOutput>> {
        let x = self.norm.normalize(mel)?;
        let (b, c, t) = x.dims3()?;
        let mut out = Vec::new();
        for d in &self.discs {
            let p = d.period;
            let pad = (p - t % p) % p;
            let xp = reflect_pad_right(&x, pad)?;
            let mut h = xp.reshape((b, c, (t + pad) / p, p))?;
            let mut features = Vec::new();
            for conv in &d.convs {
                h = leaky_relu(&conv.forward(&h, mode)?, self.slope)?;
                features.push(h.clone());
            }
            let score = d.post.forward(&h, mode)?;
            features.push(score.clone());
            out.push(DiscOutput { score, features });
        }
        Ok(out)
    }
}

/// Scale discriminators: grouped 1-D convs over mel-as-channels at the
/// input rate and successively 2x average-pooled rates.
#[derive(Debug, Clone)]
pub struct ScaleDiscriminator {
    discs: Vec<ScaleDisc>,
    slope: f64,
    norm: MelNorm,
}

impl ScaleDiscriminator {
    pub fn new(
        ps: &mut ParamStore,
        cfg: &DiscriminatorConfig,
        bins: usize,
        norm: MelNorm,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.msd_channels.first() != Some(&bins) {
            return Err(shape_err!(
                "first scale-discriminator size must equal mel bins {bins}"
            ));
        }
        let mut discs = Vec::new();
        for s in 0..cfg.msd_scales {
            let mut convs = Vec::new();
            for i in 0..cfg.msd_channels.len() - 1 {
                let k = cfg.msd_kernels[i];
                let g = ConvGeom::conv1d(k, cfg.msd_strides[i], (k - 1) / 2, 1, cfg.msd_groups[i]);
                let (cin, cout) = (cfg.msd_channels[i], cfg.msd_channels[i + 1]);
                convs.push(Conv::new(
                    ps,
                    &format!("msd.s{s}.conv{i}"),
                    cin,
                    cout,
                    g,
                    1,
                    true,
                    None,
                    rng,
                )?);
            }
            let last = *cfg.msd_channels.last().unwrap();
            let post = Conv::new(
                ps,
                &format!("msd.s{s}.post"),
                last,
                1,
                ConvGeom::conv1d(3, 1, 1, 1, 1),
                1,
                true,
                None,
                rng,
            )?;
            discs.push(ScaleDisc { convs, post });
        }
        Ok(Self {
            discs,
            slope: cfg.leaky_slope,
            norm,
        })
    }

    pub fn forward(&self, mel: &Tensor, mode: &Mode) -> Result<Vec<DiscOutput>> {
        let mut x = self.norm.normalize(mel)?;
        let mut out = Vec::new();
        for (s, d) in self.discs.iter().enumerate() {
            if s > 0 {
                x = avg_pool_time(&x, 2)?;
            }
            let mut h = x.clone();
            let mut features = Vec::new();
            for conv in &d.convs {
                h = leaky_relu(&conv.forward(&h, mode)?, self.slope)?;
                features.push(h.clone());
            }
            let score = d.post.forward(&h, mode)?;
            features.push(score.clone());
            out.push(DiscOutput { score, features });
        }
        Ok(out)
    }
}

/// Least-squares discriminator loss: real scores toward 1, fake toward 0.
pub fn disc_loss(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Tensor> {
    let mut total = Tensor::new(0.0, real[0].score.device())?.to_dtype(real[0].score.dtype())?;
    for (r, f) in real.iter().zip(fake) {
        let lr = r.score.affine(-1.0, 1.0)?.sqr()?.mean_all()?;
        let lf = f.score.sqr()?.mean_all()?;
        total = (total + lr + lf)?;
    }
    Ok(total)
}

/// Least-squares generator loss: fake scores toward 1.
pub fn gen_adv_loss(fake: &[DiscOutput]) -> Result<Tensor> {
    let mut total = Tensor::new(0.0, fake[0].score.device())?.to_dtype(fake[0].score.dtype())?;
    for f in fake {
        total = (total + f.score.affine(-1.0, 1.0)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

/// Sum over discriminators and layers of the mean absolute feature difference.
/// Real features are treated as constants.
pub fn feature_loss(real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Tensor> {
    let mut total = Tensor::new(0.0, fake[0].score.device())?.to_dtype(fake[0].score.dtype())?;
    for (r, f) in real.iter().zip(fake) {
        for (fr, ff) in r.features.iter().zip(&f.features) {
            total = (total + (ff - fr.detach())?.abs()?.mean_all()?)?;
        }
    }
    Ok(total)
}

/// Mean absolute difference of two equally shaped mels.
pub fn mel_l1_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(shape_err!(
            "mel shapes differ: {:?} vs {:?}",
            real.dims(),
            fake.dims()
        ));
    }
    Ok((real - fake)?.abs()?.mean_all()?)
}

/// Waveform-domain proxy: L1 between linear magnitudes recovered from both
/// mels through the filterbank pseudo-inverse `[n_freq, bins]`.
pub fn vocoder_loss(real: &Tensor, fake: &Tensor, inverse: &Tensor, floor: f64) -> Result<Tensor> {
    let mag = |m: &Tensor| -> Result<Tensor> {
        let b = m.dim(0)?;
        let p = (m.exp()? - floor)?.relu()?;
        let lin = inverse.to_dtype(m.dtype())?.broadcast_left(b)?.matmul(&p)?;
        Ok((lin.relu()? + 1e-12)?.sqrt()?)
    };
    Ok((mag(real)? - mag(fake)?)?.abs()?.mean_all()?)
}

/// Scalar values of every loss term of one joint step. Each term is stored
/// as it enters the total (weight applied); `mel_l1` is the unweighted
/// reconstruction error reported alongside.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub adv_disc: f64,
    pub adv_gen: f64,
    pub feature_match: f64,
    pub mel: f64,
    pub cs: f64,
    pub vocoder: f64,
    pub total: f64,
    pub mel_l1: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 8] = [
        "adv_disc",
        "adv_gen",
        "feature_match",
        "mel",
        "cs",
        "vocoder",
        "total",
        "mel_l1",
    ];

    /// Builds a bundle from weighted terms; `total` is their sum.
    pub fn from_terms(
        adv_disc: f64,
        adv_gen: f64,
        feature_match: f64,
        mel: f64,
        cs: f64,
        vocoder: f64,
        mel_l1: f64,
    ) -> Self {
        let mut b = Self {
            adv_disc,
            adv_gen,
            feature_match,
            mel,
            cs,
            vocoder,
            total: 0.0,
            mel_l1,
        };
        b.total = b.component_sum();
        b
    }

    /// Sum of the weighted terms in a fixed order.
    pub fn component_sum(&self) -> f64 {
        self.adv_disc + self.adv_gen + self.feature_match + self.mel + self.cs + self.vocoder
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_disc,
            self.adv_gen,
            self.feature_match,
            self.mel,
            self.cs,
            self.vocoder,
            self.total,
            self.mel_l1,
        ]
    }
}

/// Adversarial, feature-matching and mel terms for a real/fake pair under
/// both discriminator families. The fake mel is detached for the
/// discriminator term; cs and vocoder terms are left at zero.
pub fn gan_losses(
    real: &Tensor,
    fake: &Tensor,
    mpd: &PeriodDiscriminator,
    msd: &ScaleDiscriminator,
    fm_weight: f64,
    mel_weight: f64,
    mode: &Mode,
) -> Result<LossBundle> {
    let scalar = |t: Tensor| -> Result<f64> {
        Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    };
    let l1 = scalar(mel_l1_loss(real, fake)?)?;
    let both = |m: &Tensor| -> Result<Vec<DiscOutput>> {
        let mut o = mpd.forward(m, mode)?;
        o.extend(msd.forward(m, mode)?);
        Ok(o)
    };
    let r = both(real)?;
    let f_det = both(&fake.detach())?;
    let f = both(fake)?;
    Ok(LossBundle::from_terms(
        scalar(disc_loss(&r, &f_det)?)?,
        scalar(gen_adv_loss(&f)?)?,
        fm_weight * scalar(feature_loss(&r, &f)?)?,
        mel_weight * l1,
        0.0,
        0.0,
        l1,
    ))
}

/// Score-map elementwise variance, used to check sub-discriminators are not constant.
pub fn score_variance(o: &DiscOutput) -> Result<f64> {
    let s = o.score.flatten_all()?;
    let m = s.mean_all()?;
    Ok(s.broadcast_sub(&m)?
        .sqr()?
        .mean(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AudioConfig, ModelConfig};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norm() -> MelNorm {
        MelNorm::new(&AudioConfig::default())
    }

    #[test]
    fn condition_rows_share_the_face_block() {
        let lip = Tensor::rand(0.0f64, 1.0, (2, 5, 3), &Device::Cpu).unwrap();
        let face = Tensor::new(&[[1e-9f64, 0.0], [0.5, 2.0]], &Device::Cpu).unwrap();
        let c = concat_condition(&lip, &face).unwrap();
        assert_eq!(c.dims(), [2, 5, 5]);
        let v: Vec<Vec<Vec<f64>>> = c.to_vec3().unwrap();
        let l: Vec<Vec<Vec<f64>>> = lip.to_vec3().unwrap();
        for b in 0..2 {
            for t in 0..5 {
                assert_eq!(&v[b][t][..3], &l[b][t][..]);
                assert_eq!(v[b][t][3..], [[1e-9, 0.0], [0.5, 2.0]][b]);
            }
        }
        assert!(concat_condition(&lip, &face.narrow(0, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn generator_doubles_length() {
        let m = ModelConfig::micro();
        let mut ps = ParamStore::new(DType::F64);
        let g = Generator::new(
            &mut ps,
            &m.generator,
            8,
            80,
            norm(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for t in [1, 2, 7, 10] {
            let c = Tensor::rand(-1.0f64, 1.0, (1, t, 8), &Device::Cpu).unwrap();
            assert_eq!(g.forward(&c, &Mode::eval()).unwrap().dims(), [1, 80, 2 * t]);
        }
    }

    #[test]
    fn discriminators_emit_one_output_per_sub_discriminator() {
        let m = ModelConfig::micro();
        let mut ps = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mpd =
            PeriodDiscriminator::new(&mut ps, &m.discriminator, 80, norm(), &mut rng).unwrap();
        let msd = ScaleDiscriminator::new(&mut ps, &m.discriminator, 80, norm(), &mut rng).unwrap();
        for t in [150, 151] {
            let mel = Tensor::rand(-11.0f64, 2.0, (2, 80, t), &Device::Cpu).unwrap();
            let a = mpd.forward(&mel, &Mode::eval()).unwrap();
            let b = msd.forward(&mel, &Mode::eval()).unwrap();
            assert_eq!((a.len(), b.len()), (3, 3));
            for o in a.iter().chain(&b) {
                assert_eq!(o.features.len(), 6);
                assert!(score_variance(o).unwrap() > 0.0);
            }
        }
    }

    fn outputs(scores: &[f64]) -> Vec<DiscOutput> {
        scores
            .iter()
            .map(|&s| DiscOutput {
                score: Tensor::full(s, (1, 1, 4), &Device::Cpu).unwrap(),
                features: vec![Tensor::full(s, (1, 2), &Device::Cpu).unwrap()],
            })
            .collect()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn least_squares_optima() {
        assert_eq!(
            scalar(disc_loss(&outputs(&[1.0, 1.0]), &outputs(&[0.0, 0.0])).unwrap()),
            0.0
        );
        assert_eq!(scalar(gen_adv_loss(&outputs(&[1.0, 1.0])).unwrap()), 0.0);
        assert_eq!(
            scalar(disc_loss(&outputs(&[0.0]), &outputs(&[1.0])).unwrap()),
            2.0
        );
        assert_eq!(
            scalar(feature_loss(&outputs(&[0.3]), &outputs(&[0.3])).unwrap()),
            0.0
        );
        assert!(
            (scalar(feature_loss(&outputs(&[0.3]), &outputs(&[0.5])).unwrap()) - 0.2).abs() < 1e-12
        );
    }

    #[test]
    fn mel_l1_values() {
        let a = Tensor::rand(-5.0f64, 0.0, (1, 80, 10), &Device::Cpu).unwrap();
        assert_eq!(scalar(mel_l1_loss(&a, &a).unwrap()), 0.0);
        assert!((scalar(mel_l1_loss(&a, &(&a + 1.0).unwrap()).unwrap()) - 1.0).abs() < 1e-12);
        assert!(mel_l1_loss(&a, &a.narrow(2, 0, 5).unwrap()).is_err());
    }
}
