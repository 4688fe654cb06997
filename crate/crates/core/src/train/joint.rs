//! Joint optimisation of the generator path against the total loss, with an
//! alternating least-squares discriminator update per step.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::stages::{prosody_targets, rows};
use super::{descend, run_stage, scalar, Checkpoint, Stage, StageOptions, StageReport, StageTrainer};
use crate::config::{RunConfig, StageConfig};
use crate::dsp::MelFilterbank;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::features::{batches, FeatureSet};
use crate::model::decoder::{
    disc_loss, feature_loss, gen_adv_loss, mel_l1_loss, vocoder_loss, DiscOutput,
};
use crate::model::{
    concat_condition, cs_loss, LossBundle, Models, FACE, GENERATOR, LIP, MPD, MSD, PROSODY,
};
use crate::nn::{AdamW, Mode, ParamStore};

const ALL: &[&str] = &[LIP, FACE, PROSODY, GENERATOR, MPD, MSD];

pub struct JointTrainer<'a> {
    models: &'a Models,
    cfg: RunConfig,
    sc: StageConfig,
    train: &'a FeatureSet,
    val: &'a FeatureSet,
    /// Lip embeddings `[N, T, D]` when the lip encoder is frozen.
    lip_train: Option<Tensor>,
    lip_val: Option<Tensor>,
    p_train: Tensor,
    opt_g: AdamW,
    opt_d: AdamW,
    /// Filterbank pseudo-inverse `[n_freq, bins]` for the vocoder term.
    inverse: Option<Tensor>,
    exec: Exec,
}

fn lip_cache(models: &Models, set: &FeatureSet, exec: Exec) -> Result<Tensor> {
    let mut parts = Vec::new();
    for b in batches(set.len(), 16) {
        let mut mode = Mode::eval().with_exec(exec);
        parts.push(
            models
                .lip
                .forward_pooled(&set.lips(&b, models.dtype())?, &mut mode)?,
        );
    }
    if parts.is_empty() {
        let [t, ..] = set.lip_dims;
        return Ok(Tensor::zeros(
            (0, t, models.cfg.lip.embed_dim),
            models.dtype(),
            &Device::Cpu,
        )?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

impl<'a> JointTrainer<'a> {
    pub fn new(
        models: &'a Models,
        cfg: &RunConfig,
        train: &'a FeatureSet,
        val: &'a FeatureSet,
        exec: Exec,
    ) -> Result<Self> {
        let t = &cfg.train;
        let sc = t.joint.clone();
        let mut g_prefixes = vec![GENERATOR];
        if t.train_face_in_joint {
            g_prefixes.push(FACE);
        }
        if t.finetune_lip {
            g_prefixes.push(LIP);
        }
        let opt_g = AdamW::new(sc.optimizer.clone(), models.ps.trainable(&g_prefixes));
        let opt_d = AdamW::new(sc.optimizer.clone(), models.ps.trainable(&[MPD, MSD]));
        let (lip_train, lip_val) = if t.finetune_lip {
            (None, None)
        } else {
            (
                Some(lip_cache(models, train, exec)?),
                Some(lip_cache(models, val, exec)?),
            )
        };
        let inverse = if t.weights.vocoder > 0.0 {
            let fb = MelFilterbank::new(&cfg.audio);
            Some(
                Tensor::from_vec(fb.pseudo_inverse_matrix(), (fb.n_freq, fb.bins), &Device::Cpu)?
                    .to_dtype(models.dtype())?,
            )
        } else {
            None
        };
        Ok(Self {
            models,
            cfg: cfg.clone(),
            sc,
            train,
            val,
            lip_train,
            lip_val,
            p_train: prosody_targets(models, train, exec)?,
            opt_g,
            opt_d,
            inverse,
            exec,
        })
    }

    fn both(&self, mel: &Tensor, mode: &Mode) -> Result<Vec<DiscOutput>> {
        let mut o = self.models.mpd.forward(mel, mode)?;
        o.extend(self.models.msd.forward(mel, mode)?);
        Ok(o)
    }

    /// Generated mels for `idx` of `set` in eval mode.
    pub fn generate(&self, set: &FeatureSet, idx: &[usize], cache: Option<&Tensor>) -> Result<Tensor> {
        let m = self.models;
        let mut mode = Mode::eval().with_exec(self.exec);
        let lip = match cache {
            Some(c) => rows(c, idx)?,
            None => m.lip.forward_pooled(&set.lips(idx, m.dtype())?, &mut mode)?,
        };
        let f = m.face.forward_pooled(&set.faces(idx, m.dtype())?, &mut mode)?;
        m.generator.forward(&concat_condition(&lip, &f)?, &mode)
    }

    /// Mean unweighted mel L1 over the validation split.
    pub fn val_mel_l1(&self) -> Result<f64> {
        let mut total = 0.0;
        for b in batches(self.val.len(), self.sc.batch_size) {
            let fake = self.generate(self.val, &b, self.lip_val.as_ref())?;
            let real = self.val.mels(&b, self.models.dtype())?;
            total += scalar(&mel_l1_loss(&real, &fake)?)? * b.len() as f64;
        }
        Ok(total / self.val.len().max(1) as f64)
    }

    /// One discriminator update followed by one generator-path update on the
    /// training items `batch`.
    pub fn step_bundle(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<LossBundle> {
        let m = self.models;
        let t = &self.cfg.train;
        let w = &t.weights;
        let dtype = m.dtype();
        let mut mode = Mode::train(rng).with_exec(self.exec);
        let lip = match &self.lip_train {
            Some(c) => rows(c, batch)?,
            None => m
                .lip
                .forward_pooled(&self.train.lips(batch, dtype)?, &mut mode)?,
        };
        let faces = self.train.faces(batch, dtype)?;
        let f = if t.train_face_in_joint {
            m.face.forward_pooled(&faces, &mut mode)?
        } else {
            m.face
                .forward_pooled(&faces, &mut Mode::eval().with_exec(self.exec))?
        };
        let fake = m.generator.forward(&concat_condition(&lip, &f)?, &mode)?;
        let real = self.train.mels(batch, dtype)?;

        // Discriminator step on the detached fake.
        let dmode = Mode::eval_tracked().with_exec(self.exec);
        let d_loss = disc_loss(&self.both(&real, &dmode)?, &self.both(&fake.detach(), &dmode)?)?;
        let adv_disc = scalar(&d_loss)?;
        descend(&d_loss, &mut self.opt_d)?;

        // Generator step through frozen discriminator weights.
        let gmode = Mode::eval().with_exec(self.exec);
        let real_out = self.both(&real, &gmode)?;
        let fake_out = self.both(&fake, &gmode)?;
        let adv = gen_adv_loss(&fake_out)?;
        let fm = feature_loss(&real_out, &fake_out)?;
        let mel = mel_l1_loss(&real, &fake)?;
        let cs = cs_loss(&f, &rows(&self.p_train, batch)?)?;
        let mut g_loss = ((adv.clone() + (fm.clone() * w.fm)?)? + (mel.clone() * w.mel)?)?;
        if w.cs > 0.0 && t.train_face_in_joint {
            g_loss = (g_loss + (cs.clone() * w.cs)?)?;
        }
        let mut voc = 0.0;
        if let Some(inv) = &self.inverse {
            let v = vocoder_loss(&real, &fake, inv, self.cfg.audio.mel_floor)?;
            voc = scalar(&v)?;
            g_loss = (g_loss + (v * w.vocoder)?)?;
        }
        let mel_l1 = scalar(&mel)?;
        let bundle = LossBundle::from_terms(
            adv_disc,
            scalar(&adv)?,
            w.fm * scalar(&fm)?,
            w.mel * mel_l1,
            w.cs * scalar(&cs)?,
            w.vocoder * voc,
            mel_l1,
        );
        descend(&g_loss, &mut self.opt_g)?;
        Ok(bundle)
    }
}

impl StageTrainer for JointTrainer<'_> {
    fn stage(&self) -> Stage {
        Stage::Joint
    }
    fn stage_config(&self) -> &StageConfig {
        &self.sc
    }
    fn n_train(&self) -> usize {
        self.train.len()
    }
    fn term_names(&self) -> Vec<&'static str> {
        LossBundle::NAMES.to_vec()
    }
    fn step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(self.step_bundle(batch, rng)?.values().to_vec())
    }
    fn metric_name(&self) -> &'static str {
        "mel_l1"
    }
    fn validate(&mut self) -> Result<f64> {
        if self.val.is_empty() {
            return Err(crate::error::invalid!("joint validation split is empty"));
        }
        self.val_mel_l1()
    }
    fn optimizers(&mut self) -> Vec<(&'static str, &mut AdamW)> {
        vec![("generator", &mut self.opt_g), ("discriminator", &mut self.opt_d)]
    }
    fn model(&self) -> (&ParamStore, &'static [&'static str]) {
        (&self.models.ps, ALL)
    }
}

/// Loads the three pretrained stage outputs into `models` and runs joint
/// training. Modules without a checkpoint (generator, discriminators) keep
/// their fresh initialization; the load reports are logged.
pub fn train_joint(
    models: &Models,
    cfg: &RunConfig,
    train: &FeatureSet,
    val: &FeatureSet,
    pretrained: &[&Checkpoint],
    opts: &StageOptions,
) -> Result<StageReport> {
    for need in [Stage::Prosody, Stage::Lip, Stage::Face] {
        if !pretrained.iter().any(|c| c.header.stage == need) {
            return Err(Error::Checkpoint(format!(
                "joint training needs a {need} checkpoint"
            )));
        }
    }
    // Applied on resume too: frozen-module caches are built before the
    // saved state is restored.
    for ck in pretrained {
        let r = ck.apply(&models.ps)?;
        log::info!(
            "loaded {} checkpoint: {} entries, {} left at initialization",
            ck.header.stage,
            r.loaded.len(),
            r.missing.len()
        );
    }
    let mut t = JointTrainer::new(models, cfg, train, val, opts.exec)?;
    run_stage(&mut t, cfg, opts)
}
