//! Single-module pretraining stages.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{descend, run_stage, scalar, Stage, StageOptions, StageReport, StageTrainer};
use crate::config::{RunConfig, StageConfig};
use crate::ctc::ctc_loss;
use crate::data::render::mix_seed;
use crate::error::{invalid, Result};
use crate::eval::{edit_counts, Unit};
use crate::exec::Exec;
use crate::features::{batches, FeatureSet};
use crate::infer::transcribe;
use crate::model::{cs_loss, Models, FACE, LIP, PROSODY};
use crate::nn::layers::Linear;
use crate::nn::{AdamW, Mode, ParamStore};

/// Speaker-classification pretraining of the prosody reference encoder. The
/// linear head lives in its own store and is discarded with the stage.
pub struct ProsodyTrainer<'a> {
    models: &'a Models,
    sc: StageConfig,
    train: &'a FeatureSet,
    val: &'a FeatureSet,
    head_store: ParamStore,
    head: Linear,
    opt: AdamW,
    exec: Exec,
}

impl<'a> ProsodyTrainer<'a> {
    pub fn new(
        models: &'a Models,
        cfg: &RunConfig,
        train: &'a FeatureSet,
        val: &'a FeatureSet,
        exec: Exec,
    ) -> Result<Self> {
        let speakers: BTreeSet<usize> = train.items.iter().map(|u| u.speaker).collect();
        if speakers.len() < 2 {
            return Err(invalid!(
                "speaker classification needs at least 2 speakers in the train split, found {}",
                speakers.len()
            ));
        }
        let mut head_store = ParamStore::new(models.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x4EAD, 0));
        let head = Linear::new(
            &mut head_store,
            "speaker_head",
            models.cfg.prosody.embed_dim,
            train.speakers.len(),
            &mut rng,
        )?;
        let sc = cfg.train.prosody.clone();
        let mut vars = models.ps.trainable(&[PROSODY]);
        vars.extend(head_store.trainable(&[""]));
        let opt = AdamW::new(sc.optimizer.clone(), vars);
        Ok(Self {
            models,
            sc,
            train,
            val,
            head_store,
            head,
            opt,
            exec,
        })
    }

    fn logits(&self, set: &FeatureSet, idx: &[usize], mode: &mut Mode) -> Result<Tensor> {
        let mel = set.mels(idx, self.models.dtype())?;
        let p = self.models.prosody.forward(&mel, mode)?;
        self.head.forward(&p, mode)
    }

    /// `(mean cross-entropy, accuracy)` over the validation split.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let (mut ce, mut correct) = (0.0, 0usize);
        for b in batches(self.val.len(), self.sc.batch_size) {
            let mut mode = Mode::eval().with_exec(self.exec);
            let logits = self.logits(self.val, &b, &mut mode)?;
            let labels = self.val.labels(&b);
            let target = Tensor::new(labels.as_slice(), &Device::Cpu)?;
            ce += scalar(&candle_nn::loss::cross_entropy(&logits, &target)?)? * b.len() as f64;
            let pred = logits.argmax(1)?.to_vec1::<u32>()?;
            correct += pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
        }
        let n = self.val.len().max(1) as f64;
        Ok((ce / n, correct as f64 / n))
    }
}

impl StageTrainer for ProsodyTrainer<'_> {
    fn stage(&self) -> Stage {
        Stage::Prosody
    }
    fn stage_config(&self) -> &StageConfig {
        &self.sc
    }
    fn n_train(&self) -> usize {
        self.train.len()
    }
    fn term_names(&self) -> Vec<&'static str> {
        vec!["cross_entropy", "accuracy"]
    }
    fn step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut mode = Mode::train(rng).with_exec(self.exec);
        let logits = self.logits(self.train, batch, &mut mode)?;
        let labels = self.train.labels(batch);
        let target = Tensor::new(labels.as_slice(), &Device::Cpu)?;
        let loss = candle_nn::loss::cross_entropy(&logits, &target)?;
        let pred = logits.argmax(1)?.to_vec1::<u32>()?;
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64
            / batch.len() as f64;
        let value = scalar(&loss)?;
        descend(&loss, &mut self.opt)?;
        Ok(vec![value, acc])
    }
    fn metric_name(&self) -> &'static str {
        "cross_entropy"
    }
    fn validate(&mut self) -> Result<f64> {
        if self.val.is_empty() {
            return Err(invalid!("prosody validation split is empty"));
        }
        Ok(self.evaluate()?.0)
    }
    fn optimizers(&mut self) -> Vec<(&'static str, &mut AdamW)> {
        vec![("main", &mut self.opt)]
    }
    fn model(&self) -> (&ParamStore, &'static [&'static str]) {
        (&self.models.ps, &[PROSODY])
    }
    fn aux_stores(&self) -> Vec<(&'static str, &ParamStore)> {
        vec![("speaker_head", &self.head_store)]
    }
    fn summarize(&mut self) -> Result<BTreeMap<String, f64>> {
        let (ce, acc) = self.evaluate()?;
        Ok(BTreeMap::from([
            ("val_speaker_accuracy".to_string(), acc),
            ("val_cross_entropy".to_string(), ce),
        ]))
    }
}

/// CTC pretraining of the lip encoder and its grapheme head.
pub struct LipTrainer<'a> {
    models: &'a Models,
    sc: StageConfig,
    train: &'a FeatureSet,
    val: &'a FeatureSet,
    opt: AdamW,
    exec: Exec,
}

impl<'a> LipTrainer<'a> {
    pub fn new(
        models: &'a Models,
        cfg: &RunConfig,
        train: &'a FeatureSet,
        val: &'a FeatureSet,
        exec: Exec,
    ) -> Result<Self> {
        let sc = cfg.train.lip.clone();
        let opt = AdamW::new(sc.optimizer.clone(), models.ps.trainable(&[LIP]));
        Ok(Self {
            models,
            sc,
            train,
            val,
            opt,
            exec,
        })
    }

    /// Character error rate over the validation split: total edits over total
    /// reference characters.
    pub fn val_cer(&self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.val.len()).collect();
        let hyp = transcribe(self.models, self.val, &idx, self.exec)?;
        let (mut edits, mut chars) = (0usize, 0usize);
        for (u, h) in self.val.items.iter().zip(&hyp) {
            let (e, n) = edit_counts(&u.transcript, h, Unit::Char);
            edits += e;
            chars += n;
        }
        Ok(edits as f64 / chars.max(1) as f64)
    }
}

impl StageTrainer for LipTrainer<'_> {
    fn stage(&self) -> Stage {
        Stage::Lip
    }
    fn stage_config(&self) -> &StageConfig {
        &self.sc
    }
    fn n_train(&self) -> usize {
        self.train.len()
    }
    fn term_names(&self) -> Vec<&'static str> {
        vec!["ctc"]
    }
    fn step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut mode = Mode::train(rng).with_exec(self.exec);
        let x = self.train.lips(batch, self.models.dtype())?;
        let emb = self.models.lip.forward_pooled(&x, &mut mode)?;
        let logits = self.models.lip.ctc_logits(&emb, &mode)?;
        let loss = ctc_loss(&logits, &self.train.targets(batch))?.mean_all()?;
        let value = scalar(&loss)?;
        descend(&loss, &mut self.opt)?;
        Ok(vec![value])
    }
    fn metric_name(&self) -> &'static str {
        "cer"
    }
    fn validate(&mut self) -> Result<f64> {
        if self.val.is_empty() {
            return Err(invalid!("lip validation split is empty"));
        }
        self.val_cer()
    }
    fn optimizers(&mut self) -> Vec<(&'static str, &mut AdamW)> {
        vec![("main", &mut self.opt)]
    }
    fn model(&self) -> (&ParamStore, &'static [&'static str]) {
        (&self.models.ps, &[LIP])
    }
}

/// Prosody embeddings `[N, D]` of every item, computed once in eval mode.
pub(crate) fn prosody_targets(models: &Models, set: &FeatureSet, exec: Exec) -> Result<Tensor> {
    let mut parts = Vec::new();
    for b in batches(set.len(), 16) {
        let mut mode = Mode::eval().with_exec(exec);
        parts.push(models.prosody.forward(&set.mels(&b, models.dtype())?, &mut mode)?);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(
            (0, models.cfg.prosody.embed_dim),
            models.dtype(),
            &Device::Cpu,
        )?);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub(crate) fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let i: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(t.index_select(&Tensor::new(i.as_slice(), t.device())?, 0)?)
}

/// Face-encoder pretraining toward the frozen prosody embeddings with the
/// weighted cosine loss. With a zero weight nothing is optimised, which is
/// the no-alignment control; batch statistics still track the data.
pub struct FaceTrainer<'a> {
    models: &'a Models,
    sc: StageConfig,
    weight: f64,
    train: &'a FeatureSet,
    val: &'a FeatureSet,
    p_train: Tensor,
    p_val: Tensor,
    opt: AdamW,
    exec: Exec,
}

impl<'a> FaceTrainer<'a> {
    pub fn new(
        models: &'a Models,
        cfg: &RunConfig,
        train: &'a FeatureSet,
        val: &'a FeatureSet,
        exec: Exec,
    ) -> Result<Self> {
        let sc = cfg.train.face.clone();
        let opt = AdamW::new(sc.optimizer.clone(), models.ps.trainable(&[FACE]));
        Ok(Self {
            models,
            sc,
            weight: cfg.train.weights.cs,
            train,
            val,
            p_train: prosody_targets(models, train, exec)?,
            p_val: prosody_targets(models, val, exec)?,
            opt,
            exec,
        })
    }

    /// Mean unweighted cosine loss over `set`.
    pub fn mean_cs(&self, set: &FeatureSet, p: &Tensor) -> Result<f64> {
        let mut total = 0.0;
        for b in batches(set.len(), self.sc.batch_size) {
            let mut mode = Mode::eval().with_exec(self.exec);
            let f = self
                .models
                .face
                .forward_pooled(&set.faces(&b, self.models.dtype())?, &mut mode)?;
            total += scalar(&cs_loss(&f, &rows(p, &b)?)?)? * b.len() as f64;
        }
        Ok(total / set.len().max(1) as f64)
    }
}

impl StageTrainer for FaceTrainer<'_> {
    fn stage(&self) -> Stage {
        Stage::Face
    }
    fn stage_config(&self) -> &StageConfig {
        &self.sc
    }
    fn n_train(&self) -> usize {
        self.train.len()
    }
    fn term_names(&self) -> Vec<&'static str> {
        vec!["cs"]
    }
    fn step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut mode = Mode::train(rng).with_exec(self.exec);
        let x = self.train.faces(batch, self.models.dtype())?;
        let f = self.models.face.forward_pooled(&x, &mut mode)?;
        let cs = cs_loss(&f, &rows(&self.p_train, batch)?)?;
        let value = scalar(&cs)?;
        if self.weight > 0.0 {
            descend(&(cs * self.weight)?, &mut self.opt)?;
        }
        Ok(vec![self.weight * value])
    }
    fn metric_name(&self) -> &'static str {
        "cs"
    }
    fn validate(&mut self) -> Result<f64> {
        if self.val.is_empty() {
            return Err(invalid!("face validation split is empty"));
        }
        self.mean_cs(self.val, &self.p_val)
    }
    fn optimizers(&mut self) -> Vec<(&'static str, &mut AdamW)> {
        vec![("main", &mut self.opt)]
    }
    fn model(&self) -> (&ParamStore, &'static [&'static str]) {
        (&self.models.ps, &[FACE])
    }
}

pub fn pretrain_prosody(
    models: &Models,
    cfg: &RunConfig,
    train: &FeatureSet,
    val: &FeatureSet,
    opts: &StageOptions,
) -> Result<StageReport> {
    let mut t = ProsodyTrainer::new(models, cfg, train, val, opts.exec)?;
    run_stage(&mut t, cfg, opts)
}

pub fn pretrain_lip(
    models: &Models,
    cfg: &RunConfig,
    train: &FeatureSet,
    val: &FeatureSet,
    opts: &StageOptions,
) -> Result<StageReport> {
    let mut t = LipTrainer::new(models, cfg, train, val, opts.exec)?;
    run_stage(&mut t, cfg, opts)
}

/// Requires the prosody encoder in `models` to hold pretrained weights; it
/// is only ever run in eval mode here, so it stays bit-identical.
pub fn pretrain_face(
    models: &Models,
    cfg: &RunConfig,
    train: &FeatureSet,
    val: &FeatureSet,
    opts: &StageOptions,
) -> Result<StageReport> {
    let mut t = FaceTrainer::new(models, cfg, train, val, opts.exec)?;
    run_stage(&mut t, cfg, opts)
}
