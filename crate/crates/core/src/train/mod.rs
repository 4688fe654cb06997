//! Staged training: the prosody reference encoder, the lip encoder (CTC), the
//! face encoder (cosine alignment to prosody), then the joint generator
//! objective with alternating discriminator updates.
//!
//! Every random draw of a step derives from `(seed, stage, step)` and every
//! epoch order from `(seed, stage, epoch)`, so a resumed run only needs the
//! step counter, optimizer moments, parameters and early-stopping state to
//! continue bit-identically.

pub mod checkpoint;
mod joint;
pub mod metrics;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, StageConfig};
use crate::data::render::mix_seed;
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::features::epoch_order;
use crate::nn::params::Blob;
use crate::nn::{AdamW, ParamStore};

pub use checkpoint::{Checkpoint, CheckpointHeader, Progress, Stage, BEST_GROUP, MODEL_GROUP};
pub use joint::{train_joint, JointTrainer};
pub use metrics::{read_metrics, MetricsLog};
pub use stages::{pretrain_face, pretrain_lip, pretrain_prosody, FaceTrainer, LipTrainer, ProsodyTrainer};

/// Knobs of one stage run that are not part of the model config.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Receives `<stage>.ckpt`, `<stage>.state.ckpt` and the CSV logs.
    pub out_dir: PathBuf,
    pub exec: Exec,
    /// Save a resumable state every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Training state to continue from.
    pub resume: Option<PathBuf>,
    /// Finish as soon as a validation metric reaches this value.
    pub stop_at: Option<f64>,
}

impl StageOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            ..Self::default()
        }
    }

    pub fn output_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(format!("{stage}.ckpt"))
    }

    pub fn state_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(format!("{stage}.state.ckpt"))
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: u64,
    pub epochs: u64,
    pub stopped_early: bool,
    /// Validation metric of the returned parameters (lower is better).
    pub metric: Option<f64>,
    pub metric_name: &'static str,
    pub progress: Progress,
    /// Stage-specific summaries, e.g. speaker accuracy.
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
}

/// One optimisation stage driven by [`run_stage`].
pub trait StageTrainer {
    fn stage(&self) -> Stage;
    fn stage_config(&self) -> &StageConfig;
    fn n_train(&self) -> usize;
    /// Names of the values returned by [`StageTrainer::step`].
    fn term_names(&self) -> Vec<&'static str>;
    fn step(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    /// Name of the validation metric.
    fn metric_name(&self) -> &'static str;
    /// Validation metric, lower is better.
    fn validate(&mut self) -> Result<f64>;
    fn optimizers(&mut self) -> Vec<(&'static str, &mut AdamW)>;
    /// Model store and the prefixes this stage trains and outputs.
    fn model(&self) -> (&ParamStore, &'static [&'static str]);
    /// Auxiliary stores kept in training states but not in the output.
    fn aux_stores(&self) -> Vec<(&'static str, &ParamStore)> {
        Vec::new()
    }
    /// Summaries computed on the final parameters.
    fn summarize(&mut self) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::new())
    }
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::Prosody => 0x7001,
            Stage::Lip => 0x7002,
            Stage::Face => 0x7003,
            Stage::Joint => 0x7004,
        }
    }
}

/// Rejects non-finite values, naming the offending term.
pub fn check_finite(step: u64, names: &[&str], values: &[f64]) -> Result<()> {
    for (n, v) in names.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::Divergence {
                step: step as usize,
                term: n.to_string(),
            });
        }
    }
    Ok(())
}

/// Scalar value of a 0-d tensor as f64.
pub(crate) fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Backpropagates `loss` and applies one step of `opt`.
pub(crate) fn descend(loss: &candle_core::Tensor, opt: &mut AdamW) -> Result<()> {
    let grads: GradStore = loss.backward()?;
    opt.step(&grads)
}

fn snapshot<T: StageTrainer + ?Sized>(t: &T) -> Result<BTreeMap<String, Vec<Blob>>> {
    let (ps, prefixes) = t.model();
    let mut out = BTreeMap::new();
    out.insert(MODEL_GROUP.to_string(), checkpoint::model_blobs(ps, prefixes)?);
    for (name, store) in t.aux_stores() {
        out.insert(format!("aux.{name}"), checkpoint::model_blobs(store, &[""])?);
    }
    Ok(out)
}

fn restore<T: StageTrainer + ?Sized>(t: &T, snap: &BTreeMap<String, Vec<Blob>>) -> Result<()> {
    let (ps, _) = t.model();
    ps.load_blobs(&snap[MODEL_GROUP])?;
    for (name, store) in t.aux_stores() {
        if let Some(b) = snap.get(&format!("aux.{name}")) {
            store.load_blobs(b)?;
        }
    }
    Ok(())
}

fn header(cfg: &RunConfig, stage: Stage, step: u64) -> CheckpointHeader {
    CheckpointHeader {
        stage,
        step,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.to_toml(),
        optimizers: BTreeMap::new(),
        progress: None,
        metrics: BTreeMap::new(),
    }
}

fn state_checkpoint<T: StageTrainer + ?Sized>(
    t: &mut T,
    cfg: &RunConfig,
    step: u64,
    progress: &Progress,
    best: Option<&BTreeMap<String, Vec<Blob>>>,
) -> Result<Checkpoint> {
    let mut h = header(cfg, t.stage(), step);
    h.progress = Some(progress.clone());
    let mut groups = snapshot(t)?;
    if let Some(best) = best {
        for (k, v) in best {
            groups.insert(format!("{BEST_GROUP}.{k}"), v.clone());
        }
    }
    for (name, opt) in t.optimizers() {
        h.optimizers.insert(name.to_string(), opt.meta());
        groups.insert(format!("opt.{name}"), opt.state_blobs());
    }
    Ok(Checkpoint { header: h, groups })
}

type Snapshot = BTreeMap<String, Vec<Blob>>;

fn load_state<T: StageTrainer + ?Sized>(
    t: &mut T,
    cfg: &RunConfig,
    path: &Path,
) -> Result<(u64, Progress, Option<Snapshot>)> {
    let ck = Checkpoint::load(path)?;
    let h = &ck.header;
    if h.stage != t.stage() {
        return Err(Error::Checkpoint(format!(
            "{} holds {} training state, cannot resume {}",
            path.display(),
            h.stage,
            t.stage()
        )));
    }
    let progress = h.progress.clone().ok_or_else(|| {
        Error::Checkpoint(format!(
            "{} is a stage output, not a resumable training state",
            path.display()
        ))
    })?;
    if h.seed != cfg.seed {
        return Err(Error::Config(format!(
            "resume seed {} differs from configured seed {}",
            h.seed, cfg.seed
        )));
    }
    if h.config_hash != cfg.hash() {
        log::warn!("resuming {} under a changed config", t.stage());
    }
    // Validate every group before touching any parameter.
    let current = snapshot(t)?;
    for (k, blobs) in &current {
        let saved = ck.group(k);
        let shapes = |b: &[Blob]| b.iter().map(|b| (b.name.clone(), b.shape.clone())).collect::<Vec<_>>();
        if shapes(saved) != shapes(blobs) {
            return Err(Error::Checkpoint(format!(
                "{}: group {k} does not match the configured model",
                path.display()
            )));
        }
    }
    for (name, opt) in t.optimizers() {
        let meta = h.optimizers.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("{} lacks optimizer {name}", path.display()))
        })?;
        opt.load_state(meta, ck.group(&format!("opt.{name}")))?;
    }
    restore(t, &ck.groups)?;
    let prefix = format!("{BEST_GROUP}.");
    let best: Snapshot = ck
        .groups
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), v.clone())))
        .collect();
    let best = (!best.is_empty()).then_some(best);
    Ok((h.step, progress, best))
}

/// Runs a stage to completion: batches in per-epoch shuffled order, validation
/// at `eval_every` steps and at every epoch end, learning-rate decay per epoch,
/// and early stopping after `patience` epochs without improvement. The output
/// checkpoint holds the best-validation parameters of the stage's modules.
pub fn run_stage<T: StageTrainer + ?Sized>(
    t: &mut T,
    cfg: &RunConfig,
    opts: &StageOptions,
) -> Result<StageReport> {
    let stage = t.stage();
    let sc = t.stage_config().clone();
    let n = t.n_train();
    if n == 0 {
        return Err(invalid!("{stage} training split is empty"));
    }
    let per_epoch = n.div_ceil(sc.batch_size) as u64;
    let (mut step, mut progress, mut best) = match &opts.resume {
        Some(p) => load_state(t, cfg, p)?,
        None => (0, Progress::default(), None),
    };
    let resume_step = opts.resume.as_ref().map(|_| step);
    let names = t.term_names();
    let metric_name = t.metric_name();
    let mut train_cols = vec!["step", "epoch", "lr"];
    train_cols.extend(&names);
    let mut train_log = MetricsLog::open(
        &opts.out_dir.join(format!("{stage}_train.csv")),
        &train_cols,
        resume_step,
    )?;
    let mut val_log = MetricsLog::open(
        &opts.out_dir.join(format!("{stage}_val.csv")),
        &["step", "epoch", metric_name],
        resume_step,
    )?;
    let stream = stage.stream();
    let mut evaluated_at = progress.history.last().map(|h| h.0);
    while !progress.finished && step < sc.max_steps as u64 {
        let epoch = step / per_epoch;
        let pos = (step % per_epoch) as usize;
        let order = epoch_order(n, cfg.seed, stream, epoch);
        let batch = &order[pos * sc.batch_size..((pos + 1) * sc.batch_size).min(n)];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, stream ^ 0x5EED, step));
        let values = t.step(batch, &mut rng)?;
        check_finite(step, &names, &values)?;
        step += 1;
        let lr = t.optimizers().first().map_or(0.0, |(_, o)| o.lr());
        let mut row = vec![step as f64, epoch as f64, lr];
        row.extend(&values);
        train_log.row(&row)?;

        let epoch_end = step % per_epoch == 0;
        if epoch_end || (sc.eval_every > 0 && step % sc.eval_every as u64 == 0) {
            let m = t.validate()?;
            check_finite(step, &[metric_name], &[m])?;
            val_log.row(&[step as f64, epoch as f64, m])?;
            progress.history.push((step, m));
            evaluated_at = Some(step);
            if progress.best.map_or(true, |b| m < b) {
                progress.best = Some(m);
                progress.best_step = step;
                progress.improved_this_epoch = true;
                best = Some(snapshot(t)?);
            }
            log::info!("{stage} step {step}: val {metric_name} {m:.5}");
            if opts.stop_at.is_some_and(|s| m <= s) {
                progress.finished = true;
            }
        }
        if epoch_end {
            if progress.improved_this_epoch {
                progress.stale_epochs = 0;
            } else {
                progress.stale_epochs += 1;
            }
            progress.improved_this_epoch = false;
            if progress.stale_epochs >= sc.patience {
                log::info!("{stage}: no improvement for {} epochs, stopping", sc.patience);
                progress.finished = true;
            }
            for (_, o) in t.optimizers() {
                o.decay_lr();
            }
        }
        if opts.checkpoint_every > 0 && step % opts.checkpoint_every as u64 == 0 {
            train_log.flush()?;
            val_log.flush()?;
            state_checkpoint(t, cfg, step, &progress, best.as_ref())?
                .save(&opts.state_path(stage))?;
        }
    }
    train_log.flush()?;
    val_log.flush()?;
    state_checkpoint(t, cfg, step, &progress, best.as_ref())?.save(&opts.state_path(stage))?;

    // Output selection: the best validated parameters, unless the final
    // parameters were never validated and score better. This extra
    // evaluation does not enter the saved training state.
    let mut metric = progress.best;
    if step > 0 && evaluated_at != Some(step) {
        let m = t.validate()?;
        if metric.map_or(true, |b| m < b) {
            metric = Some(m);
            best = None;
        }
    }
    if let Some(snap) = &best {
        restore(t, snap)?;
    }
    let summary = t.summarize()?;
    let mut h = header(cfg, stage, step);
    h.metrics = summary.clone();
    if let Some(m) = metric {
        h.metrics.insert(format!("val_{metric_name}"), m);
    }
    let (ps, prefixes) = t.model();
    let ck = Checkpoint {
        header: h,
        groups: BTreeMap::from([(
            MODEL_GROUP.to_string(),
            checkpoint::model_blobs(ps, prefixes)?,
        )]),
    };
    let path = opts.output_path(stage);
    ck.save(&path)?;
    Ok(StageReport {
        stage,
        steps: step,
        epochs: step.div_ceil(per_epoch),
        stopped_early: progress.finished,
        metric,
        metric_name,
        progress,
        metrics: summary,
        checkpoint: ck,
        checkpoint_path: path,
    })
}
