use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use candle_core::DType;
use facevox::config::{Preset, RunConfig};
use facevox::data::corpus::{generate_toy_corpus, CorpusManifest, Split};
use facevox::features::{FeatureSet, Pooling};
use facevox::model::{LossBundle, Models, FACE, GENERATOR, LIP, MPD, MSD, PROSODY};
use facevox::nn::{AdamW, ParamStore};
use facevox::train::{
    pretrain_face, pretrain_lip, pretrain_prosody, read_metrics, run_stage, train_joint,
    Checkpoint, JointTrainer, Stage, StageOptions, StageTrainer,
};
use facevox::{Error, Exec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    manifest: CorpusManifest,
    train: FeatureSet,
    val: FeatureSet,
}

fn config() -> RunConfig {
    let mut cfg = RunConfig::with_preset(Preset::Micro);
    cfg.seed = 11;
    for s in [
        &mut cfg.train.prosody,
        &mut cfg.train.lip,
        &mut cfg.train.face,
        &mut cfg.train.joint,
    ] {
        s.batch_size = 4;
        s.max_steps = 6;
        s.patience = 100;
    }
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let manifest = generate_toy_corpus(
            dir.path(),
            3,
            4,
            5,
            &cfg.audio,
            &cfg.video,
            false,
            Exec::Parallel,
        )
        .unwrap();
        let pool = Pooling::from_config(&cfg.model);
        let train = FeatureSet::for_split(&manifest, Split::Train, pool, Exec::Parallel).unwrap();
        let val = FeatureSet::for_split(&manifest, Split::Val, pool, Exec::Parallel).unwrap();
        Fixture {
            _dir: dir,
            manifest,
            train,
            val,
        }
    })
}

fn models(cfg: &RunConfig) -> Models {
    Models::new(&cfg.model, &cfg.audio, &cfg.video, DType::F32, cfg.seed).unwrap()
}

fn opts(dir: &Path) -> StageOptions {
    let mut o = StageOptions::new(dir);
    o.exec = Exec::Sequential;
    o
}

fn hashes(ps: &ParamStore) -> BTreeMap<&'static str, String> {
    [LIP, FACE, PROSODY, GENERATOR, MPD, MSD]
        .into_iter()
        .map(|p| (p, ps.hash(p).unwrap()))
        .collect()
}

fn changed(before: &BTreeMap<&str, String>, after: &BTreeMap<&str, String>) -> Vec<String> {
    before
        .keys()
        .filter(|k| before[*k] != after[*k])
        .map(|k| k.to_string())
        .collect()
}

/// Runs all four stages in `dir`, checking which modules each one touches.
fn full_run(dir: &Path) -> Vec<Vec<u8>> {
    let f = fixture();
    let cfg = config();
    let m = models(&cfg);
    let o = opts(dir);
    let h0 = hashes(&m.ps);
    let p = pretrain_prosody(&m, &cfg, &f.train, &f.val, &o).unwrap();
    let h1 = hashes(&m.ps);
    assert_eq!(changed(&h0, &h1), vec![PROSODY.to_string()]);
    let l = pretrain_lip(&m, &cfg, &f.train, &f.val, &o).unwrap();
    let h2 = hashes(&m.ps);
    assert_eq!(changed(&h1, &h2), vec![LIP.to_string()]);
    let fc = pretrain_face(&m, &cfg, &f.train, &f.val, &o).unwrap();
    let h3 = hashes(&m.ps);
    assert_eq!(changed(&h2, &h3), vec![FACE.to_string()]);
    let j = train_joint(&m, &cfg, &f.train, &f.val, &[&p.checkpoint, &l.checkpoint, &fc.checkpoint], &o)
        .unwrap();
    let h4 = hashes(&m.ps);
    // Default joint config: lip frozen, face trainable, prosody never trained.
    assert_eq!(h4[LIP], h3[LIP]);
    assert_eq!(h4[PROSODY], h3[PROSODY]);
    for k in [GENERATOR, MPD, MSD, FACE] {
        assert_ne!(h4[k], h3[k], "{k} did not move");
    }
    [&p, &l, &fc, &j]
        .iter()
        .map(|r| std::fs::read(&r.checkpoint_path).unwrap())
        .collect()
}

#[test]
fn stages_are_deterministic_and_isolated() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = full_run(a.path());
    let rb = full_run(b.path());
    for (x, y) in ra.iter().zip(&rb) {
        assert!(x == y, "stage outputs differ between identical runs");
    }
    for name in ["prosody_train.csv", "lip_train.csv", "face_train.csv", "joint_train.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
}

#[test]
fn zero_steps_returns_the_initialization() {
    let f = fixture();
    let mut cfg = config();
    cfg.train.lip.max_steps = 0;
    let m = models(&cfg);
    let init = m.ps.hash(LIP).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = pretrain_lip(&m, &cfg, &f.train, &f.val, &opts(dir.path())).unwrap();
    assert_eq!(r.steps, 0);
    let fresh = models(&cfg);
    r.checkpoint.apply(&fresh.ps).unwrap();
    assert_eq!(fresh.ps.hash(LIP).unwrap(), init);
}

fn pretrained(cfg: &RunConfig, dir: &Path) -> Vec<Checkpoint> {
    let f = fixture();
    let m = models(cfg);
    let o = opts(dir);
    vec![
        pretrain_prosody(&m, cfg, &f.train, &f.val, &o).unwrap().checkpoint,
        pretrain_lip(&m, cfg, &f.train, &f.val, &o).unwrap().checkpoint,
        pretrain_face(&m, cfg, &f.train, &f.val, &o).unwrap().checkpoint,
    ]
}

#[test]
fn resumed_joint_run_matches_uninterrupted() {
    let f = fixture();
    let mut cfg = config();
    cfg.train.prosody.max_steps = 2;
    cfg.train.lip.max_steps = 2;
    cfg.train.face.max_steps = 2;
    let pre_dir = tempfile::tempdir().unwrap();
    let pre = pretrained(&cfg, pre_dir.path());
    let pre: Vec<&Checkpoint> = pre.iter().collect();

    // Uneven split of 7 steps: 3 then 4, crossing an epoch boundary.
    cfg.train.joint.max_steps = 7;
    cfg.train.joint.eval_every = 2;
    let whole = tempfile::tempdir().unwrap();
    let m = models(&cfg);
    let full = train_joint(&m, &cfg, &f.train, &f.val, &pre, &opts(whole.path())).unwrap();

    let parts = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.train.joint.max_steps = 3;
    let m1 = models(&first);
    train_joint(&m1, &first, &f.train, &f.val, &pre, &opts(parts.path())).unwrap();
    let mut o = opts(parts.path());
    o.resume = Some(o.state_path(Stage::Joint));
    let m2 = models(&cfg);
    let resumed = train_joint(&m2, &cfg, &f.train, &f.val, &pre, &o).unwrap();

    assert_eq!(resumed.steps, 7);
    assert_eq!(resumed.checkpoint.model_hash(), full.checkpoint.model_hash());
    assert_eq!(resumed.progress, full.progress);
    let state = |d: &Path| Checkpoint::load(&d.join("joint.state.ckpt")).unwrap();
    assert_eq!(state(whole.path()).groups, state(parts.path()).groups);
    for name in ["joint_train.csv", "joint_val.csv"] {
        assert_eq!(
            std::fs::read_to_string(whole.path().join(name)).unwrap(),
            std::fs::read_to_string(parts.path().join(name)).unwrap()
        );
    }
}

#[test]
fn resume_rejects_foreign_state() {
    let f = fixture();
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let m = models(&cfg);
    let lip = pretrain_lip(&m, &cfg, &f.train, &f.val, &opts(dir.path())).unwrap();
    let mut o = opts(dir.path());
    // A stage output is not a training state.
    o.resume = Some(lip.checkpoint_path.clone());
    assert!(matches!(
        pretrain_lip(&m, &cfg, &f.train, &f.val, &o),
        Err(Error::Checkpoint(_))
    ));
    o.resume = Some(o.state_path(Stage::Lip));
    assert!(matches!(
        pretrain_face(&m, &cfg, &f.train, &f.val, &o),
        Err(Error::Checkpoint(_))
    ));
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(matches!(
        pretrain_lip(&m, &other, &f.train, &f.val, &o),
        Err(Error::Config(_))
    ));
}

#[test]
fn frozen_face_without_alignment_stays_fixed() {
    let f = fixture();
    let mut cfg = config();
    cfg.train.weights.cs = 0.0;
    cfg.train.train_face_in_joint = false;
    let m = models(&cfg);
    let before = hashes(&m.ps);
    let mut t = JointTrainer::new(&m, &cfg, &f.train, &f.val, Exec::Sequential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in 0..4 {
        let batch: Vec<usize> = (0..4).map(|i| (s * 4 + i) % f.train.len()).collect();
        let b = t.step_bundle(&batch, &mut rng).unwrap();
        assert_eq!(b.cs, 0.0);
    }
    let after = hashes(&m.ps);
    let mut moved = changed(&before, &after);
    moved.sort();
    assert_eq!(moved, vec![GENERATOR.to_string(), MPD.to_string(), MSD.to_string()]);
}

#[test]
fn logged_total_is_the_sum_of_logged_terms() {
    let f = fixture();
    let mut cfg = config();
    cfg.train.weights.vocoder = 0.5;
    let pre_dir = tempfile::tempdir().unwrap();
    let mut short = cfg.clone();
    for s in [&mut short.train.prosody, &mut short.train.lip, &mut short.train.face] {
        s.max_steps = 1;
    }
    let pre = pretrained(&short, pre_dir.path());
    let pre: Vec<&Checkpoint> = pre.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let m = models(&cfg);
    train_joint(&m, &cfg, &f.train, &f.val, &pre, &opts(dir.path())).unwrap();
    let (header, rows) = read_metrics(&dir.path().join("joint_train.csv")).unwrap();
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let b = LossBundle {
            adv_disc: r[col("adv_disc")],
            adv_gen: r[col("adv_gen")],
            feature_match: r[col("feature_match")],
            mel: r[col("mel")],
            cs: r[col("cs")],
            vocoder: r[col("vocoder")],
            total: r[col("total")],
            mel_l1: r[col("mel_l1")],
        };
        assert!(b.values().iter().all(|v| v.is_finite()));
        assert!(b.vocoder > 0.0 && b.cs > 0.0);
        let sum = b.adv_disc + b.adv_gen + b.feature_match + b.mel + b.cs + b.vocoder;
        assert_eq!(b.total, sum);
    }
}

#[test]
fn joint_needs_all_pretrained_stages() {
    let f = fixture();
    let cfg = config();
    let m = models(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut short = cfg.clone();
    short.train.lip.max_steps = 1;
    let lip = pretrain_lip(&m, &short, &f.train, &f.val, &opts(dir.path())).unwrap();
    let err = train_joint(&m, &cfg, &f.train, &f.val, &[&lip.checkpoint], &opts(dir.path()));
    assert!(matches!(err, Err(Error::Checkpoint(_))));
}

#[test]
fn stage_checkpoint_into_full_model_reports_absent_modules() {
    let f = fixture();
    let mut cfg = config();
    cfg.train.lip.max_steps = 2;
    let m = models(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let lip = pretrain_lip(&m, &cfg, &f.train, &f.val, &opts(dir.path())).unwrap();
    let ck = Checkpoint::load(&lip.checkpoint_path).unwrap();
    assert_eq!(ck.model_hash(), lip.checkpoint.model_hash());

    let fresh = models(&cfg);
    let init = hashes(&fresh.ps);
    let r = ck.apply(&fresh.ps).unwrap();
    assert!(r.loaded.iter().all(|n| n.starts_with(LIP)));
    assert!(r.missing.iter().any(|n| n.starts_with(GENERATOR)));
    assert!(r.missing.iter().any(|n| n.starts_with(FACE)));
    assert!(r.unexpected.is_empty());
    assert_eq!(fresh.ps.hash(LIP).unwrap(), m.ps.hash(LIP).unwrap());
    assert_eq!(changed(&init, &hashes(&fresh.ps)), vec![LIP.to_string()]);

    // Truncation is detected before anything is applied.
    let bytes = std::fs::read(&lip.checkpoint_path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
    let err = Checkpoint::load(&cut).unwrap_err();
    assert!(err.to_string().contains("integrity"), "{err}");
}

/// Degenerate stage whose validation metric comes from a fixed script.
struct Scripted {
    sc: facevox::config::StageConfig,
    ps: ParamStore,
    opt: AdamW,
    metrics: Vec<f64>,
    calls: usize,
    loss: f64,
}

impl Scripted {
    fn new(metrics: Vec<f64>, patience: usize, loss: f64) -> Self {
        let mut ps = ParamStore::new(DType::F64);
        ps.param("w", &[2], facevox::nn::params::Init::Zeros, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let mut sc = config().train.lip;
        sc.batch_size = 2;
        sc.max_steps = 100;
        sc.patience = patience;
        let opt = AdamW::new(sc.optimizer.clone(), ps.trainable(&[""]));
        Self {
            sc,
            ps,
            opt,
            metrics,
            calls: 0,
            loss,
        }
    }
}

impl StageTrainer for Scripted {
    fn stage(&self) -> Stage {
        Stage::Lip
    }
    fn stage_config(&self) -> &facevox::config::StageConfig {
        &self.sc
    }
    fn n_train(&self) -> usize {
        4
    }
    fn term_names(&self) -> Vec<&'static str> {
        vec!["scripted"]
    }
    fn step(&mut self, _: &[usize], _: &mut ChaCha8Rng) -> facevox::Result<Vec<f64>> {
        Ok(vec![self.loss])
    }
    fn metric_name(&self) -> &'static str {
        "metric"
    }
    fn validate(&mut self) -> facevox::Result<f64> {
        let m = self.metrics[self.calls.min(self.metrics.len() - 1)];
        self.calls += 1;
        Ok(m)
    }
    fn optimizers(&mut self) -> Vec<(&'static str, &mut AdamW)> {
        vec![("main", &mut self.opt)]
    }
    fn model(&self) -> (&ParamStore, &'static [&'static str]) {
        (&self.ps, &[""])
    }
}

#[test]
fn patience_counts_non_improving_epochs() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    // Constant metric: the first epoch sets the best, the second is stale.
    let mut t = Scripted::new(vec![1.0], 1, 0.5);
    let r = run_stage(&mut t, &cfg, &opts(dir.path())).unwrap();
    assert_eq!((r.steps, r.epochs), (4, 2));
    assert!(r.stopped_early);
    assert_eq!(r.progress.best_step, 2);

    // Improvement resets the count; patience 2 tolerates one stale epoch.
    let mut t = Scripted::new(vec![3.0, 2.0, 2.5, 1.0, 1.5, 1.5], 2, 0.5);
    let r = run_stage(&mut t, &cfg, &opts(dir.path())).unwrap();
    assert_eq!(r.epochs, 6);
    assert_eq!(r.metric, Some(1.0));
    assert_eq!(r.progress.best_step, 8);
    let (_, val) = read_metrics(&dir.path().join("lip_val.csv")).unwrap();
    assert_eq!(val.len(), 6);
}

#[test]
fn divergence_names_the_term() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Scripted::new(vec![1.0], 1, f64::NAN);
    let err = run_stage(&mut t, &cfg, &opts(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }));
    assert!(err.to_string().contains("scripted"), "{err}");
}

#[test]
fn manifest_fixture_has_all_splits() {
    let f = fixture();
    assert_eq!(f.manifest.speakers().len(), 3);
    assert_eq!((f.train.len(), f.val.len()), (10, 1));
}
