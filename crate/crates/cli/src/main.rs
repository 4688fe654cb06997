//! `facevox` command: corpus preparation, staged training, synthesis and
//! evaluation. Errors end the process with one `error[<category>]: ...` line
//! on stderr; exit code 2 for usage and config errors, 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use facevox::config::RunConfig;
use facevox::data::corpus::{generate_toy_corpus, CorpusManifest, Split};
use facevox::data::grid::grid_import;
use facevox::eval::{project_2d, run_eval};
use facevox::features::{FeatureSet, Pooling};
use facevox::infer::{
    face_embeddings, i2i_select, load_face_image, synthesize, write_output, EmbeddingPool,
    FaceSource, SynthesisRequest,
};
use facevox::model::{Models, FACE, GENERATOR, LIP};
use facevox::train::{
    pretrain_face, pretrain_lip, pretrain_prosody, train_joint, Checkpoint, Stage, StageOptions,
    StageReport,
};
use facevox::{Error, Exec, Result};

#[derive(Parser)]
#[command(name = "facevox", version, about = "Lip- and face-conditioned speech synthesis")]
struct Cli {
    /// TOML config file; every key is optional and defaults to the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lip.max_steps=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Run every per-item loop on one worker.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-speaker corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Convert a GRID-layout tree (per-speaker video frames, audio, alignments).
    ImportGrid {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the per-utterance face frame choice.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Speaker-classification pretraining of the prosody reference encoder.
    PretrainProsody(StageArgs),
    /// CTC pretraining of the lip encoder.
    PretrainLip {
        #[command(flatten)]
        stage: StageArgs,
        /// Stop once validation CER is at or below this value.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Face-encoder pretraining toward frozen prosody embeddings.
    PretrainFace {
        #[command(flatten)]
        stage: StageArgs,
        /// Output of pretrain-prosody.
        #[arg(long)]
        prosody: PathBuf,
    },
    /// Joint training of the generator path with the discriminators.
    Train {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        prosody: PathBuf,
        #[arg(long)]
        lip: PathBuf,
        #[arg(long)]
        face: PathBuf,
    },
    /// Build a speaker's face-embedding pool and pick its I2I embedding.
    SelectEmbedding {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        speaker: String,
        /// Split whose utterances form the pool.
        #[arg(long, default_value = "train")]
        split: Split,
        /// Where to write the selection (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Also write the whole pool (JSON).
        #[arg(long)]
        pool_out: Option<PathBuf>,
    },
    /// Synthesize a mel and waveform from one utterance's lips and a face source.
    Synth {
        #[command(flatten)]
        models: ModelArgs,
        /// Lip source as SPEAKER/UTTERANCE.
        #[arg(long, value_name = "SPEAKER/UTTERANCE")]
        lips: String,
        #[command(flatten)]
        face: FaceArgs,
        /// Pool JSON from select-embedding; built from the train split otherwise.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// File stem of the outputs.
        #[arg(long, default_value = "synth")]
        name: String,
    },
    /// Transcription, mel and embedding-cluster metrics on one split.
    Eval {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Skip the 2-D embedding plot.
        #[arg(long)]
        no_plot: bool,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Receives checkpoints, training states and metric logs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the stage's training state in --out.
    #[arg(long)]
    resume: bool,
    /// Save a resumable state every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoints applied in order; later ones overwrite earlier entries.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FaceArgs {
    /// I2I selection over this speaker's pooled embeddings.
    #[arg(long)]
    face_speaker: Option<String>,
    /// The stored face image of SPEAKER/UTTERANCE.
    #[arg(long, value_name = "SPEAKER/UTTERANCE")]
    face_utt: Option<String>,
    /// An image file, resized to the corpus face size.
    #[arg(long)]
    face_image: Option<PathBuf>,
    /// A JSON array holding a face embedding.
    #[arg(long)]
    face_embedding: Option<PathBuf>,
}

fn split_id(s: &str) -> Result<(String, String)> {
    match s.split_once('/') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(Error::InvalidInput(format!(
            "expected SPEAKER/UTTERANCE, got {s:?}"
        ))),
    }
}

struct Ctx {
    cfg: RunConfig,
    exec: Exec,
}

impl Ctx {
    fn corpus(&self, root: &Path) -> Result<CorpusManifest> {
        let m = CorpusManifest::load(root)?;
        if m.audio != self.cfg.audio || m.video != self.cfg.video {
            return Err(Error::Config(format!(
                "audio/video settings of {} differ from the configured ones",
                root.display()
            )));
        }
        Ok(m)
    }

    fn features(&self, m: &CorpusManifest, split: Split) -> Result<FeatureSet> {
        FeatureSet::for_split(m, split, Pooling::from_config(&self.cfg.model), self.exec)
    }

    fn models(&self) -> Result<Models> {
        let c = &self.cfg;
        Models::new(&c.model, &c.audio, &c.video, DType::F32, c.seed)
    }

    /// Fresh models with `paths` applied; each of `needed` must be loaded.
    fn trained(&self, paths: &[PathBuf], needed: &[&str]) -> Result<Models> {
        let models = self.models()?;
        let mut loaded: Vec<String> = Vec::new();
        for p in paths {
            let ck = Checkpoint::load(p)?;
            if ck.header.config_hash != self.cfg.hash() {
                log::warn!("{} was trained under config {}", p.display(), ck.header.config_hash);
            }
            let r = ck.apply(&models.ps)?;
            log::info!("{}: {} {} entries", p.display(), ck.header.stage, r.loaded.len());
            loaded.extend(r.loaded);
        }
        for prefix in needed {
            if !loaded.iter().any(|n| n.starts_with(prefix)) {
                return Err(Error::Checkpoint(format!(
                    "no checkpoint provides {}* parameters",
                    prefix
                )));
            }
        }
        Ok(models)
    }

    fn stage_options(&self, a: &StageArgs, stage: Stage) -> Result<StageOptions> {
        std::fs::create_dir_all(&a.out)
            .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", a.out.display())))?;
        let config_path = a.out.join(format!("{stage}.config.toml"));
        std::fs::write(&config_path, self.cfg.to_toml()).map_err(|e| {
            Error::InvalidInput(format!("cannot write {}: {e}", config_path.display()))
        })?;
        let mut o = StageOptions::new(&a.out);
        o.exec = self.exec;
        o.checkpoint_every = a.checkpoint_every;
        if a.resume {
            o.resume = Some(o.state_path(stage));
        }
        Ok(o)
    }
}

fn report(r: &StageReport) {
    let metric = r
        .metric
        .map_or("n/a".to_string(), |m| format!("{m:.6}"));
    println!(
        "{}: {} steps, {} epochs, val {} {}{} -> {}",
        r.stage,
        r.steps,
        r.epochs,
        r.metric_name,
        metric,
        if r.stopped_early { ", stopped early" } else { "" },
        r.checkpoint_path.display()
    );
    for (k, v) in &r.metrics {
        println!("  {k} = {v:.6}");
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    log::info!("config hash {}", cfg.hash());
    log::info!("resolved config:\n{}", cfg.to_toml());
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let ctx = Ctx { cfg, exec };
    match cli.command {
        Command::GenCorpus {
            out,
            speakers,
            utts,
            seed,
            force,
        } => {
            let m = generate_toy_corpus(
                &out,
                speakers,
                utts,
                seed,
                &ctx.cfg.audio,
                &ctx.cfg.video,
                force,
                exec,
            )?;
            println!("{} utterances -> {}", m.utterances.len(), out.display());
        }
        Command::ImportGrid {
            src,
            out,
            seed,
            force,
        } => {
            let (m, r) = grid_import(&src, &out, &ctx.cfg.audio, &ctx.cfg.video, seed, force, exec)?;
            for (p, why) in &r.skipped {
                log::warn!("skipped {}: {why}", p.display());
            }
            println!(
                "{} utterances imported, {} skipped -> {}",
                m.utterances.len(),
                r.skipped.len(),
                out.display()
            );
        }
        Command::PretrainProsody(a) => {
            let m = ctx.corpus(&a.corpus)?;
            let (tr, va) = (ctx.features(&m, Split::Train)?, ctx.features(&m, Split::Val)?);
            let models = ctx.models()?;
            let o = ctx.stage_options(&a, Stage::Prosody)?;
            report(&pretrain_prosody(&models, &ctx.cfg, &tr, &va, &o)?);
        }
        Command::PretrainLip { stage, stop_at } => {
            let m = ctx.corpus(&stage.corpus)?;
            let (tr, va) = (ctx.features(&m, Split::Train)?, ctx.features(&m, Split::Val)?);
            let models = ctx.models()?;
            let mut o = ctx.stage_options(&stage, Stage::Lip)?;
            o.stop_at = stop_at;
            report(&pretrain_lip(&models, &ctx.cfg, &tr, &va, &o)?);
        }
        Command::PretrainFace { stage, prosody } => {
            let m = ctx.corpus(&stage.corpus)?;
            let (tr, va) = (ctx.features(&m, Split::Train)?, ctx.features(&m, Split::Val)?);
            let ck = Checkpoint::load(&prosody)?;
            if ck.header.stage != Stage::Prosody {
                return Err(Error::Checkpoint(format!(
                    "{} holds a {} checkpoint, expected prosody",
                    prosody.display(),
                    ck.header.stage
                )));
            }
            let models = ctx.models()?;
            ck.apply(&models.ps)?;
            let o = ctx.stage_options(&stage, Stage::Face)?;
            report(&pretrain_face(&models, &ctx.cfg, &tr, &va, &o)?);
        }
        Command::Train {
            stage,
            prosody,
            lip,
            face,
        } => {
            let m = ctx.corpus(&stage.corpus)?;
            let (tr, va) = (ctx.features(&m, Split::Train)?, ctx.features(&m, Split::Val)?);
            let pre = [
                Checkpoint::load(&prosody)?,
                Checkpoint::load(&lip)?,
                Checkpoint::load(&face)?,
            ];
            let models = ctx.models()?;
            let o = ctx.stage_options(&stage, Stage::Joint)?;
            let refs: Vec<&Checkpoint> = pre.iter().collect();
            report(&train_joint(&models, &ctx.cfg, &tr, &va, &refs, &o)?);
        }
        Command::SelectEmbedding {
            models,
            speaker,
            split,
            out,
            pool_out,
        } => {
            let m = ctx.corpus(&models.corpus)?;
            let set = ctx.features(&m, split)?;
            let nets = ctx.trained(&models.checkpoints, &[FACE])?;
            let pool = EmbeddingPool::build(&nets, &set, exec)?;
            if let Some(p) = &pool_out {
                write_json(p, &pool)?;
            }
            let sel = i2i_select(&pool, &speaker, ctx.cfg.i2i_halve)?;
            write_json(&out, &sel)?;
            println!(
                "{}: utterance {} (negative speaker {}, ratio {:.6}) -> {}",
                sel.speaker_id,
                sel.utterance_id,
                sel.negative_speaker,
                sel.ratio,
                out.display()
            );
        }
        Command::Synth {
            models,
            lips,
            face,
            pool,
            out,
            name,
        } => {
            let m = ctx.corpus(&models.corpus)?;
            let nets = ctx.trained(&models.checkpoints, &[LIP, FACE, GENERATOR])?;
            let (lips_speaker, lips_utterance) = split_id(&lips)?;
            let source = if let Some(s) = face.face_speaker {
                FaceSource::Speaker(s)
            } else if let Some(u) = face.face_utt {
                let (speaker_id, utterance_id) = split_id(&u)?;
                FaceSource::Utterance {
                    speaker_id,
                    utterance_id,
                }
            } else if let Some(p) = face.face_image {
                FaceSource::Image(load_face_image(&p, &ctx.cfg.video)?)
            } else if let Some(p) = face.face_embedding {
                let text = std::fs::read_to_string(&p).map_err(|e| {
                    Error::NotFound(format!("{}: {e}", p.display()))
                })?;
                FaceSource::Embedding(serde_json::from_str(&text)?)
            } else {
                return Err(Error::InvalidInput("no face source given".into()));
            };
            let pool = match (&source, pool) {
                (FaceSource::Speaker(_), Some(p)) => Some(EmbeddingPool::load(&p)?),
                (FaceSource::Speaker(_), None) => Some(EmbeddingPool::build(
                    &nets,
                    &ctx.features(&m, Split::Train)?,
                    exec,
                )?),
                _ => None,
            };
            let req = SynthesisRequest {
                lips_speaker,
                lips_utterance,
                face: source,
            };
            let output = synthesize(&nets, &ctx.cfg, &m, pool.as_ref(), &req, exec)?;
            let (mel, wav) = write_output(&output, &out, &name)?;
            if let Some(sel) = &output.selection {
                write_json(&out.join(format!("{name}.selection.json")), sel)?;
            }
            println!("{} {}", mel.display(), wav.display());
        }
        Command::Eval {
            models,
            split,
            out,
            no_plot,
        } => {
            let m = ctx.corpus(&models.corpus)?;
            let set = ctx.features(&m, split)?;
            let nets = ctx.trained(&models.checkpoints, &[LIP, FACE, GENERATOR])?;
            let ck_hash = nets.ps.hash("")?;
            let r = run_eval(&nets, &set, &split.to_string(), &ctx.cfg.hash(), &ck_hash, exec, None)?;
            write_json(&out.join("report.json"), &r)?;
            if !no_plot && set.len() >= 3 {
                let e = face_embeddings(&nets, &set, exec)?;
                let labels: Vec<String> = set.items.iter().map(|u| u.speaker_id.clone()).collect();
                let p = project_2d(&e, &labels, ctx.cfg.seed, &out.join("face_embeddings.png"))?;
                log::info!("embedding plot via {:?}", p.method);
            }
            let sil = r
                .silhouette
                .map_or("n/a".to_string(), |s| format!("{s:.4}"));
            println!(
                "{split}: {} utterances, cer {:.4}, wer {:.4}, mel_l1 {:.4}, silhouette {sil}",
                r.utterances, r.cer, r.wer, r.mel_l1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
