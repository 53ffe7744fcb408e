//! The `mosaic` command line: argument parsing, config layering and one
//! handler per subcommand.
//!
//! Config values are layered as defaults, then the snapshot stored in a
//! checkpoint (for commands that read one), then `--config`, then `--set`,
//! then `--seed`, `--deterministic` and `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::RunConfig;
use crate::diagnostics::{erank_report, write_erank_csv};
use crate::dsp::{augment_with_trace, load_wav, log_mel, resample_linear, write_wav, Waveform};
use crate::experiment::Dataset;
use crate::gradsuite::{run_suite, Metric};
use crate::patch::MaskMode;
use crate::probe::{append_results_csv, extract_features, probe, Layers, ProbeConfig, ProbeKind};
use crate::report::{render_report, RunSummary};
use crate::rng::{derive_seed, stage};
use crate::train::{
    final_window_mean, load_pretrained, pretrain, train_supervised, Checkpoint, SupervisedMode, SupervisedSet,
};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "mosaic",
    version,
    about = "Contrastive audio pre-training with time-frequency masking"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (run.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequential data preparation and reproducible outputs (run.deterministic)
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (run.out)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and print its class histogram
    Synth {
        /// Also write every clip as WAV plus a manifest into this directory
        #[arg(long, value_name = "DIR")]
        export: Option<PathBuf>,
    },
    /// Contrastive pre-training on the training split
    Pretrain,
    /// Train a probe on frozen features of a checkpoint
    Probe {
        /// last | layer | weighted | attentive
        #[arg(long, default_value = "last")]
        kind: String,
        /// Layer index for `--kind layer`
        #[arg(long)]
        layer: Option<usize>,
        /// Checkpoint directory (default <out>/checkpoint)
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Supervised fine-tuning, or a frozen-encoder probe with --frozen
    Finetune {
        /// Train only the classifier
        #[arg(long)]
        frozen: bool,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Effective rank of held-out embeddings under inference-time masking
    Erank {
        #[arg(long, value_delimiter = ',', default_value = "none,unstructured,time_freq")]
        modes: Vec<String>,
        /// Center embeddings before the decomposition
        #[arg(long)]
        center: bool,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// CSV destination (default <out>/erank.csv)
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Dump the padded log-Mel spectrogram of a WAV file and print its stats
    Spectrogram {
        wav: PathBuf,
        /// Binary destination (default <out>/<stem>.spec)
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Write one augmented view of a WAV file, drawn from --seed
    Augment {
        wav: PathBuf,
        /// WAV destination (default <out>/<stem>.aug.wav)
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck,
    /// Summarize run directories into comparison tables
    Report {
        /// Run directories (default <out>)
        dirs: Vec<PathBuf>,
        /// Also write the tables to this file
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

fn command() -> clap::Command {
    Cli::command().after_long_help(format!("Config keys:\n{}", RunConfig::help_table()))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_VALIDATION;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn layered(common: &Common, snapshot: Option<&Checkpoint>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(ck) = snapshot {
        for (k, v) in &ck.config {
            cfg.set(k, v)?;
        }
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| crate::config::ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if common.deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(out) = &common.out {
        cfg.run.out = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config layered over the snapshot of the checkpoint the command reads.
fn with_checkpoint(common: &Common, explicit: &Option<PathBuf>) -> Result<(RunConfig, Checkpoint), Error> {
    let base = layered(common, None)?;
    let dir = explicit
        .clone()
        .unwrap_or_else(|| Path::new(&base.run.out).join("checkpoint"));
    require(&dir)?;
    let ck = Checkpoint::load(&dir)?;
    Ok((layered(common, Some(&ck))?, ck))
}

fn require(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("no such file or directory: {}", path.display())))
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(&cfg.run.out);
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    Ok(dir)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

fn read_audio(path: &Path, rate: u32) -> Result<Waveform, Error> {
    require(path)?;
    let w = load_wav(path)?;
    Ok(if w.sample_rate() == rate {
        w
    } else {
        resample_linear(&w, rate)?
    })
}

fn parse_kind(kind: &str, layer: Option<usize>) -> Result<ProbeKind, Error> {
    match (kind, layer) {
        ("layer", Some(k)) => Ok(ProbeKind::LinearLayer(k)),
        ("layer", None) => Err(Error::Invalid("--kind layer needs --layer K".into())),
        (_, Some(_)) => Err(Error::Invalid(format!("--layer only applies to --kind layer, not `{kind}`"))),
        (k, None) => k.parse(),
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { export } => {
            let cfg = layered(common, None)?;
            let data = Dataset::load(&cfg)?;
            let mut counts = vec![0usize; data.corpus.num_classes()];
            for c in &data.corpus.clips {
                counts[c.label] += 1;
            }
            println!("{} clips, {} train / {} test", data.corpus.len(), data.train.len(), data.test.len());
            for (name, n) in data.corpus.class_names.iter().zip(counts) {
                println!("  {name:<16} {n}");
            }
            if let Some(dir) = export {
                let manifest = data.corpus.export_wav(dir)?;
                println!("wrote {}", manifest.display());
            }
        }
        Command::Pretrain => {
            let cfg = layered(common, None)?;
            let data = Dataset::load(&cfg)?;
            let out = out_dir(&cfg)?;
            let path = out.join("config.txt");
            fs::write(&path, cfg.to_text()).map_err(Error::io(&path))?;
            let every = (cfg.run.steps / 20).max(1);
            let outcome = pretrain(&cfg, &data.train_clips(), Some(&out), |m| {
                if m.step % every == 0 || m.step + 1 == cfg.run.steps {
                    eprintln!("step {:>6}  loss {:.4}  lr {:.3e}", m.step, m.loss, m.lr);
                }
            })?;
            let first = outcome.metrics.first().map_or(f64::NAN, |m| m.loss);
            let last = final_window_mean(&outcome.metrics).unwrap_or(f64::NAN);
            println!("step-0 loss {first:.4}, final-window loss {last:.4}");
            println!("checkpoint {}", out.join("checkpoint").display());
        }
        Command::Probe {
            kind,
            layer,
            checkpoint,
        } => {
            let kind = parse_kind(kind, *layer)?;
            let (cfg, ck) = with_checkpoint(common, checkpoint)?;
            let data = Dataset::load(&cfg)?;
            let (store, fe) = load_pretrained(&cfg, &ck)?;
            let seq = cfg.run.deterministic;
            let extract = |idx: &[usize]| {
                extract_features(&store, &cfg.encoder, &fe, &data.clips(idx), &data.labels(idx), Layers::All, seq)
            };
            let (train, test) = (extract(&data.train)?, extract(&data.test)?);
            let pc = ProbeConfig {
                epochs: cfg.run.probe_epochs,
                lr: cfg.optim.probe_lr,
                batch: cfg.run.probe_batch,
                weight_decay: cfg.optim.weight_decay,
                seed: cfg.run.seed,
                ..ProbeConfig::new(kind)
            };
            let r = probe(&train, &test, &pc)?;
            println!("{} accuracy {:.4} (train {:.4})", r.kind, r.accuracy, r.train_accuracy);
            if let Some(w) = &r.layer_weights {
                let w: Vec<String> = w.iter().map(|x| format!("{x:.3}")).collect();
                println!("layer weights [{}]", w.join(", "));
            }
            append_results_csv(out_dir(&cfg)?.join("probes.csv"), &[r])?;
        }
        Command::Finetune { frozen, checkpoint } => {
            let (cfg, ck) = with_checkpoint(common, checkpoint)?;
            let data = Dataset::load(&cfg)?;
            let (mode, name) = if *frozen {
                (SupervisedMode::ProbeFrozen, "probe_frozen.jsonl")
            } else {
                (SupervisedMode::Finetune, "finetune.jsonl")
            };
            let path = out_dir(&cfg)?.join(name);
            let mut f = fs::File::create(&path).map_err(Error::io(&path))?;
            let mut write_err = None;
            let (trc, trl, tec, tel) = (
                data.train_clips(),
                data.labels(&data.train),
                data.test_clips(),
                data.labels(&data.test),
            );
            let outcome = train_supervised(
                mode,
                &cfg,
                &ck,
                data.corpus.num_classes(),
                &SupervisedSet { clips: &trc, labels: &trl },
                &SupervisedSet { clips: &tec, labels: &tel },
                |m| {
                    eprintln!("epoch {:>3}  test accuracy {:.4}", m.epoch, m.test_accuracy);
                    let line = serde_json::to_string(m).expect("metrics serialize");
                    if let Err(e) = writeln!(f, "{line}") {
                        write_err.get_or_insert(e);
                    }
                },
            )?;
            if let Some(e) = write_err {
                return Err(Error::io(&path)(e));
            }
            println!("test accuracy {:.4}", outcome.test_accuracy);
        }
        Command::Erank {
            modes,
            center,
            checkpoint,
            csv,
        } => {
            let modes: Vec<MaskMode> = modes
                .iter()
                .map(|m| m.trim().parse().map_err(Error::Invalid))
                .collect::<Result<_, _>>()?;
            let (cfg, ck) = with_checkpoint(common, checkpoint)?;
            let data = Dataset::load(&cfg)?;
            let (store, fe) = load_pretrained(&cfg, &ck)?;
            let clips = data.heldout(&cfg, cfg.run.erank_clips)?;
            let rows = erank_report(
                &store,
                &cfg.encoder,
                &fe,
                &clips,
                &cfg.mask_spec(),
                &modes,
                cfg.run.seed,
                cfg.run.deterministic,
                *center,
            )?;
            let path = match csv {
                Some(p) => p.clone(),
                None => out_dir(&cfg)?.join("erank.csv"),
            };
            write_erank_csv(&path, &rows)?;
            for r in &rows {
                println!("{:<14} B={} d={} erank {:.3}", r.mode.name(), r.b, r.d, r.erank);
            }
            println!("wrote {}", path.display());
        }
        Command::Spectrogram { wav, output } => {
            let cfg = layered(common, None)?;
            let w = read_audio(wav, cfg.mel.sample_rate)?;
            let raw = log_mel(&w, &cfg.mel)?;
            let spec = raw.pad_or_trim(cfg.mel.target_frames, cfg.mel.silence_level() as f32);
            let (mean, std) = raw.mean_std();
            let (lo, hi) = raw
                .values()
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let path = match output {
                Some(p) => p.clone(),
                None => out_dir(&cfg)?.join(format!("{}.spec", stem(wav))),
            };
            spec.save(&path)?;
            println!("raw frames {} -> {} x {}", raw.frames(), spec.frames(), spec.bins());
            println!("mean {mean:.4} std {std:.4} min {lo:.4} max {hi:.4}");
            println!("wrote {}", path.display());
        }
        Command::Augment { wav, output } => {
            let cfg = layered(common, None)?;
            let w = read_audio(wav, cfg.mel.sample_rate)?;
            let seed = derive_seed(cfg.run.seed, &[0, 0, 0, stage::AUGMENT]);
            let (aug, trace) = augment_with_trace(&w, &cfg.augment_config(), seed);
            let path = match output {
                Some(p) => p.clone(),
                None => out_dir(&cfg)?.join(format!("{}.aug.wav", stem(wav))),
            };
            write_wav(&path, &aug)?;
            for (name, v) in &trace.fired {
                println!("{name:<14} {v:.4}");
            }
            println!("wrote {}", path.display());
        }
        Command::Gradcheck => {
            let cfg = layered(common, None)?;
            let rows = run_suite(cfg.run.seed)?;
            let mut failed = Vec::new();
            println!("{:<26} {:>12} {:>8}  metric", "op", "error", "coords");
            for r in &rows {
                let metric = match r.metric {
                    Metric::Relative => "relative",
                    Metric::Invariant => "abs (invariant)",
                };
                let status = if r.passed() { "" } else { "  FAIL" };
                println!("{:<26} {:>12.3e} {:>8}  {metric}{status}", r.op, r.error, r.coordinates);
                if !r.passed() {
                    failed.push(r.op);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Failed(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Report { dirs, output } => {
            let cfg = layered(common, None)?;
            let dirs = if dirs.is_empty() {
                vec![PathBuf::from(&cfg.run.out)]
            } else {
                dirs.clone()
            };
            let mut runs = Vec::with_capacity(dirs.len());
            for d in &dirs {
                require(d)?;
                runs.push(RunSummary::load(d)?);
            }
            let text = render_report(&runs);
            print!("{text}");
            if let Some(p) = output {
                fs::write(p, &text).map_err(Error::io(p))?;
            }
        }
    }
    Ok(())
}
