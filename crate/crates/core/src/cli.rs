//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{eval_batches, read_cloze_jsonl, sample_calibration, synth_cloze_set, synth_corpus, Corpus, Style, TokenBatch};
use crate::error::{Error, Result};
use crate::evalx::{eval_cloze, eval_val_loss, run_preset, Preset, PresetOptions, Scale};
use crate::importance::{
    block_importance, depth_scan_loss, depth_scan_task, estimate_width_importance, DepthMetric, ImportanceOptions,
    WidthImportance,
};
use crate::model::{ModelConfig, NormTap, ParamSet};
use crate::train::{correct_teacher, distill, train_ce, LossMode, MetricsLog, TrainConfig};
use crate::trim::{random_prune, trim_depth, trim_width, TrimReport};

/// Exit codes, one per failure class.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    /// Reserved by the argument parser for unknown flags and bad values.
    pub const USAGE: u8 = 2;
    pub const MISSING_FILE: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const INVALID_INPUT: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const CHECKPOINT: u8 = 7;
    pub const ARCH: u8 = 8;
}

fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::MissingDependency(_) => (exit::MISSING_FILE, "missing_file"),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (exit::MISSING_FILE, "missing_file"),
        Error::Io(_) => (exit::IO, "io"),
        Error::InvalidConfig(_) | Error::Config(_) | Error::Json(_) => (exit::CONFIG, "config"),
        Error::Divergence { .. } => (exit::DIVERGED, "diverged"),
        Error::Checkpoint(_) => (exit::CHECKPOINT, "checkpoint"),
        Error::ArchMismatch(_) | Error::Trim(_) => (exit::ARCH, "architecture"),
        Error::TokenOutOfRange { .. }
        | Error::SequenceTooLong { .. }
        | Error::Shape(_)
        | Error::CorpusTooShort(_)
        | Error::Empty(_)
        | Error::InvalidArgument(_) => (exit::INVALID_INPUT, "invalid_input"),
    }
}

#[derive(Parser, Debug)]
#[command(name = "shrink", version, about = "Prune and distill small decoder-only language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Training data: `a`, `b` (synthetic styles) or a path to a text file.
    #[arg(long)]
    pub data: String,
    /// Tokens to synthesize for synthetic data.
    #[arg(long, default_value_t = 1_000_000)]
    pub corpus_tokens: usize,
    /// Held-out evaluation batches (synthetic data only).
    #[arg(long, default_value_t = 8)]
    pub val_batches: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TrainConfig JSON.
    #[arg(long)]
    pub train_config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub workspace: PathBuf,
    /// Output stem inside the workspace.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a teacher from scratch with cross-entropy.
    Pretrain {
        #[arg(long)]
        model_config: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune a teacher on the distillation corpus.
    CorrectTeacher {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Cross-entropy retraining of an existing checkpoint.
    TrainCe {
        #[arg(long)]
        init: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Forward-KL distillation of a student from a frozen teacher.
    Distill {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Activation-based width importance.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 1_000_000)]
        corpus_tokens: usize,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        /// `post` (after the norm gain) or `pre`.
        #[arg(long, default_value = "post")]
        norm_tap: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth-importance scan.
    DepthScan {
        #[arg(long)]
        model: PathBuf,
        /// `loss`, `bi` or `task`.
        #[arg(long)]
        metric: DepthMetric,
        #[arg(long)]
        block_size: usize,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 1_000_000)]
        corpus_tokens: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        /// Cloze JSONL for `task`; synthesized from the data style when absent.
        #[arg(long)]
        cloze: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        items: usize,
        #[arg(long)]
        seed: u64,
        /// Output stem; `.json` and `.csv` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trim a checkpoint to a smaller architecture.
    Prune {
        #[arg(long)]
        model: PathBuf,
        /// Target ModelConfig JSON (width pruning).
        #[arg(long)]
        target_config: Option<PathBuf>,
        #[arg(long)]
        importance: Option<PathBuf>,
        /// Random keep-sets; needs --seed.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated 0-based layers to remove (depth pruning).
        #[arg(long, value_delimiter = ',')]
        drop_layers: Vec<usize>,
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long, default_value = "pruned")]
        name: String,
    },
    /// Validation loss and cloze accuracy of a checkpoint, printed as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value_t = 16)]
        batches: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long)]
        cloze: Option<PathBuf>,
        /// Synthesize this many cloze items from `--cloze-style`.
        #[arg(long)]
        cloze_items: Option<usize>,
        #[arg(long, default_value = "b")]
        cloze_style: Style,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a scripted experiment.
    Preset {
        name: Preset,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        workspace: PathBuf,
        /// `reference`, `quick` or a Scale JSON file.
        #[arg(long, default_value = "reference")]
        scale: String,
        /// Fail instead of building missing upstream artifacts.
        #[arg(long)]
        no_build_deps: bool,
    },
}

enum Source {
    Synthetic(Style),
    File(PathBuf),
}

fn parse_source(s: &str) -> Source {
    match s.parse::<Style>() {
        Ok(style) => Source::Synthetic(style),
        Err(_) => Source::File(PathBuf::from(s)),
    }
}

fn load_corpus(spec: &str, tokens: usize, seed: u64) -> Result<Corpus> {
    match parse_source(spec) {
        Source::Synthetic(style) => synth_corpus(style, tokens, seed),
        Source::File(p) => {
            if !p.exists() {
                return Err(Error::MissingDependency(p));
            }
            Corpus::from_file(&p)
        }
    }
}

fn val_set(spec: &str, n_batches: usize, tc: &TrainConfig, seed: u64) -> Result<Option<Vec<TokenBatch>>> {
    match parse_source(spec) {
        Source::Synthetic(style) if n_batches > 0 => {
            let tokens = n_batches * tc.batch_size * tc.seq_len + 1;
            let held_out = synth_corpus(style, tokens, seed ^ 0x7a1_5e7)?;
            Ok(Some(eval_batches(&held_out, tc.seq_len, tc.batch_size, n_batches)?))
        }
        _ => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingDependency(path.to_path_buf()));
    }
    serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<ParamSet> {
    load_checkpoint(path)
}

fn train_config(args: &TrainArgs, mode: LossMode) -> Result<TrainConfig> {
    let mut tc: TrainConfig = read_json(&args.train_config)?;
    tc.seed = args.seed;
    tc.loss_mode = mode;
    Ok(tc)
}

fn write_run(workspace: &Path, name: &str, params: &ParamSet, log: &MetricsLog) -> Result<PathBuf> {
    std::fs::create_dir_all(workspace)?;
    let ckpt = workspace.join(format!("{name}.mshr"));
    save_checkpoint(params, &ckpt)?;
    log.write_jsonl(&workspace.join(format!("{name}.metrics.jsonl")))?;
    Ok(ckpt)
}

fn run_training(args: &TrainArgs, default_name: &str, mode: LossMode, f: impl FnOnce(&Corpus, &TrainConfig, Option<&[TokenBatch]>) -> Result<(ParamSet, MetricsLog)>) -> Result<()> {
    let tc = train_config(args, mode)?;
    let corpus = load_corpus(&args.data.data, args.data.corpus_tokens, args.seed)?;
    let val = val_set(&args.data.data, args.data.val_batches, &tc, args.seed)?;
    let (params, log) = f(&corpus, &tc, val.as_deref())?;
    let name = args.name.as_deref().unwrap_or(default_name);
    let ckpt = write_run(&args.workspace, name, &params, &log)?;
    let final_val = log.final_val_loss();
    println!("{}", serde_json::json!({"checkpoint": ckpt, "steps": log.records.last().map(|r| r.step), "final_val_loss": final_val}));
    Ok(())
}

fn parse_norm_tap(s: &str) -> Result<NormTap> {
    match s {
        "post" | "post_gain" => Ok(NormTap::PostGain),
        "pre" | "pre_gain" => Ok(NormTap::PreGain),
        other => Err(Error::InvalidArgument(format!("unknown norm tap {other:?} (expected post or pre)"))),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { model_config, train } => {
            let cfg: ModelConfig = read_json(&model_config)?;
            cfg.validate()?;
            let init = ParamSet::init(&cfg, train.seed)?;
            run_training(&train, "teacher", LossMode::Ce, |c, tc, v| train_ce(&init, c, tc, v))
        }
        Command::CorrectTeacher { teacher, train } => {
            let t = load_model(&teacher)?;
            run_training(&train, "teacher_corrected", LossMode::Ce, |c, tc, v| correct_teacher(&t, c, tc, v))
        }
        Command::TrainCe { init, train } => {
            let p = load_model(&init)?;
            run_training(&train, "retrained_ce", LossMode::Ce, |c, tc, v| train_ce(&p, c, tc, v))
        }
        Command::Distill { student, teacher, train } => {
            let s = load_model(&student)?;
            let t = load_model(&teacher)?;
            run_training(&train, "distilled", LossMode::Kl, |c, tc, v| distill(&s, &t, c, tc, v))
        }
        Command::Importance { model, data, corpus_tokens, samples, seq_len, norm_tap, seed, out } => {
            let p = load_model(&model)?;
            let corpus = load_corpus(&data, corpus_tokens, seed)?;
            let windows = sample_calibration(&corpus, samples, seq_len, seed)?;
            let opts = ImportanceOptions { norm_tap: parse_norm_tap(&norm_tap)?, ..Default::default() };
            let mut imp = estimate_width_importance(&p, &windows, &opts)?;
            imp.meta.seed = Some(seed);
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            imp.save(&out)?;
            println!("{}", serde_json::json!({"importance": out, "digest": imp.digest()}));
            Ok(())
        }
        Command::DepthScan { model, metric, block_size, data, corpus_tokens, samples, seq_len, cloze, items, seed, out } => {
            let p = load_model(&model)?;
            let scan = match metric {
                DepthMetric::TaskAccuracy => {
                    let set = match cloze {
                        Some(path) => read_cloze_jsonl(&path)?,
                        None => match parse_source(&data) {
                            Source::Synthetic(style) => synth_cloze_set(style, items, seed)?,
                            Source::File(_) => {
                                return Err(Error::InvalidArgument("task metric on file data needs --cloze".into()))
                            }
                        },
                    };
                    depth_scan_task(&p, &set, block_size)?
                }
                _ => {
                    let corpus = load_corpus(&data, corpus_tokens, seed)?;
                    let windows = sample_calibration(&corpus, samples, seq_len, seed)?;
                    if metric == DepthMetric::LmLoss {
                        depth_scan_loss(&p, &windows, block_size, 16)?
                    } else {
                        block_importance(&p, &windows, block_size, 16)?
                    }
                }
            };
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            scan.save(&out.with_extension("json"))?;
            scan.write_csv(&out.with_extension("csv"))?;
            println!("{}", serde_json::to_string(&scan)?);
            Ok(())
        }
        Command::Prune { model, target_config, importance, random, seed, drop_layers, workspace, name } => {
            let p = load_model(&model)?;
            let (out, report): (ParamSet, TrimReport) = if !drop_layers.is_empty() {
                if target_config.is_some() || importance.is_some() || random {
                    return Err(Error::InvalidArgument("--drop-layers cannot be combined with width pruning".into()));
                }
                trim_depth(&p, &drop_layers)?
            } else {
                let target_path = target_config
                    .ok_or_else(|| Error::InvalidArgument("width pruning needs --target-config".into()))?;
                let target: ModelConfig = read_json(&target_path)?;
                if random {
                    let seed = seed.ok_or_else(|| Error::InvalidArgument("--random needs --seed".into()))?;
                    random_prune(&p, &target, seed)?
                } else {
                    let path = importance
                        .ok_or_else(|| Error::InvalidArgument("prune needs --importance unless --random --seed is given".into()))?;
                    let imp: WidthImportance = read_json(&path)?;
                    trim_width(&p, &target, &imp)?
                }
            };
            std::fs::create_dir_all(&workspace)?;
            let ckpt = workspace.join(format!("{name}.mshr"));
            save_checkpoint(&out, &ckpt)?;
            let rep_path = workspace.join(format!("{name}.trim_report.json"));
            report.save(&rep_path)?;
            println!("{}", serde_json::json!({"checkpoint": ckpt, "trim_report": rep_path}));
            Ok(())
        }
        Command::Eval { model, data, batches, batch_size, seq_len, cloze, cloze_items, cloze_style, seed } => {
            let p = load_model(&model)?;
            let mut result = serde_json::Map::new();
            if let Some(spec) = data {
                let tokens = batches * batch_size * seq_len + 1;
                let corpus = load_corpus(&spec, tokens, seed)?;
                let set = eval_batches(&corpus, seq_len, batch_size, batches)?;
                result.insert("val_loss".into(), serde_json::json!(eval_val_loss(&p, &set)?));
            }
            let items = match (cloze, cloze_items) {
                (Some(path), _) => Some(read_cloze_jsonl(&path)?),
                (None, Some(n)) => Some(synth_cloze_set(cloze_style, n, seed)?),
                (None, None) => None,
            };
            if let Some(items) = items {
                result.insert("cloze_accuracy".into(), serde_json::json!(eval_cloze(&p, &items)?));
                result.insert("cloze_items".into(), serde_json::json!(items.len()));
            }
            if result.is_empty() {
                return Err(Error::InvalidArgument("eval needs --data and/or a cloze set".into()));
            }
            println!("{}", serde_json::Value::Object(result));
            Ok(())
        }
        Command::Preset { name, seeds, workspace, scale, no_build_deps } => {
            let opts = PresetOptions { workspace, seeds, scale: Scale::by_name(&scale)?, build_deps: !no_build_deps };
            let summary = run_preset(name, &opts)?;
            for c in &summary.claims {
                println!(
                    "{} {:?} {}={:?} {} {}={:?}{}",
                    c.id,
                    c.verdict,
                    c.lhs_label,
                    c.lhs,
                    c.relation,
                    c.rhs_label,
                    c.rhs,
                    if c.asserted { "" } else { " (reported)" }
                );
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and maps failures to exit codes with a
/// single `error kind=<class> code=<n>: <message>` line on stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::from(exit::OK);
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error kind=usage code={}: {first}", exit::USAGE);
            return ExitCode::from(exit::USAGE);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={kind} code={code}: {msg}");
            ExitCode::from(code)
        }
    }
}
