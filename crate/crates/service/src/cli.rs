//! The `meed` command line. Every verb prints machine-readable output on
//! stdout and diagnostics on stderr. Exit status is 0 on success, 1 on
//! failure and 2 on a usage error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use meed::corpus::{read_dialogs, stats, PrepareConfig, Utterance, Vocabulary};
use meed::evaluation::{export_output_weights, finns_r, fleiss_kappa, parse_wordlist, RatingMatrix};
use meed::inference::{context_input, decode, detokenize, DecodeConfig};
use meed::models::{Model, ModelKind};
use meed::pipeline::{evaluate_files, load_lexicon, prepare_files, train_files, ModelSpec, StageFiles, TrainJob};
use meed::training::{AdamConfig, StageSpec, TrainOptions};
use serde_json::json;

use crate::config::{Overrides, ServiceConfig, DESK_BEAM_WIDTH};
use crate::error::ServiceError;

#[derive(Debug, Parser)]
#[command(name = "meed", version, about = "Emotion-aware multi-turn dialog models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract, filter and split context-response pairs and build a vocabulary.
    Prepare(PrepareArgs),
    /// Train from a JSON job file or from flags.
    Train(TrainArgs),
    /// Perplexity and BLEU of a checkpoint on a pairs file.
    Evaluate(EvaluateArgs),
    /// Generate one response per input line (utterances separated by tabs).
    Decode(DecodeArgs),
    /// Write output-layer rows for a word list as TSV.
    ExportWeights(ExportArgs),
    /// Corpus statistics of a dialogs file.
    Stats(StatsArgs),
    /// Fleiss' kappa and Finn's r of a rating matrix.
    Agreement(AgreementArgs),
    /// Serve the chat API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dialogs file, one JSON dialog per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub max_turns: usize,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Keep at most this many pairs with the same response.
    #[arg(long, default_value_t = 10)]
    pub cap: usize,
    #[arg(long, default_value_t = 20_000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 10_240)]
    pub val_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON job description; the remaining model and data flags are ignored.
    #[arg(long)]
    pub job: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "meed")]
    pub kind: ModelKind,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Set every layer size to this value.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DecodeFlags {
    #[arg(long, default_value_t = DESK_BEAM_WIDTH, conflicts_with = "greedy")]
    pub beam: usize,
    /// Same as `--beam 1`.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    #[arg(long)]
    pub length_normalize: bool,
}

impl DecodeFlags {
    pub fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_width: if self.greedy { 1 } else { self.beam },
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    /// Defaults to `vocab.txt` next to the pairs file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Decode only the first N pairs for BLEU.
    #[arg(long)]
    pub bleu_limit: Option<usize>,
    /// Also write the text report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Contexts, one per line; stdin when absent.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Print JSON lines with tokens, log-probability and attention.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// `word<TAB>polarity` lines.
    #[arg(long)]
    pub words: PathBuf,
    /// TSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    /// Tab-separated scores in `0..scale`, one item per line.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub scale: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub idle_timeout_secs: Option<u64>,
    #[arg(long)]
    pub max_sessions: Option<usize>,
    #[arg(long)]
    pub request_timeout_ms: Option<u64>,
    /// Allowed browser origin; repeatable.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

impl ServeArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            checkpoint: self.checkpoint.clone(),
            vocab: self.vocab.clone(),
            lexicon: self.lexicon.clone(),
            bind: self.bind.clone(),
            beam_width: self.beam,
            max_len: self.max_len,
            idle_timeout_secs: self.idle_timeout_secs,
            max_sessions: self.max_sessions,
            request_timeout_ms: self.request_timeout_ms,
            cors_origins: (!self.cors_origins.is_empty()).then(|| self.cors_origins.clone()),
        }
    }

    pub fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> Result<ServiceConfig, ServiceError> {
        let base = match &self.config {
            Some(p) => ServiceConfig::load(p)?,
            None => ServiceConfig::default(),
        };
        let cfg = base.layered(env, &self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first) and runs the verb; returns the exit
/// status.
pub fn main_with<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<(), ServiceError> {
    let s = serde_json::to_string_pretty(v).map_err(meed::Error::from)?;
    println!("{s}");
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn run(command: Command) -> Result<(), ServiceError> {
    match command {
        Command::Prepare(a) => {
            let cfg = PrepareConfig {
                max_turns: a.max_turns,
                max_len: a.max_len,
                cap: a.cap,
                vocab_size: a.vocab_size,
                val_size: a.val_size,
                seed: a.seed,
            };
            print_json(&prepare_files(&a.input, &a.out_dir, &cfg)?)
        }
        Command::Train(a) => {
            let job = match &a.job {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                    serde_json::from_str(&text).map_err(meed::Error::from)?
                }
                None => job_from_flags(&a)?,
            };
            let out = train_files(&job, &a.out_dir)?;
            let last_val = out.log.epochs().filter_map(|r| match r {
                meed::training::LogRecord::Epoch { val_perplexity, .. } => *val_perplexity,
                _ => None,
            });
            print_json(&json!({
                "checkpoint": out.checkpoint,
                "epochs": out.log.epochs().count(),
                "final_train_loss": out.log.last_train_loss(),
                "final_val_perplexity": last_val.last(),
            }))
        }
        Command::Evaluate(a) => {
            let vocab = a
                .vocab
                .clone()
                .unwrap_or_else(|| a.pairs.parent().unwrap_or(Path::new(".")).join(meed::pipeline::VOCAB));
            let report = evaluate_files(
                &a.model,
                &a.pairs,
                &vocab,
                a.lexicon.as_deref(),
                &a.decode.config(),
                a.bleu_limit,
                a.report.as_deref(),
            )?;
            if a.json {
                print_json(&report)
            } else {
                print!("{report}");
                Ok(())
            }
        }
        Command::Decode(a) => decode_lines(&a),
        Command::ExportWeights(a) => {
            let model = Model::<f32>::load(&a.model)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let text = std::fs::read_to_string(&a.words).map_err(io_err(&a.words))?;
            let export = export_output_weights(&model, &vocab, &parse_wordlist(&text)?)?;
            for w in &export.skipped {
                log::warn!("{w} is not in the vocabulary");
            }
            let tsv = export.to_tsv();
            match &a.out {
                Some(p) => std::fs::write(p, tsv).map_err(io_err(p)),
                None => {
                    print!("{tsv}");
                    Ok(())
                }
            }
        }
        Command::Stats(a) => print_json(&stats(&read_dialogs(&a.input)?)),
        Command::Agreement(a) => {
            let m = RatingMatrix::load(&a.ratings, a.scale)?;
            print_json(&json!({
                "items": m.items(),
                "raters": m.raters(),
                "scale": a.scale,
                "fleiss_kappa": fleiss_kappa(&m)?,
                "finns_r": finns_r(&m, a.scale)?,
            }))
        }
        Command::Serve(a) => {
            let cfg = a.resolve(|k| std::env::var(k).ok())?;
            if a.dry_run {
                let text = toml::to_string(&cfg).map_err(|e| ServiceError::Config(e.to_string()))?;
                print!("{text}");
                return Ok(());
            }
            crate::server::run(cfg)
        }
    }
}

fn job_from_flags(a: &TrainArgs) -> Result<TrainJob, ServiceError> {
    let (Some(train), Some(vocab)) = (&a.train, &a.vocab) else {
        return Err(ServiceError::Config("train needs --job, or --train and --vocab".into()));
    };
    let mut model = match a.dim {
        Some(d) => ModelSpec::uniform(a.kind, d),
        None => ModelSpec::new(a.kind),
    };
    model.seed = a.seed;
    Ok(TrainJob {
        model,
        vocab: vocab.clone(),
        lexicon: a.lexicon.clone(),
        init_checkpoint: None,
        embeddings: None,
        stages: vec![StageFiles {
            spec: StageSpec {
                name: "main".into(),
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: a.seed,
            },
            train: train.clone(),
            val: a.val.clone(),
        }],
        options: TrainOptions {
            adam: AdamConfig {
                lr: a.lr,
                ..AdamConfig::default()
            },
            ..TrainOptions::default()
        },
    })
}

fn decode_lines(a: &DecodeArgs) -> Result<(), ServiceError> {
    let model = Model::<f32>::load(&a.model)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let lex = load_lexicon(a.lexicon.as_deref())?;
    let cfg = a.decode.config();
    cfg.validate()?;
    let lines: Vec<String> = match &a.input {
        Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?.lines().map(String::from).collect(),
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io_err(Path::new("<stdin>")))?,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let eos = model.config.eos_id();
    for (i, line) in lines.iter().enumerate() {
        let utterances: Vec<Utterance> = line.split('\t').map(Utterance::new).filter(|u| !u.is_empty()).collect();
        if utterances.is_empty() {
            return Err(ServiceError::Config(format!("input line {} has no utterance", i + 1)));
        }
        let input = context_input(&utterances, &vocab, &lex, model.config.max_utterance_len);
        let d = decode(&model, &input, &cfg)?;
        let words = vocab.decode(d.content(eos));
        let text = if a.json {
            json!({
                "response": detokenize(&words),
                "tokens": words,
                "log_prob": d.log_prob,
                "attention": d.beta,
            })
            .to_string()
        } else {
            detokenize(&words)
        };
        writeln!(out, "{text}").map_err(io_err(Path::new("<stdout>")))?;
    }
    Ok(())
}
