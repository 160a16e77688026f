//! File-level steps: prepare a corpus, train from a job description, and
//! evaluate a checkpoint. Each writes its artifacts deterministically, so
//! two runs with the same inputs and seeds produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::corpus::{self, read_dialogs, read_pairs, write_pairs, PrepareConfig, Vocabulary};
use crate::emotion::EmotionLexicon;
use crate::error::{Error, Result};
use crate::evaluation::{bleu, total_nll, EvalReport};
use crate::inference::{decode, DecodeConfig};
use crate::models::{Example, Model, ModelConfig, ModelKind, DEFAULT_INIT_SCALE};
use crate::training::{train, StageData, StageSpec, TrainLog, TrainOptions};

pub const TRAIN_PAIRS: &str = "train.jsonl";
pub const VAL_PAIRS: &str = "val.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMINGS: &str = "timings.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub dialogs: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub vocab_size: usize,
    pub stats: corpus::CorpusStats,
}

/// Reads dialogs from `input` and writes `train.jsonl`, `val.jsonl` and
/// `vocab.txt` into `out_dir`.
pub fn prepare_files(input: &Path, out_dir: &Path, cfg: &PrepareConfig) -> Result<PrepareSummary> {
    let dialogs = read_dialogs(input)?;
    let prepared = corpus::prepare(&dialogs, cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_pairs(&out_dir.join(TRAIN_PAIRS), &prepared.train)?;
    write_pairs(&out_dir.join(VAL_PAIRS), &prepared.val)?;
    prepared.vocab.save(&out_dir.join(VOCAB))?;
    Ok(PrepareSummary {
        dialogs: dialogs.len(),
        train_pairs: prepared.train.len(),
        val_pairs: prepared.val.len(),
        vocab_size: prepared.vocab.len(),
        stats: corpus::stats(&dialogs),
    })
}

/// Architecture sizes; unset fields take the defaults of [`ModelConfig::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rnn_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_attn_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utt_attn_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_dim: Option<usize>,
    #[serde(default)]
    pub ablate_emotion: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            word_embed_dim: None,
            rnn_hidden: None,
            word_attn_depth: None,
            utt_attn_depth: None,
            emotion_dim: None,
            ablate_emotion: false,
            seed: 0,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }

    /// Every size set to `d`.
    pub fn uniform(kind: ModelKind, d: usize) -> Self {
        Self {
            word_embed_dim: Some(d),
            rnn_hidden: Some(d),
            word_attn_depth: Some(d),
            utt_attn_depth: Some(d),
            emotion_dim: Some(d),
            ..Self::new(kind)
        }
    }

    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        let base = ModelConfig::new(self.kind, vocab_size);
        ModelConfig {
            word_embed_dim: self.word_embed_dim.unwrap_or(base.word_embed_dim),
            rnn_hidden: self.rnn_hidden.unwrap_or(base.rnn_hidden),
            word_attn_depth: self.word_attn_depth.unwrap_or(base.word_attn_depth),
            utt_attn_depth: self.utt_attn_depth.unwrap_or(base.utt_attn_depth),
            emotion_dim: self.emotion_dim.unwrap_or(base.emotion_dim),
            ablate_emotion: self.ablate_emotion,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFiles {
    #[serde(flatten)]
    pub spec: StageSpec,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
}

/// Everything `train` needs. Relative paths resolve against the caller's
/// working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub model: ModelSpec,
    pub vocab: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Start from these parameters instead of a fresh initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub stages: Vec<StageFiles>,
    #[serde(default)]
    pub options: TrainOptions,
}

pub fn load_lexicon(path: Option<&Path>) -> Result<EmotionLexicon> {
    match path {
        Some(p) => EmotionLexicon::load(p),
        None => Ok(EmotionLexicon::bundled()),
    }
}

fn read_examples(path: &Path, vocab: &Vocabulary, lex: &EmotionLexicon) -> Result<Vec<Example>> {
    Ok(Example::encode_all(&read_pairs(path)?, vocab, lex))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

/// Trains in 32-bit precision and writes `model.ckpt`, `train_log.jsonl`,
/// `timings.jsonl` and per-stage checkpoints into `out_dir`.
pub fn train_files(job: &TrainJob, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab = Vocabulary::load(&job.vocab)?;
    let lex = load_lexicon(job.lexicon.as_deref())?;
    let config = job.model.config(vocab.len());
    let mut model = match &job.init_checkpoint {
        Some(p) => {
            let m = Model::<f32>::load(p)?;
            if m.config.vocab_size != vocab.len() {
                return Err(Error::contract(format!(
                    "checkpoint vocabulary {} does not match {} ({})",
                    m.config.vocab_size,
                    job.vocab.display(),
                    vocab.len()
                )));
            }
            m
        }
        None => Model::<f32>::with_init_scale(config, job.model.seed, job.model.init_scale)?,
    };
    if let Some(p) = &job.embeddings {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let n = model.import_embeddings(&text, &vocab)?;
        log::info!("imported {n} embedding rows from {}", p.display());
    }
    let mut data = Vec::with_capacity(job.stages.len());
    for s in &job.stages {
        let train = read_examples(&s.train, &vocab, &lex)?;
        let val = match &s.val {
            Some(p) => read_examples(p, &vocab, &lex)?,
            None => Vec::new(),
        };
        data.push((s.spec.clone(), train, val));
    }
    let stages: Vec<StageData<'_>> = data
        .iter()
        .map(|(spec, train, val)| StageData {
            spec: spec.clone(),
            train,
            val,
        })
        .collect();
    let mut opts = job.options.clone();
    opts.checkpoint_dir.get_or_insert_with(|| out_dir.to_path_buf());
    let log = train(&mut model, &stages, &opts)?;
    let checkpoint = out_dir.join(CHECKPOINT);
    model.save(&checkpoint)?;
    log.save(&out_dir.join(TRAIN_LOG))?;
    log.save_timings(&out_dir.join(TIMINGS))?;
    Ok(TrainOutcome { model, log, checkpoint })
}

/// Perplexity over all pairs and BLEU of decoded responses against the gold
/// responses, optionally on the first `bleu_limit` pairs only.
pub fn evaluate<T: crate::tensor::Real>(
    model: &Model<T>,
    examples: &[Example],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    bleu_limit: Option<usize>,
) -> Result<EvalReport> {
    let (nll, tokens) = total_nll(model, examples)?;
    let n = bleu_limit.unwrap_or(examples.len()).min(examples.len());
    let mut cands = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    let eos = model.config.eos_id();
    for ex in &examples[..n] {
        let out = decode(model, &ex.context, cfg)?;
        cands.push(vocab.decode(out.content(eos)));
        let gold = ex.target.strip_suffix(&[eos]).unwrap_or(&ex.target);
        refs.push(vocab.decode(gold));
    }
    Ok(EvalReport {
        model_kind: model.kind().to_string(),
        pairs: examples.len(),
        target_tokens: tokens,
        perplexity: (nll / tokens as f64).exp(),
        bleu: bleu(&cands, &refs)?,
    })
}

/// Loads a checkpoint and pairs file, evaluates, and writes the text report
/// to `report` when given.
pub fn evaluate_files(
    checkpoint: &Path,
    pairs: &Path,
    vocab: &Path,
    lexicon: Option<&Path>,
    cfg: &DecodeConfig,
    bleu_limit: Option<usize>,
    report: Option<&Path>,
) -> Result<EvalReport> {
    let model = Model::<f32>::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    let lex = load_lexicon(lexicon)?;
    let examples = read_examples(pairs, &vocab, &lex)?;
    let out = evaluate(&model, &examples, &vocab, cfg, bleu_limit)?;
    if let Some(p) = report {
        write_atomic(p, out.to_string().as_bytes())?;
    }
    Ok(out)
}
