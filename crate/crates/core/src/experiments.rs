//! Scaled-down experiments: memorising a small corpus, and measuring what
//! the emotion channel adds on the synthetic emotion corpus.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, extract_pairs, split_validation, ContextResponsePair};
use crate::emotion::EmotionLexicon;
use crate::error::Result;
use crate::evaluation::{cluster_margin, export_output_weights, perplexity, WeightExport};
use crate::models::{Example, Model, ModelConfig, ModelKind};
use crate::synthetic::{emotion_corpus, toy_dialogs, EmotionCorpusConfig};
use crate::training::{train, AdamConfig, LogRecord, StageData, StageSpec, TrainLog, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionExperimentConfig {
    pub corpus: EmotionCorpusConfig,
    pub val_pairs: usize,
    /// Every model size.
    pub d: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmotionExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: EmotionCorpusConfig::default(),
            val_pairs: 200,
            d: 16,
            epochs: 8,
            batch_size: 32,
            lr: 0.01,
            seed: 7,
        }
    }
}

#[derive(Debug)]
pub struct EmotionExperiment {
    pub full: Model<f32>,
    pub ablated: Model<f32>,
    pub full_log: TrainLog,
    pub ablated_log: TrainLog,
    pub full_val_perplexity: f64,
    pub ablated_val_perplexity: f64,
    pub export: WeightExport,
    /// Within-minus-across polarity cosine margin of the emotion halves.
    pub emotion_margin: f64,
    pub lm_margin: f64,
}

impl EmotionExperiment {
    /// `1 − full / ablated` validation perplexity.
    pub fn relative_gain(&self) -> f64 {
        1.0 - self.full_val_perplexity / self.ablated_val_perplexity
    }
}

/// Trains MEED and its `e = 0` ablation from the same initial parameters on
/// the same batches, then compares validation perplexity and the polarity
/// clustering of the two output-weight halves.
pub fn emotion_experiment(cfg: &EmotionExperimentConfig, lex: &EmotionLexicon) -> Result<EmotionExperiment> {
    let corpus = emotion_corpus(&cfg.corpus, lex)?;
    let (train_pairs, val_pairs) = split_validation(corpus.pairs(), cfg.val_pairs, cfg.seed);
    let train_ex = Example::encode_all(&train_pairs, &corpus.vocab, lex);
    let val_ex = Example::encode_all(&val_pairs, &corpus.vocab, lex);

    let config = ModelConfig::uniform(ModelKind::Meed, corpus.vocab.len(), cfg.d);
    let initial = Model::<f32>::new(config, cfg.seed)?;
    let opts = TrainOptions {
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        ..TrainOptions::default()
    };
    let stage = [StageData {
        spec: StageSpec {
            name: "synthetic".into(),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        },
        train: &train_ex,
        val: &val_ex,
    }];
    let mut full = initial.clone();
    let full_log = train(&mut full, &stage, &opts)?;
    let mut ablated = initial.emotion_ablation()?;
    let ablated_log = train(&mut ablated, &stage, &opts)?;

    let export = export_output_weights(&full, &corpus.vocab, &corpus.wordlist())?;
    let tags: Vec<String> = export.rows.iter().map(|r| r.polarity.clone()).collect();
    let lm: Vec<Vec<f64>> = export.rows.iter().map(|r| r.lm_half.clone()).collect();
    let emo: Vec<Vec<f64>> = export.rows.iter().filter_map(|r| r.emotion_half.clone()).collect();
    Ok(EmotionExperiment {
        full_val_perplexity: perplexity(&full, &val_ex)?,
        ablated_val_perplexity: perplexity(&ablated, &val_ex)?,
        emotion_margin: cluster_margin(&emo, &tags).unwrap_or(0.0),
        lm_margin: cluster_margin(&lm, &tags).unwrap_or(0.0),
        export,
        full,
        ablated,
        full_log,
        ablated_log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub pairs: usize,
    pub d: usize,
    pub max_epochs: usize,
    /// Training stops once its perplexity falls below this.
    pub target_perplexity: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            pairs: 32,
            d: 64,
            max_epochs: 500,
            target_perplexity: 1.3,
            lr: 0.005,
            seed: 1,
        }
    }
}

#[derive(Debug)]
pub struct OverfitOutcome {
    pub model: Model<f32>,
    pub vocab_size: usize,
    /// First epoch whose training perplexity fell below the target.
    pub reached_at: Option<usize>,
    /// Training perplexity after each epoch.
    pub curve: Vec<f64>,
}

impl OverfitOutcome {
    pub fn best(&self) -> f64 {
        self.curve.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// The first `pairs` context-response pairs of templated toy dialogs, and
/// the dialogs they came from.
pub fn toy_pairs(pairs: usize, seed: u64) -> (Vec<ContextResponsePair>, Vec<crate::corpus::Dialog>) {
    let dialogs = toy_dialogs(pairs.div_ceil(3), 4, seed);
    let out = dialogs.iter().flat_map(|d| extract_pairs(d, 6)).take(pairs).collect();
    (out, dialogs)
}

/// Trains MEED on a small toy corpus until training perplexity drops below
/// the target or `max_epochs` pass, recording it after every epoch.
pub fn overfit_toy(cfg: &OverfitConfig, lex: &EmotionLexicon) -> Result<OverfitOutcome> {
    let (pairs, dialogs) = toy_pairs(cfg.pairs, cfg.seed);
    let vocab = build_vocab(&dialogs, 300)?;
    let ex = Example::encode_all(&pairs, &vocab, lex);
    let mut model = Model::<f32>::new(ModelConfig::uniform(ModelKind::Meed, vocab.len(), cfg.d), cfg.seed)?;
    let opts = TrainOptions {
        adam: AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        stop_below: Some(cfg.target_perplexity),
        ..TrainOptions::default()
    };
    // Validating on the training set gives the training perplexity per epoch.
    let log = train(
        &mut model,
        &[StageData {
            spec: StageSpec {
                name: "overfit".into(),
                epochs: cfg.max_epochs,
                batch_size: cfg.pairs,
                seed: cfg.seed,
            },
            train: &ex,
            val: &ex,
        }],
        &opts,
    )?;
    let curve: Vec<f64> = log
        .epochs()
        .filter_map(|r| match r {
            LogRecord::Epoch { val_perplexity, .. } => *val_perplexity,
            _ => None,
        })
        .collect();
    let reached_at = curve.iter().position(|&p| p < cfg.target_perplexity).map(|i| i + 1);
    Ok(OverfitOutcome {
        model,
        vocab_size: vocab.len(),
        reached_at,
        curve,
    })
}
