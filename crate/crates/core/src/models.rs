//! The three model kinds and their shared decoder.
//!
//! * `S2S`: bidirectional encoder over the flattened context with flat
//!   additive attention.
//! * `HRAN`: hierarchical attention over word and utterance levels.
//! * `MEED`: HRAN plus the emotion context vector `e`, concatenated with the
//!   decoder state before the output layer.
//!
//! The decoder starts from `s_0 = 0` with `<go>` as first input:
//!
//! ```text
//! s_t = GRU(s_{t-1}, [c_t ; w_{y_{t-1}}])
//! o_t = [s_t ; e]  (MEED)   or   s_t
//! p_t = softmax(W o_t + b)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextResponsePair, Vocabulary};
use crate::emotion::{indicator, EmotionEncoder, EmotionIndicator, EmotionLexicon};
use crate::encoders::{
    affine, EncodedUtterance, GruCell, Init, TokenBatch, UtteranceAttention, UtteranceEncoder, WordAttention,
    WordEncoder,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const DEFAULT_INIT_SCALE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    S2S,
    Hran,
    Meed,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::S2S => "s2s",
            ModelKind::Hran => "hran",
            ModelKind::Meed => "meed",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s2s" | "seq2seq" => Ok(ModelKind::S2S),
            "hran" => Ok(ModelKind::Hran),
            "meed" => Ok(ModelKind::Meed),
            other => Err(Error::contract(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Content words plus the four specials, laid out as in [`Vocabulary`].
    pub vocab_size: usize,
    pub word_embed_dim: usize,
    pub rnn_hidden: usize,
    pub word_attn_depth: usize,
    pub utt_attn_depth: usize,
    pub emotion_dim: usize,
    pub max_context_turns: usize,
    pub max_utterance_len: usize,
    /// MEED only: run with `e := 0` everywhere.
    #[serde(default)]
    pub ablate_emotion: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, vocab_size: usize) -> Self {
        Self {
            kind,
            vocab_size,
            word_embed_dim: 256,
            rnn_hidden: 256,
            word_attn_depth: 256,
            utt_attn_depth: 128,
            emotion_dim: 256,
            max_context_turns: 5,
            max_utterance_len: 30,
            ablate_emotion: false,
        }
    }

    /// Every size set to `d`; attention depths included.
    pub fn uniform(kind: ModelKind, vocab_size: usize, d: usize) -> Self {
        Self {
            word_embed_dim: d,
            rnn_hidden: d,
            word_attn_depth: d,
            utt_attn_depth: d,
            emotion_dim: d,
            ..Self::new(kind, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("word_embed_dim", self.word_embed_dim),
            ("rnn_hidden", self.rnn_hidden),
            ("word_attn_depth", self.word_attn_depth),
            ("utt_attn_depth", self.utt_attn_depth),
            ("max_context_turns", self.max_context_turns),
            ("max_utterance_len", self.max_utterance_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::contract("vocab_size must cover the four specials"));
        }
        if self.kind == ModelKind::Meed && self.emotion_dim == 0 {
            return Err(Error::contract("MEED requires emotion_dim > 0"));
        }
        if self.ablate_emotion && self.kind != ModelKind::Meed {
            return Err(Error::contract("emotion ablation applies to MEED only"));
        }
        Ok(())
    }

    pub fn unk_id(&self) -> usize {
        self.vocab_size - 4
    }

    pub fn go_id(&self) -> usize {
        self.vocab_size - 3
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_size - 1
    }

    /// Longest flattened S2S context: every turn at full length plus separators.
    pub fn flat_context_cap(&self) -> usize {
        self.max_context_turns * (self.max_utterance_len + 1) - 1
    }

    /// Width of the output layer input.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::Meed => 2 * self.rnn_hidden,
            _ => self.rnn_hidden,
        }
    }

    /// Width of the context vector `c_t`.
    pub fn context_dim(&self) -> usize {
        match self.kind {
            ModelKind::S2S => 2 * self.rnn_hidden,
            _ => self.rnn_hidden,
        }
    }
}

/// Model input for one context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextInput {
    /// Token ids per utterance, oldest first; every utterance non-empty.
    pub utterances: Vec<Vec<usize>>,
    /// One indicator per utterance, computed from surface tokens so that
    /// out-of-vocabulary lexicon words still register.
    pub indicators: Vec<EmotionIndicator>,
}

impl ContextInput {
    pub fn turns(&self) -> usize {
        self.utterances.len()
    }
}

/// A context with its teacher-forced response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub context: ContextInput,
    /// `go, y_1 .. y_T`
    pub decoder_input: Vec<usize>,
    /// `y_1 .. y_T, eos`
    pub target: Vec<usize>,
}

impl Example {
    pub fn from_pair(pair: &ContextResponsePair, vocab: &Vocabulary, lex: &EmotionLexicon) -> Self {
        let enc = vocab.encode_pair(pair);
        Self {
            context: ContextInput {
                utterances: enc.context,
                indicators: pair.context.iter().map(|u| indicator(u, lex)).collect(),
            },
            decoder_input: enc.decoder_input,
            target: enc.target,
        }
    }

    pub fn encode_all(pairs: &[ContextResponsePair], vocab: &Vocabulary, lex: &EmotionLexicon) -> Vec<Example> {
        pairs.iter().map(|p| Self::from_pair(p, vocab, lex)).collect()
    }

    /// Target tokens including eos.
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn max_utterance_len(&self) -> usize {
        self.context.utterances.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Joins utterances with one `eos` between consecutive ones and keeps the
/// last `cap` tokens.
pub fn flatten_context(utterances: &[Vec<usize>], eos_id: usize, cap: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            out.push(eos_id);
        }
        out.extend_from_slice(u);
    }
    if out.len() > cap {
        out.drain(..out.len() - cap);
    }
    out
}

#[derive(Clone, Debug)]
pub enum ContextEncoder {
    Flat {
        words: WordEncoder,
        attention: WordAttention,
    },
    Hierarchical {
        words: WordEncoder,
        word_attention: WordAttention,
        utterances: UtteranceEncoder,
        utterance_attention: UtteranceAttention,
    },
}

/// Parameter handles for every trainable symbol.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embedding: ParamId,
    pub encoder: ContextEncoder,
    pub emotion: Option<EmotionEncoder>,
    pub decoder: GruCell,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Encoded context, valid for every decoding step of one tape.
#[derive(Clone, Debug)]
pub struct Context {
    pub rows: usize,
    pub turns: usize,
    utterances: Vec<EncodedUtterance>,
    /// `[rows×d]`; `None` for models without an emotion channel.
    pub emotion: Option<Var>,
}

impl Context {
    /// Replicates row 0 `rows` times, for decoding several hypotheses of one
    /// context in a single batch.
    pub fn broadcast<T: Real>(&self, t: &mut Tape<'_, T>, rows: usize) -> Result<Context> {
        if self.rows != 1 {
            return Err(Error::contract("only single-row contexts can be broadcast"));
        }
        let idx = vec![0usize; rows];
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let states = u.states.iter().map(|&v| t.gather_rows(v, &idx)).collect::<Result<Vec<_>>>()?;
            let projected = u.projected.iter().map(|&v| t.gather_rows(v, &idx)).collect::<Result<Vec<_>>>()?;
            let mask = (0..rows).flat_map(|_| u.mask.iter().copied()).collect();
            utterances.push(EncodedUtterance {
                states,
                mask,
                projected,
            });
        }
        let emotion = self.emotion.map(|e| t.gather_rows(e, &idx)).transpose()?;
        Ok(Context {
            rows,
            turns: self.turns,
            utterances,
            emotion,
        })
    }
}

/// One decoder step's outputs.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    /// Pre-softmax scores `[rows×|V|]`.
    pub logits: Var,
    /// New decoder state `[rows×d]`.
    pub state: Var,
    /// Utterance attention `[rows×m]`, hierarchical models only.
    pub beta: Option<Var>,
}

/// Configuration plus parameter handles: everything needed to record a
/// forward pass on a tape over a matching [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub layout: Layout,
}

/// An architecture with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Real> std::ops::Deref for Model<T> {
    type Target = Architecture;

    fn deref(&self) -> &Architecture {
        &self.arch
    }
}

impl<T: Real> std::ops::DerefMut for Model<T> {
    fn deref_mut(&mut self) -> &mut Architecture {
        &mut self.arch
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_scale(config, seed, DEFAULT_INIT_SCALE)
    }

    pub fn with_init_scale(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut init = Init { rng: &mut rng, scale };
        let mut params = ParamStore::new();
        let layout = Architecture::register(&config, &mut params, &mut init)?;
        Ok(Self {
            arch: Architecture { config, layout },
            params,
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// The MEED variant that runs with `e := 0`.
    pub fn emotion_ablation(&self) -> Result<Self> {
        if self.kind() != ModelKind::Meed {
            return Err(Error::contract("emotion ablation requires a MEED model"));
        }
        let mut m = self.clone();
        m.arch.config.ablate_emotion = true;
        Ok(m)
    }

    /// Split of output row `word` into its language-model and emotion halves.
    pub fn output_row(&self, word: usize) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let w = self.params.get(self.layout.out_w);
        if word >= self.config.vocab_size {
            return Err(Error::Index {
                what: "vocabulary",
                index: word,
                len: self.config.vocab_size,
            });
        }
        let row = w.row(word);
        let d = self.config.rnn_hidden;
        Ok(match self.kind() {
            ModelKind::Meed => (row[..d].to_vec(), Some(row[d..].to_vec())),
            _ => (row.to_vec(), None),
        })
    }

    /// Replaces embedding rows with vectors from a word2vec-style text file
    /// (optional `count dim` header, then `word v_1 .. v_dim` lines). Returns
    /// the number of rows replaced.
    pub fn import_embeddings(&mut self, text: &str, vocab: &Vocabulary) -> Result<usize> {
        let dim = self.config.word_embed_dim;
        let id = self.layout.embedding;
        let mut table = self.params.get(id).data().to_vec();
        let mut replaced = 0;
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() || (i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok())) {
                continue;
            }
            if fields.len() != dim + 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} values, found {}", dim, fields.len() - 1),
                });
            }
            let Some(row) = vocab.lookup(fields[0]) else { continue };
            if row >= self.config.vocab_size {
                continue;
            }
            for (k, f) in fields[1..].iter().enumerate() {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad number {f:?}"),
                })?;
                table[row * dim + k] = T::lit(v);
            }
            replaced += 1;
        }
        self.params.set_values(id, table)?;
        Ok(replaced)
    }

    /// Overwrites one named parameter; used by fixtures and tests.
    pub fn set_param(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))?;
        self.params.set_values(id, values)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.id(name).map(|id| self.params.get(id))
    }
}

impl Architecture {
    fn register<T: Real>(cfg: &ModelConfig, s: &mut ParamStore<T>, init: &mut Init<'_>) -> Result<Layout> {
        let d = cfg.rnn_hidden;
        let embedding = init.weight(s, "embedding".into(), &[cfg.vocab_size, cfg.word_embed_dim])?;
        let words = WordEncoder::register(s, "encoder.words", cfg.word_embed_dim, d, init)?;
        let encoder = match cfg.kind {
            ModelKind::S2S => ContextEncoder::Flat {
                attention: WordAttention::register(s, "encoder.attn", d, None, 2 * d, cfg.word_attn_depth, init)?,
                words,
            },
            ModelKind::Hran | ModelKind::Meed => ContextEncoder::Hierarchical {
                word_attention: WordAttention::register(
                    s,
                    "encoder.word_attn",
                    d,
                    Some(d),
                    2 * d,
                    cfg.word_attn_depth,
                    init,
                )?,
                utterances: UtteranceEncoder::register(s, "encoder.utt", 2 * d, d, init)?,
                utterance_attention: UtteranceAttention::register(s, "encoder.utt_attn", d, d, cfg.utt_attn_depth, init)?,
                words,
            },
        };
        let emotion = match cfg.kind {
            ModelKind::Meed => Some(EmotionEncoder::register(s, "emotion", cfg.emotion_dim, d, init)?),
            _ => None,
        };
        let decoder = GruCell::register(s, "decoder.gru", cfg.context_dim() + cfg.word_embed_dim, d, init)?;
        let out_w = init.weight(s, "output.w".into(), &[cfg.vocab_size, cfg.output_dim()])?;
        let out_b = init.bias(s, "output.b".into(), cfg.vocab_size)?;
        Ok(Layout {
            embedding,
            encoder,
            emotion,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Encodes a batch of contexts. Hierarchical models need every context in
    /// the batch to have the same number of turns.
    pub fn encode_context<T: Real>(&self, t: &mut Tape<'_, T>, contexts: &[&ContextInput]) -> Result<Context> {
        let rows = contexts.len();
        let first = contexts.first().ok_or_else(|| Error::contract("empty context batch"))?;
        for c in contexts {
            if c.utterances.is_empty() {
                return Err(Error::contract("context needs at least one utterance"));
            }
            if c.indicators.len() != c.utterances.len() {
                return Err(Error::contract("one emotion indicator per context utterance"));
            }
            for &id in c.utterances.iter().flatten() {
                if id >= self.config.vocab_size {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: id,
                        len: self.config.vocab_size,
                    });
                }
            }
        }
        let emb = t.param(self.layout.embedding)?;
        let pad = self.config.pad_id();
        let (utterances, turns) = match &self.layout.encoder {
            ContextEncoder::Flat { words, attention } => {
                let flat: Vec<Vec<usize>> = contexts
                    .iter()
                    .map(|c| flatten_context(&c.utterances, self.config.eos_id(), self.config.flat_context_cap()))
                    .collect();
                let refs: Vec<&[usize]> = flat.iter().map(Vec::as_slice).collect();
                let batch = TokenBatch::from_sequences(&refs, pad)?;
                let states = words.encode(t, emb, &batch)?;
                (vec![attention.prepare(t, states, batch.mask)?], 1)
            }
            ContextEncoder::Hierarchical {
                words, word_attention, ..
            } => {
                let m = first.turns();
                if contexts.iter().any(|c| c.turns() != m) {
                    return Err(Error::contract("hierarchical batch mixes turn counts"));
                }
                let mut out = Vec::with_capacity(m);
                for j in 0..m {
                    let refs: Vec<&[usize]> = contexts.iter().map(|c| c.utterances[j].as_slice()).collect();
                    let batch = TokenBatch::from_sequences(&refs, pad)?;
                    let states = words.encode(t, emb, &batch)?;
                    out.push(word_attention.prepare(t, states, batch.mask)?);
                }
                (out, m)
            }
        };
        let emotion = match &self.layout.emotion {
            None => None,
            Some(_) if self.config.ablate_emotion => Some(t.zeros(vec![rows, self.config.rnn_hidden])?),
            Some(enc) => {
                let mut inds = Vec::with_capacity(turns);
                for j in 0..first.turns() {
                    let column: Vec<EmotionIndicator> = contexts.iter().map(|c| c.indicators[j]).collect();
                    inds.push(EmotionEncoder::indicator_batch(t, &column)?);
                }
                Some(enc.encode(t, &inds)?)
            }
        };
        Ok(Context {
            rows,
            turns,
            utterances,
            emotion,
        })
    }

    /// Emotion context vector for one context; `None` unless MEED.
    pub fn emotion_vector<T: Real>(&self, t: &mut Tape<'_, T>, context: &ContextInput) -> Result<Option<Var>> {
        Ok(self.encode_context(t, &[context])?.emotion)
    }

    /// Initial decoder state `s_0 = 0`.
    pub fn initial_state<T: Real>(&self, t: &mut Tape<'_, T>, rows: usize) -> Result<Var> {
        t.zeros(vec![rows, self.config.rnn_hidden])
    }

    /// Context vector and utterance attention for state `s_prev`.
    pub fn attend<T: Real>(&self, t: &mut Tape<'_, T>, ctx: &Context, s_prev: Var) -> Result<(Var, Option<Var>)> {
        match &self.layout.encoder {
            ContextEncoder::Flat { attention, .. } => {
                let (r, _) = attention.attend(t, s_prev, None, &ctx.utterances[0])?;
                Ok((r, None))
            }
            ContextEncoder::Hierarchical {
                word_attention,
                utterances,
                utterance_attention,
                ..
            } => {
                let ells = utterances.encode(t, s_prev, &ctx.utterances, word_attention)?;
                let (c, beta) = utterance_attention.attend(t, s_prev, &ells)?;
                Ok((c, Some(beta)))
            }
        }
    }

    /// One decoder step from `s_prev` with previous tokens `prev` (one per row).
    pub fn decode_step<T: Real>(&self, t: &mut Tape<'_, T>, ctx: &Context, s_prev: Var, prev: &[usize]) -> Result<Step> {
        if prev.len() != ctx.rows {
            return Err(Error::Dimension {
                op: "decode_step",
                lhs: vec![ctx.rows],
                rhs: vec![prev.len()],
            });
        }
        let (c, beta) = self.attend(t, ctx, s_prev)?;
        let emb = t.param(self.layout.embedding)?;
        let w = t.gather_rows(emb, prev)?;
        let x = t.concat(&[c, w], 1)?;
        let state = self.layout.decoder.step(t, s_prev, x)?;
        let o = match ctx.emotion {
            Some(e) => t.concat(&[state, e], 1)?,
            None => state,
        };
        let logits = affine(t, o, self.layout.out_w, Some(self.layout.out_b))?;
        Ok(Step { logits, state, beta })
    }

    /// Summed target NLL and the number of target tokens, eos included.
    pub fn nll<T: Real>(&self, t: &mut Tape<'_, T>, batch: &[&Example]) -> Result<(Var, usize)> {
        let mut groups: Vec<Vec<&Example>> = Vec::new();
        if matches!(self.layout.encoder, ContextEncoder::Flat { .. }) {
            groups.push(batch.to_vec());
        } else {
            for &ex in batch {
                match groups.iter_mut().find(|g| g[0].context.turns() == ex.context.turns()) {
                    Some(g) => g.push(ex),
                    None => groups.push(vec![ex]),
                }
            }
        }
        let mut total: Option<Var> = None;
        let mut tokens = 0;
        for group in groups {
            let (sum, n) = self.group_nll(t, &group)?;
            tokens += n;
            total = Some(match total {
                None => sum,
                Some(acc) => t.add(acc, sum)?,
            });
        }
        let total = total.ok_or_else(|| Error::contract("empty batch"))?;
        if tokens == 0 {
            return Err(Error::contract("batch has no target tokens"));
        }
        Ok((total, tokens))
    }

    fn group_nll<T: Real>(&self, t: &mut Tape<'_, T>, group: &[&Example]) -> Result<(Var, usize)> {
        for ex in group {
            if ex.decoder_input.len() != ex.target.len() {
                return Err(Error::contract("decoder input and target lengths differ"));
            }
        }
        let contexts: Vec<&ContextInput> = group.iter().map(|e| &e.context).collect();
        let ctx = self.encode_context(t, &contexts)?;
        let steps = group.iter().map(|e| e.target.len()).max().unwrap_or(0);
        let pad = self.config.pad_id();
        let mut s = self.initial_state(t, group.len())?;
        let mut total: Option<Var> = None;
        let mut tokens = 0;
        for k in 0..steps {
            let prev: Vec<usize> = group.iter().map(|e| e.decoder_input.get(k).copied().unwrap_or(pad)).collect();
            let targets: Vec<Option<usize>> = group.iter().map(|e| e.target.get(k).copied()).collect();
            tokens += targets.iter().filter(|x| x.is_some()).count();
            let step = self.decode_step(t, &ctx, s, &prev)?;
            let nll = t.nll_sum(step.logits, &targets)?;
            total = Some(match total {
                None => nll,
                Some(acc) => t.add(acc, nll)?,
            });
            s = step.state;
        }
        let total = total.ok_or_else(|| Error::contract("batch has no target tokens"))?;
        Ok((total, tokens))
    }

    /// Per-token average cross-entropy over the batch.
    pub fn forward_loss<T: Real>(&self, t: &mut Tape<'_, T>, batch: &[&Example]) -> Result<Var> {
        let (sum, tokens) = self.nll(t, batch)?;
        t.scale(sum, T::lit(1.0 / tokens as f64))
    }
}
