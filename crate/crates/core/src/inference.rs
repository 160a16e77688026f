//! Greedy and beam-search decoding, and multi-turn chat sessions.
//!
//! Decoding records the context encoding once on a tape, then records each
//! step after a mark and rewinds to it once the step's values are copied
//! out. Memory stays flat over long responses.
//!
//! Conventions:
//! * The `go` and `pad` tokens are never generated.
//! * Greedy breaks ties toward the lowest token id.
//! * Beam search expands every live hypothesis over the vocabulary and
//!   ranks candidates by score, breaking ties toward the lexicographically
//!   smaller token sequence. Candidates ending in `eos` (or reaching
//!   `max_len`) that rank within the top `beam_width` move to a finished
//!   pool; the live beam is refilled to `beam_width` from the best
//!   unfinished candidates, so finished hypotheses never take a slot.
//! * Under raw log-probability scoring, search stops once the best finished
//!   score is at least the best live score, since scores only decrease.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Utterance, Vocabulary};
use crate::emotion::{indicator, EmotionIndicator, EmotionLexicon};
use crate::error::{Error, Result};
use crate::models::{Architecture, Context, ContextInput, Model, ModelKind};
use crate::tensor::{Real, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Maximum emitted tokens, eos included.
    pub max_len: usize,
    /// Rank finished hypotheses by mean rather than summed log-probability.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 256,
            max_len: 30,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam_width: 1,
            max_len,
            length_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::contract("beam_width and max_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis<T> {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Decoder state after the last token.
    pub state: Vec<T>,
    pub finished: bool,
    /// Utterance attention of the step that produced the last token.
    pub beta: Option<Vec<f64>>,
}

/// A decoded response. `tokens` ends in eos unless `max_len` was reached.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// The ranking score: `log_prob`, or `log_prob / len` when normalizing.
    pub score: f64,
    pub beta: Option<Vec<f64>>,
}

impl Decoded {
    /// Tokens without the trailing eos.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.tokens,
        }
    }
}

fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x.as_f64() - z).collect()
}

struct StepOut<T> {
    log_probs: Vec<Vec<f64>>,
    states: Vec<Vec<T>>,
    betas: Option<Vec<Vec<f64>>>,
}

/// Runs one decoder step for `rows` hypotheses of a single-row context and
/// rewinds the tape afterwards.
fn run_step<T: Real>(
    arch: &Architecture,
    t: &mut Tape<'_, T>,
    ctx: &Context,
    states: &[Vec<T>],
    prev: &[usize],
) -> Result<StepOut<T>> {
    let rows = prev.len();
    let d = arch.config.rnn_hidden;
    let mark = t.len();
    let ctx_b;
    let ctx = if rows == 1 {
        ctx
    } else {
        ctx_b = ctx.broadcast(t, rows)?;
        &ctx_b
    };
    let s = t.constant_from(vec![rows, d], states.concat())?;
    let step = arch.decode_step(t, ctx, s, prev)?;
    let v = arch.config.vocab_size;
    let logits = t.value(step.logits);
    let log_probs = (0..rows).map(|r| log_softmax_row(&logits[r * v..(r + 1) * v])).collect();
    let sv = t.value(step.state);
    let states = (0..rows).map(|r| sv[r * d..(r + 1) * d].to_vec()).collect();
    let betas = step.beta.map(|b| {
        let m = t.shape(b)[1];
        let bv = t.value(b);
        (0..rows)
            .map(|r| bv[r * m..(r + 1) * m].iter().map(|x| x.as_f64()).collect())
            .collect()
    });
    t.truncate(mark);
    Ok(StepOut {
        log_probs,
        states,
        betas,
    })
}

fn generable(arch: &Architecture, id: usize) -> bool {
    id != arch.config.go_id() && id != arch.config.pad_id()
}

/// Argmax decoding from `go` until eos or `max_len` tokens.
pub fn greedy_decode<T: Real>(model: &Model<T>, context: &ContextInput, max_len: usize) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let arch = &model.arch;
    let eos = arch.config.eos_id();
    let mut t = Tape::new(&model.params);
    let ctx = arch.encode_context(&mut t, &[context])?;
    let mut state = vec![T::zero(); arch.config.rnn_hidden];
    let mut prev = arch.config.go_id();
    let mut out = Decoded {
        tokens: Vec::new(),
        log_prob: 0.0,
        score: 0.0,
        beta: None,
    };
    while out.tokens.len() < max_len {
        let step = run_step(arch, &mut t, &ctx, std::slice::from_ref(&state), &[prev])?;
        let lp = &step.log_probs[0];
        let mut best: Option<usize> = None;
        for (id, &p) in lp.iter().enumerate() {
            if generable(arch, id) && best.is_none_or(|b| p > lp[b]) {
                best = Some(id);
            }
        }
        let best = best.expect("vocabulary has generable tokens");
        out.tokens.push(best);
        out.log_prob += lp[best];
        out.beta = step.betas.map(|mut b| b.swap_remove(0));
        state = step.states.into_iter().next().expect("one row");
        prev = best;
        if best == eos {
            break;
        }
    }
    out.score = out.log_prob;
    Ok(out)
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn final_score(log_prob: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        log_prob / len.max(1) as f64
    } else {
        log_prob
    }
}

/// Beam search; see the module docs for the exact retirement and tie rules.
pub fn beam_decode<T: Real>(model: &Model<T>, context: &ContextInput, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let arch = &model.arch;
    let eos = arch.config.eos_id();
    let width = cfg.beam_width;
    let mut t = Tape::new(&model.params);
    let ctx = arch.encode_context(&mut t, &[context])?;
    let mut live = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: vec![T::zero(); arch.config.rnn_hidden],
        finished: false,
        beta: None,
    }];
    let mut pool: Vec<BeamHypothesis<T>> = Vec::new();
    let best_pool = |pool: &[BeamHypothesis<T>]| {
        pool.iter()
            .map(|h| final_score(h.log_prob, h.tokens.len(), cfg.length_normalize))
            .fold(f64::NEG_INFINITY, f64::max)
    };

    while !live.is_empty() {
        let states: Vec<Vec<T>> = live.iter().map(|h| h.state.clone()).collect();
        let prev: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap_or(&arch.config.go_id())).collect();
        let step = run_step(arch, &mut t, &ctx, &states, &prev)?;

        // (hypothesis, token, score); at most width + 1 per hypothesis can matter.
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, lp) in step.log_probs.iter().enumerate() {
            let mut ids: Vec<usize> = (0..lp.len()).filter(|&i| generable(arch, i)).collect();
            let keep = (width + 1).min(ids.len());
            let by_score = |a: &usize, b: &usize| lp[*b].partial_cmp(&lp[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
            if keep < ids.len() {
                ids.select_nth_unstable_by(keep - 1, by_score);
                ids.truncate(keep);
            }
            cands.extend(ids.into_iter().map(|i| (h, i, live[h].log_prob + lp[i])));
        }
        let seq = |&(h, i, _): &(usize, usize, f64)| {
            let mut s = live[h].tokens.clone();
            s.push(i);
            s
        };
        let mut keyed: Vec<(Vec<usize>, (usize, usize, f64))> = cands.iter().map(|c| (seq(c), *c)).collect();
        keyed.sort_by(|a, b| rank((a.1 .2, &a.0), (b.1 .2, &b.0)));

        let mut next = Vec::with_capacity(width);
        for (rank_pos, (tokens, (h, i, score))) in keyed.into_iter().enumerate() {
            let finished = i == eos || tokens.len() >= cfg.max_len;
            if finished && rank_pos >= width {
                continue;
            }
            if !finished && next.len() >= width {
                continue;
            }
            let hyp = BeamHypothesis {
                tokens,
                log_prob: score,
                state: step.states[h].clone(),
                finished,
                beta: step.betas.as_ref().map(|b| b[h].clone()),
            };
            if finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
            if next.len() >= width && rank_pos + 1 >= width {
                break;
            }
        }
        live = next;
        if !cfg.length_normalize {
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if !pool.is_empty() && best_pool(&pool) >= best_live {
                break;
            }
        }
    }

    let best = pool
        .into_iter()
        .map(|h| (final_score(h.log_prob, h.tokens.len(), cfg.length_normalize), h))
        .min_by(|a, b| rank((a.0, &a.1.tokens), (b.0, &b.1.tokens)))
        .ok_or_else(|| Error::contract("beam search finished nothing"))?;
    Ok(Decoded {
        score: best.0,
        log_prob: best.1.log_prob,
        tokens: best.1.tokens,
        beta: best.1.beta,
    })
}

/// `greedy_decode` for width 1, `beam_decode` otherwise.
pub fn decode<T: Real>(model: &Model<T>, context: &ContextInput, cfg: &DecodeConfig) -> Result<Decoded> {
    if cfg.beam_width == 1 && !cfg.length_normalize {
        cfg.validate()?;
        greedy_decode(model, context, cfg.max_len)
    } else {
        beam_decode(model, context, cfg)
    }
}

/// Builds model input from utterances, truncating each to `max_len` tokens.
pub fn context_input(utterances: &[Utterance], vocab: &Vocabulary, lex: &EmotionLexicon, max_len: usize) -> ContextInput {
    ContextInput {
        utterances: utterances
            .iter()
            .map(|u| vocab.encode_tokens(&u.tokens[..u.tokens.len().min(max_len)]))
            .collect(),
        indicators: utterances.iter().map(|u| indicator(u, lex)).collect(),
    }
}

/// Joins tokens into display text, attaching punctuation and clitics to
/// the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let glue = tok.starts_with('\'')
            || tok == "n't"
            || (tok.len() == 1 && tok.chars().all(|c| c.is_ascii_punctuation() && !"([{\"".contains(c)));
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: Utterance,
}

/// Conversation state: the most recent turns, oldest first, at most `cap`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatSession {
    pub id: String,
    pub cap: usize,
    history: VecDeque<Turn>,
    turns_total: usize,
}

impl ChatSession {
    pub fn new(id: impl Into<String>, cap: usize) -> Self {
        Self {
            id: id.into(),
            cap: cap.max(1),
            history: VecDeque::new(),
            turns_total: 0,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &Turn> {
        self.history.iter()
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Turns ever recorded, including those dropped by the cap.
    pub fn turns_total(&self) -> usize {
        self.turns_total
    }

    pub fn push(&mut self, speaker: Speaker, utterance: Utterance) {
        self.history.push_back(Turn { speaker, utterance });
        self.turns_total += 1;
        while self.history.len() > self.cap {
            self.history.pop_front();
        }
    }

    pub fn utterances(&self) -> Vec<Utterance> {
        self.history.iter().map(|t| t.utterance.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub response: String,
    pub tokens: Vec<String>,
    /// One indicator per context utterance the model saw (MEED only, else empty).
    pub emotions: Vec<EmotionIndicator>,
    /// Utterance attention at the final decoding step (hierarchical models).
    pub attention: Option<Vec<f64>>,
    /// Number of utterances in the model's context.
    pub context_len: usize,
}

/// Adds the user's turn, generates a reply from the capped history, and adds
/// the reply. An empty generated reply is returned but not recorded.
pub fn respond<T: Real>(
    model: &Model<T>,
    session: &mut ChatSession,
    user_utterance: &str,
    lex: &EmotionLexicon,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Reply> {
    let user = Utterance::new(user_utterance);
    if user.is_empty() {
        return Err(Error::EmptyUtterance);
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::contract(format!(
            "vocabulary has {} entries, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    session.push(Speaker::User, user);
    let utterances = session.utterances();
    let input = context_input(&utterances, vocab, lex, model.config.max_utterance_len);
    let decoded = decode(model, &input, cfg)?;
    let words = vocab.decode(decoded.content(model.config.eos_id()));
    let response = detokenize(&words);
    let bot = Utterance::new(response.clone());
    if !bot.is_empty() {
        session.push(Speaker::Bot, bot);
    }
    Ok(Reply {
        response,
        tokens: words,
        emotions: if model.kind() == ModelKind::Meed {
            input.indicators.clone()
        } else {
            Vec::new()
        },
        attention: decoded.beta,
        context_len: input.turns(),
    })
}

/// Tokenizes and encodes free text as a one-utterance context.
pub fn single_context(text: &str, vocab: &Vocabulary, lex: &EmotionLexicon, max_len: usize) -> Result<ContextInput> {
    let u = Utterance::new(text);
    if tokenize(text).is_empty() {
        return Err(Error::EmptyUtterance);
    }
    Ok(context_input(&[u], vocab, lex, max_len))
}
