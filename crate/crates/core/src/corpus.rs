//! Dialog ingestion, context-response pair extraction and vocabulary.
//!
//! The preparation pipeline runs in a fixed order: extract pairs, drop pairs
//! with an over-long (or empty) utterance, cap duplicate responses, then
//! split and encode. Vocabulary frequencies are counted after the length
//! filter and before the duplicate cap, over each surviving dialog utterance
//! once.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const UNK: &str = "<unk>";
pub const GO: &str = "<go>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Special tokens in the order they are appended to the vocabulary.
pub const SPECIALS: [&str; 4] = [UNK, GO, EOS, PAD];

const CLITICS: [&str; 7] = ["'m", "'re", "'s", "'ve", "'ll", "'d", "n't"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub raw: String,
}

impl Utterance {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        Self {
            tokens: tokenize(&raw),
            raw,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub utterances: Vec<Utterance>,
    pub source_id: String,
    pub emotion_labels: Option<Vec<String>>,
}

impl Dialog {
    pub fn from_texts<S: AsRef<str>>(source_id: impl Into<String>, texts: &[S]) -> Self {
        Self {
            utterances: texts.iter().map(|t| Utterance::new(t.as_ref())).collect(),
            source_id: source_id.into(),
            emotion_labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextResponsePair {
    pub context: Vec<Utterance>,
    pub response: Utterance,
}

impl ContextResponsePair {
    fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.context.iter().chain(std::iter::once(&self.response))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialog_count: usize,
    pub utterance_count: usize,
    pub avg_turns: f64,
    pub avg_words_per_utterance: f64,
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

fn split_word(word: &str, out: &mut Vec<String>) {
    if !word.contains('\'') || CLITICS.contains(&word) {
        out.push(word.to_string());
        return;
    }
    if let Some(stem) = word.strip_suffix("n't") {
        if !stem.is_empty() && !stem.contains('\'') {
            out.push(stem.to_string());
            out.push("n't".to_string());
            return;
        }
    }
    if let Some(pos) = word.find('\'') {
        let (stem, clitic) = word.split_at(pos);
        if !stem.is_empty() && CLITICS.contains(&clitic) {
            out.push(stem.to_string());
            out.push(clitic.to_string());
            return;
        }
    }
    // Stray apostrophes become punctuation.
    for (i, piece) in word.split('\'').enumerate() {
        if i > 0 {
            out.push("'".to_string());
        }
        if !piece.is_empty() {
            out.push(piece.to_string());
        }
    }
}

/// Lowercases, splits ASCII punctuation into standalone tokens and keeps
/// English clitics (`'m`, `'re`, `n't`, ...) as single tokens.
///
/// The tokenizer is idempotent on its own space-joined output.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, tokens: &mut Vec<String>| {
        if !word.is_empty() {
            split_word(word, tokens);
            word.clear();
        }
    };
    for c in lowered.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if is_apostrophe(c) {
            word.push('\'');
        } else if c.is_ascii_punctuation() {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

/// Context-response pairs of one dialog with at most `max_turns` utterances
/// per pair (context plus response).
///
/// With utterances `x_1..x_M`, pair `i` (1-based, `i < M`) has context
/// `x_s..x_i` and response `x_{i+1}`, where `s = max(1, i - (max_turns - 2))`.
pub fn extract_pairs(dialog: &Dialog, max_turns: usize) -> Vec<ContextResponsePair> {
    let max_context = max_turns.saturating_sub(1).max(1);
    let u = &dialog.utterances;
    (1..u.len())
        .map(|i| {
            // i is the 1-based index of the last context utterance
            let start = i.saturating_sub(max_context);
            ContextResponsePair {
                context: u[start..i].to_vec(),
                response: u[i].clone(),
            }
        })
        .collect()
}

/// Drops pairs in which any utterance is longer than `max_len` tokens or
/// empty. The bound is inclusive and counts content tokens only.
pub fn filter_by_length(pairs: Vec<ContextResponsePair>, max_len: usize) -> Vec<ContextResponsePair> {
    pairs
        .into_iter()
        .filter(|p| p.utterances().all(|u| !u.is_empty() && u.len() <= max_len))
        .collect()
}

/// Keeps at most `threshold` pairs per distinct response token sequence,
/// retaining the earliest ones.
pub fn cap_duplicate_responses(
    pairs: Vec<ContextResponsePair>,
    threshold: usize,
) -> Result<Vec<ContextResponsePair>> {
    if threshold < 1 {
        return Err(Error::contract("duplicate-response threshold must be >= 1"));
    }
    let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
    Ok(pairs
        .into_iter()
        .filter(|p| {
            let n = seen.entry(p.response.tokens.clone()).or_insert(0);
            *n += 1;
            *n <= threshold
        })
        .collect())
}

pub fn stats(dialogs: &[Dialog]) -> CorpusStats {
    let dialog_count = dialogs.len();
    let utterance_count: usize = dialogs.iter().map(|d| d.utterances.len()).sum();
    let words: usize = dialogs
        .iter()
        .flat_map(|d| &d.utterances)
        .map(Utterance::len)
        .sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CorpusStats {
        dialog_count,
        utterance_count,
        avg_turns: ratio(utterance_count, dialog_count),
        avg_words_per_utterance: ratio(words, utterance_count),
    }
}

/// Encoded ids for one pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    /// One id sequence per context utterance, oldest first.
    pub context: Vec<Vec<usize>>,
    /// `go, y_1 .. y_T`
    pub decoder_input: Vec<usize>,
    /// `y_1 .. y_T, eos`
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    content_size: usize,
}

impl Vocabulary {
    /// Content tokens in id order; specials are appended.
    pub fn from_tokens<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for t in content {
            let t = t.into();
            if SPECIALS.contains(&t.as_str()) {
                return Err(Error::contract(format!("special token {t} listed as content")));
            }
            if index.insert(t.clone(), tokens.len()).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token {t}")));
            }
            tokens.push(t);
        }
        let content_size = tokens.len();
        for s in SPECIALS {
            index.insert(s.to_string(), tokens.len());
            tokens.push(s.to_string());
        }
        Ok(Self {
            tokens,
            index,
            content_size,
        })
    }

    /// Total size including specials; this is the model's `|V|`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn unk_id(&self) -> usize {
        self.content_size
    }

    pub fn go_id(&self) -> usize {
        self.content_size + 1
    }

    pub fn eos_id(&self) -> usize {
        self.content_size + 2
    }

    pub fn pad_id(&self) -> usize {
        self.content_size + 3
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens for ids, stopping at the first eos.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != self.eos_id())
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    pub fn encode_pair(&self, pair: &ContextResponsePair) -> EncodedPair {
        let response = self.encode_tokens(&pair.response.tokens);
        let mut decoder_input = Vec::with_capacity(response.len() + 1);
        decoder_input.push(self.go_id());
        decoder_input.extend_from_slice(&response);
        let mut target = response;
        target.push(self.eos_id());
        EncodedPair {
            context: pair.context.iter().map(|u| self.encode_tokens(&u.tokens)).collect(),
            decoder_input,
            target,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let n = lines.len();
        if n < SPECIALS.len() || lines[n - SPECIALS.len()..] != SPECIALS {
            return Err(Error::Parse {
                line: n,
                message: format!("vocabulary must end with {SPECIALS:?}"),
            });
        }
        Self::from_tokens(lines[..n - SPECIALS.len()].iter().copied()).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Top-`size` tokens by frequency over `utterances`, ties broken by earlier
/// first occurrence.
pub fn build_vocab_from<'a, I>(utterances: I, size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    if size < 1 {
        return Err(Error::contract("vocabulary size must be >= 1"));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for u in utterances {
        for t in &u.tokens {
            let e = counts.entry(t.as_str()).or_insert((0, order));
            e.0 += 1;
            order += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, f))| (t, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    Vocabulary::from_tokens(ranked.into_iter().take(size).map(|(t, _, _)| t))
}

pub fn build_vocab(dialogs: &[Dialog], size: usize) -> Result<Vocabulary> {
    build_vocab_from(dialogs.iter().flat_map(|d| &d.utterances), size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub max_turns: usize,
    pub max_len: usize,
    pub cap: usize,
    pub vocab_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            max_turns: 6,
            max_len: 30,
            cap: 10,
            vocab_size: 20_000,
            val_size: 10_240,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<ContextResponsePair>,
    pub val: Vec<ContextResponsePair>,
    pub vocab: Vocabulary,
}

/// Runs the full preparation pipeline over a corpus.
pub fn prepare(dialogs: &[Dialog], cfg: &PrepareConfig) -> Result<Prepared> {
    let mut filtered = Vec::new();
    // utterances (dialog, index) that take part in a surviving pair
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    for (d, dialog) in dialogs.iter().enumerate() {
        let pairs = extract_pairs(dialog, cfg.max_turns);
        for (i, pair) in pairs.into_iter().enumerate() {
            let start = i + 1 - pair.context.len();
            let kept = filter_by_length(vec![pair], cfg.max_len);
            if let Some(p) = kept.into_iter().next() {
                used.extend((start..=i + 1).map(|k| (d, k)));
                filtered.push(p);
            }
        }
    }
    let counted = dialogs.iter().enumerate().flat_map(|(d, dialog)| {
        let used = &used;
        dialog
            .utterances
            .iter()
            .enumerate()
            .filter(move |(k, _)| used.contains(&(d, *k)))
            .map(|(_, u)| u)
    });
    let vocab = build_vocab_from(counted, cfg.vocab_size)?;
    let capped = cap_duplicate_responses(filtered, cfg.cap)?;
    let (train, val) = split_validation(capped, cfg.val_size, cfg.seed);
    Ok(Prepared { train, val, vocab })
}

/// Holds out the last `val_size` pairs of a seeded shuffle. Both halves keep
/// corpus order.
pub fn split_validation(
    pairs: Vec<ContextResponsePair>,
    val_size: usize,
    seed: u64,
) -> (Vec<ContextResponsePair>, Vec<ContextResponsePair>) {
    let n = pairs.len();
    let k = val_size.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut perm);
    let held: HashSet<usize> = perm[n - k..].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, p) in pairs.into_iter().enumerate() {
        if held.contains(&i) {
            val.push(p);
        } else {
            train.push(p);
        }
    }
    (train, val)
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    dialog: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotions: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    context: Vec<String>,
    response: String,
}

fn parse_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Reads one dialog per line: `{"dialog": [...], "emotions": [...]}`.
pub fn read_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    let records: Vec<DialogRecord> = parse_jsonl(open(path)?, path)?;
    Ok(records
        .into_iter()
        .enumerate()
        .map(|(i, r)| Dialog {
            utterances: r.dialog.iter().map(Utterance::new).collect(),
            source_id: r.id.unwrap_or_else(|| (i + 1).to_string()),
            emotion_labels: r.emotions,
        })
        .collect())
}

pub fn write_dialogs(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    write_lines(
        path,
        dialogs.iter().map(|d| DialogRecord {
            id: Some(d.source_id.clone()),
            dialog: d.utterances.iter().map(|u| u.raw.clone()).collect(),
            emotions: d.emotion_labels.clone(),
        }),
    )
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes pairs as tokenized, space-joined text.
pub fn write_pairs(path: &Path, pairs: &[ContextResponsePair]) -> Result<()> {
    write_lines(
        path,
        pairs.iter().map(|p| PairRecord {
            context: p.context.iter().map(Utterance::text).collect(),
            response: p.response.text(),
        }),
    )
}

pub fn read_pairs(path: &Path) -> Result<Vec<ContextResponsePair>> {
    let records: Vec<PairRecord> = parse_jsonl(open(path)?, path)?;
    Ok(records
        .into_iter()
        .map(|r| ContextResponsePair {
            context: r.context.iter().map(Utterance::new).collect(),
            response: Utterance::new(r.response),
        })
        .collect())
}
