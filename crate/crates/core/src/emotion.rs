//! Lexicon-driven emotion indicators and the emotion context encoder.
//!
//! Each utterance maps to a six-bit indicator over
//! `[positive, negative, anxious, angry, sad, neutral]`. The indicator is
//! embedded by a sigmoid dense layer and a GRU runs over the embedded
//! indicators from the first context utterance to the last; its final state
//! is the emotion context vector `e`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoders::{GruCell, Init};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

const BUNDLED: &str = include_str!("../data/emotion_lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Positive,
    Negative,
    Anxious,
    Angry,
    Sad,
    Neutral,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Positive,
        Category::Negative,
        Category::Anxious,
        Category::Angry,
        Category::Sad,
        Category::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Positive => "positive",
            Category::Negative => "negative",
            Category::Anxious => "anxious",
            Category::Angry => "angry",
            Category::Sad => "sad",
            Category::Neutral => "neutral",
        }
    }

    /// Parses a lexicon category. `neutral` is the fallback and never valid here.
    pub fn from_lexicon_name(name: &str) -> Option<Category> {
        Category::ALL[..5].iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bitmask over the five lexicon categories.
type CategorySet = u8;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmotionLexicon {
    exact: BTreeMap<String, CategorySet>,
    /// Stems of wildcard patterns, without the trailing star.
    prefixes: BTreeMap<String, CategorySet>,
}

impl EmotionLexicon {
    /// The starter lexicon shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled lexicon is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `pattern<TAB>cat1,cat2` lines. Blank lines and `#` comments are
    /// skipped; repeated patterns merge their categories.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let (pattern, cats) = trimmed
                .split_once('\t')
                .ok_or_else(|| err("expected pattern<TAB>categories".into()))?;
            let pattern = pattern.trim();
            if pattern.is_empty() || pattern.chars().any(char::is_whitespace) {
                return Err(err(format!("invalid pattern {pattern:?}")));
            }
            if pattern != pattern.to_lowercase() {
                return Err(err(format!("pattern {pattern:?} is not lowercase")));
            }
            let (stem, wildcard) = match pattern.strip_suffix('*') {
                Some(stem) => (stem, true),
                None => (pattern, false),
            };
            if stem.is_empty() || stem.contains('*') {
                return Err(err(format!("only a single trailing * is allowed in {pattern:?}")));
            }
            let mut set: CategorySet = 0;
            for name in cats.split(',').map(str::trim) {
                let cat = Category::from_lexicon_name(name)
                    .ok_or_else(|| err(format!("unknown category {name:?}")))?;
                set |= 1 << cat.index();
            }
            let map = if wildcard { &mut lex.prefixes } else { &mut lex.exact };
            *map.entry(stem.to_string()).or_default() |= set;
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Categories of a pattern as written in the file (`worri*`, `happy`).
    pub fn categories(&self, pattern: &str) -> Vec<Category> {
        let set = match pattern.strip_suffix('*') {
            Some(stem) => self.prefixes.get(stem),
            None => self.exact.get(pattern),
        };
        set.map(|&s| set_to_vec(s)).unwrap_or_default()
    }

    /// Categories carried by any pattern matching `token`.
    pub fn match_token(&self, token: &str) -> Vec<Category> {
        set_to_vec(self.token_set(token))
    }

    fn token_set(&self, token: &str) -> CategorySet {
        let mut set = self.exact.get(token).copied().unwrap_or(0);
        for (end, _) in token.char_indices().skip(1).chain(std::iter::once((token.len(), ' '))) {
            if let Some(&s) = self.prefixes.get(&token[..end]) {
                set |= s;
            }
        }
        set
    }

    /// Wildcard stems, in sorted order.
    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.prefixes.keys().map(String::as_str)
    }

    /// Exact-match patterns, in sorted order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.exact.keys().map(String::as_str)
    }
}

fn set_to_vec(set: CategorySet) -> Vec<Category> {
    Category::ALL[..5].iter().copied().filter(|c| set & (1 << c.index()) != 0).collect()
}

/// Six 0/1 bits in [`Category::ALL`] order; exactly one of "some emotion bit"
/// and "neutral" holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionIndicator(pub [u8; 6]);

impl EmotionIndicator {
    pub const NEUTRAL: EmotionIndicator = EmotionIndicator([0, 0, 0, 0, 0, 1]);

    pub fn bits(&self) -> [u8; 6] {
        self.0
    }

    pub fn is_neutral(&self) -> bool {
        self.0[5] == 1
    }

    pub fn categories(&self) -> Vec<Category> {
        Category::ALL.iter().copied().filter(|c| self.0[c.index()] == 1).collect()
    }

    pub fn as_reals<T: Real>(&self) -> [T; 6] {
        self.0.map(|b| T::lit(b as f64))
    }
}

pub fn indicator_for_tokens<S: AsRef<str>>(tokens: &[S], lex: &EmotionLexicon) -> EmotionIndicator {
    let set = tokens.iter().fold(0, |acc, t| acc | lex.token_set(t.as_ref()));
    let mut bits = [0u8; 6];
    for c in set_to_vec(set) {
        bits[c.index()] = 1;
    }
    if set == 0 {
        bits[5] = 1;
    }
    EmotionIndicator(bits)
}

pub fn indicator(utterance: &Utterance, lex: &EmotionLexicon) -> EmotionIndicator {
    indicator_for_tokens(&utterance.tokens, lex)
}

/// Dense sigmoid embedding of indicators followed by the emotion GRU.
#[derive(Clone, Debug)]
pub struct EmotionEncoder {
    /// `[d_e×6]`.
    pub w_e: ParamId,
    pub b_e: ParamId,
    pub cell: GruCell,
}

impl EmotionEncoder {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed_dim: usize,
        hidden: usize,
        init: &mut Init<'_>,
    ) -> Result<Self> {
        Ok(Self {
            w_e: init.weight(store, format!("{prefix}.w_e"), &[embed_dim, 6])?,
            b_e: init.bias(store, format!("{prefix}.b_e"), embed_dim)?,
            cell: GruCell::register(store, &format!("{prefix}.gru"), embed_dim, hidden, init)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden
    }

    /// Builds the `[B×6]` input for one context position.
    pub fn indicator_batch<T: Real>(t: &mut Tape<'_, T>, rows: &[EmotionIndicator]) -> Result<Var> {
        let data = rows.iter().flat_map(|r| r.as_reals::<T>()).collect();
        t.constant_from(vec![rows.len(), 6], data)
    }

    /// `a = σ(ind W_eᵀ + b_e)` for `ind: [B×6]`.
    pub fn embed<T: Real>(&self, t: &mut Tape<'_, T>, ind: Var) -> Result<Var> {
        let a = crate::encoders::affine(t, ind, self.w_e, Some(self.b_e))?;
        t.sigmoid(a)
    }

    /// Final GRU state over `indicators`, ordered first context utterance to last.
    pub fn encode<T: Real>(&self, t: &mut Tape<'_, T>, indicators: &[Var]) -> Result<Var> {
        let first = indicators
            .first()
            .ok_or_else(|| Error::contract("emotion flow needs at least one indicator"))?;
        let rows = t.shape(*first)[0];
        let mut h = t.zeros(vec![rows, self.cell.hidden])?;
        for &ind in indicators {
            let a = self.embed(t, ind)?;
            h = self.cell.step(t, h, a)?;
        }
        Ok(h)
    }

    /// Convenience for a single context given as indicators.
    pub fn encode_indicators<T: Real>(&self, t: &mut Tape<'_, T>, indicators: &[EmotionIndicator]) -> Result<Var> {
        let vars = indicators
            .iter()
            .map(|ind| Self::indicator_batch(t, std::slice::from_ref(ind)))
            .collect::<Result<Vec<_>>>()?;
        self.encode(t, &vars)
    }
}
