//! Generated corpora for experiments and demos.
//!
//! [`emotion_corpus`] builds dialogs whose response depends only on the
//! emotion category of one lexicon word planted in the context. Every
//! planted word is left out of the vocabulary, so the encoders see a bare
//! `<unk>` and the category is reachable only through the emotion
//! indicators. Neutral contexts get an out-of-lexicon `<unk>` as well, so
//! the mere presence of `<unk>` carries no signal.
//!
//! [`toy_dialogs`] produces small templated conversations for smoke tests
//! and overfitting runs.

use serde::{Deserialize, Serialize};

use crate::corpus::{extract_pairs, ContextResponsePair, Dialog, Utterance, Vocabulary};
use crate::emotion::{indicator_for_tokens, Category, EmotionIndicator, EmotionLexicon};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionCorpusConfig {
    pub dialogs: usize,
    /// Distinct filler tokens.
    pub fillers: usize,
    /// Response words per category.
    pub words_per_category: usize,
    /// Context utterances per dialog are drawn from `1..=max_context`.
    pub max_context: usize,
    /// Filler tokens per context utterance are drawn from `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EmotionCorpusConfig {
    fn default() -> Self {
        Self {
            dialogs: 2000,
            fillers: 40,
            words_per_category: 3,
            max_context: 3,
            min_len: 2,
            max_len: 5,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmotionCorpus {
    pub dialogs: Vec<Dialog>,
    /// Fillers and response words only; planted words map to `<unk>`.
    pub vocab: Vocabulary,
    /// `(word, category)` for every response word, grouped by category.
    pub response_words: Vec<(String, Category)>,
    /// The planted word's category for each dialog.
    pub categories: Vec<Category>,
}

impl EmotionCorpus {
    /// The final context-response pair of every dialog.
    pub fn pairs(&self) -> Vec<ContextResponsePair> {
        self.dialogs
            .iter()
            .filter_map(|d| extract_pairs(d, d.utterances.len()).pop())
            .collect()
    }

    /// Polarity-tagged word list for the weight export.
    pub fn wordlist(&self) -> Vec<(String, String)> {
        self.response_words.iter().map(|(w, c)| (w.clone(), c.name().to_string())).collect()
    }
}

/// `x` plus a three-letter category code and an index, e.g. `xanx2`.
pub fn response_word(category: Category, k: usize) -> String {
    format!("x{}{k}", &category.name()[..3])
}

/// Lexicon words whose indicator is exactly `category`, plus `negative` for
/// the three negative subcategories.
fn plantable(lex: &EmotionLexicon, category: Category) -> Vec<String> {
    let mut target = [0u8; 6];
    target[category.index()] = 1;
    if matches!(category, Category::Anxious | Category::Angry | Category::Sad) {
        target[Category::Negative.index()] = 1;
    }
    let exact = lex.words().map(str::to_string);
    let stems = lex.stems().map(|s| format!("{s}ed"));
    exact
        .chain(stems)
        .filter(|w| indicator_for_tokens(std::slice::from_ref(w), lex) == EmotionIndicator(target))
        .collect()
}

pub fn emotion_corpus(cfg: &EmotionCorpusConfig, lex: &EmotionLexicon) -> Result<EmotionCorpus> {
    if cfg.max_context == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.words_per_category == 0 {
        return Err(Error::contract("emotion corpus needs positive sizes and min_len <= max_len"));
    }
    let fillers: Vec<String> = (0..cfg.fillers).map(|i| format!("w{i:03}")).collect();
    let responses = Category::ALL.iter().flat_map(|&c| (0..cfg.words_per_category).map(move |k| response_word(c, k)));
    if let Some(bad) = fillers.iter().cloned().chain(responses).find(|f| !lex.match_token(f).is_empty()) {
        return Err(Error::contract(format!("generated word {bad} matches the lexicon")));
    }
    let mut planted: Vec<Vec<String>> = Vec::new();
    for c in &Category::ALL[..5] {
        let words = plantable(lex, *c);
        if words.is_empty() {
            return Err(Error::contract(format!("lexicon has no plantable {c} words")));
        }
        planted.push(words);
    }
    planted.push((0..50).map(|i| format!("zz{i:02}")).collect());

    let mut response_words = Vec::new();
    for c in Category::ALL {
        for k in 0..cfg.words_per_category {
            response_words.push((response_word(c, k), c));
        }
    }
    let vocab = Vocabulary::from_tokens(fillers.iter().cloned().chain(response_words.iter().map(|(w, _)| w.clone())))?;

    let mut rng = SeededRng::new(cfg.seed);
    let mut dialogs = Vec::with_capacity(cfg.dialogs);
    let mut categories = Vec::with_capacity(cfg.dialogs);
    for n in 0..cfg.dialogs {
        let category = Category::ALL[rng.below(6)];
        let turns = 1 + rng.below(cfg.max_context);
        let host = rng.below(turns);
        let mut texts = Vec::with_capacity(turns + 1);
        for j in 0..turns {
            let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
            let mut words: Vec<String> = (0..len).map(|_| rng.choose(&fillers).clone()).collect();
            if j == host {
                let pos = rng.below(len + 1);
                words.insert(pos, rng.choose(&planted[category.index()]).clone());
            }
            texts.push(words.join(" "));
        }
        let k = rng.below(cfg.words_per_category);
        texts.push(response_word(category, k));
        dialogs.push(Dialog {
            utterances: texts.iter().map(|t| Utterance::new(t.as_str())).collect(),
            source_id: format!("synthetic-{n}"),
            emotion_labels: Some(vec![category.name().to_string(); turns + 1]),
        });
        categories.push(category);
    }
    Ok(EmotionCorpus {
        dialogs,
        vocab,
        response_words,
        categories,
    })
}

const SUBJECTS: [&str; 8] = ["i", "you", "we", "they", "my sister", "the doctor", "our neighbor", "your friend"];
const VERBS: [&str; 10] = [
    "saw", "called", "missed", "found", "helped", "met", "visited", "thanked", "forgot", "heard",
];
const OBJECTS: [&str; 10] = [
    "the dog", "a letter", "the nurse", "my brother", "the teacher", "a stranger", "the old man", "her cousin",
    "the driver", "a child",
];
const TAILS: [&str; 10] = [
    "yesterday", "at the station", "this morning", "after work", "near the park", "last night", "in the rain",
    "at school", "on monday", "downtown",
];
const FEELINGS: [&str; 10] = [
    "i am so happy", "that is awful", "i am worried", "that makes me angry", "i feel sad", "how wonderful",
    "i am scared", "that is great", "i hate it", "what a relief",
];
const ASKS: [&str; 6] = ["really ?", "why ?", "are you sure ?", "what happened ?", "and then ?", "who told you ?"];

/// `dialogs` templated conversations of `turns` utterances each.
pub fn toy_dialogs(dialogs: usize, turns: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = SeededRng::new(seed);
    (0..dialogs)
        .map(|n| {
            let texts: Vec<String> = (0..turns)
                .map(|j| match (j + rng.below(2)) % 3 {
                    0 => format!(
                        "{} {} {} {} .",
                        rng.choose(&SUBJECTS),
                        rng.choose(&VERBS),
                        rng.choose(&OBJECTS),
                        rng.choose(&TAILS)
                    ),
                    1 => format!("{} , {} {} .", rng.choose(&FEELINGS), rng.choose(&SUBJECTS), rng.choose(&VERBS)),
                    _ => format!("{} {}", rng.choose(&ASKS), rng.choose(&FEELINGS)),
                })
                .collect();
            Dialog::from_texts(format!("toy-{n}"), &texts)
        })
        .collect()
}
