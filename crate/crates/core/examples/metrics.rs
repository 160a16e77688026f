//! Perplexity of an untrained model and corpus BLEU on hand-made pairs.

use meed::corpus::{ContextResponsePair, Utterance, Vocabulary};
use meed::emotion::EmotionLexicon;
use meed::evaluation::{bleu, perplexity};
use meed::models::{Example, Model, ModelConfig, ModelKind};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> meed::Result<()> {
    let vocab = Vocabulary::from_tokens(["i", "am", "fine", "good", "thanks", "you"])?;
    let pairs = vec![ContextResponsePair {
        context: vec![Utterance::new("how are you")],
        response: Utterance::new("i am fine thanks"),
    }];
    let ex = Example::encode_all(&pairs, &vocab, &EmotionLexicon::bundled());
    let model = Model::<f64>::new(ModelConfig::uniform(ModelKind::Meed, vocab.len(), 8), 0)?;
    println!("untrained perplexity {:.3} (|V| = {})", perplexity(&model, &ex)?, vocab.len());

    let cands = vec![words("the cat sat on a mat"), words("i am fine")];
    let refs = vec![words("the cat is on the mat"), words("i am fine thank you")];
    let s = bleu(&cands, &refs)?;
    println!("precisions {:.4?}", s.precisions);
    println!("BP {:.4}  BLEU-1..4 {:.4?}  average {:.4}", s.brevity_penalty, s.bleu, s.average);
    Ok(())
}
