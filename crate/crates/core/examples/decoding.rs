//! Greedy and beam-search decoding with an untrained model: shows the
//! width-1 equivalence and how beam width changes the best score.

use meed::corpus::{Utterance, Vocabulary};
use meed::emotion::EmotionLexicon;
use meed::inference::{beam_decode, context_input, greedy_decode, DecodeConfig};
use meed::models::{Model, ModelConfig, ModelKind};

fn main() -> meed::Result<()> {
    let vocab = Vocabulary::from_tokens(["hello", "there", "how", "are", "you", "fine", "thanks"])?;
    let model = Model::<f64>::with_init_scale(ModelConfig::uniform(ModelKind::Hran, vocab.len(), 8), 4, 1.5)?;
    let utts = [Utterance::new("hello there"), Utterance::new("how are you")];
    let ctx = context_input(&utts, &vocab, &EmotionLexicon::bundled(), 30);
    let eos = model.config.eos_id();

    let g = greedy_decode(&model, &ctx, 8)?;
    println!("greedy      {:?} logp {:.4}", vocab.decode(g.content(eos)), g.log_prob);
    for width in [1, 2, 4, 16, 64] {
        let b = beam_decode(&model, &ctx, &DecodeConfig { beam_width: width, max_len: 8, length_normalize: false })?;
        println!("beam {width:<3}    {:?} logp {:.4}", vocab.decode(b.content(eos)), b.log_prob);
    }
    let n = beam_decode(&model, &ctx, &DecodeConfig { beam_width: 16, max_len: 8, length_normalize: true })?;
    println!("normalized  {:?} mean logp {:.4}", vocab.decode(n.content(eos)), n.score);
    if let Some(beta) = g.beta {
        println!("utterance attention at the last step {beta:.3?}");
    }
    Ok(())
}
