//! A scripted multi-turn chat against a MEED model trained briefly on the
//! synthetic emotion corpus, showing indicators and attention per reply.

use meed::corpus::Vocabulary;
use meed::emotion::EmotionLexicon;
use meed::experiments::{emotion_experiment, EmotionExperimentConfig};
use meed::inference::{respond, ChatSession, DecodeConfig};
use meed::synthetic::emotion_corpus;

fn main() -> meed::Result<()> {
    let lex = EmotionLexicon::bundled();
    let cfg = EmotionExperimentConfig {
        epochs: 20,
        ..EmotionExperimentConfig::default()
    };
    let vocab: Vocabulary = emotion_corpus(&cfg.corpus, &lex)?.vocab;
    let model = emotion_experiment(&cfg, &lex)?.full;

    let mut session = ChatSession::new("demo", model.config.max_context_turns);
    let decode = DecodeConfig { beam_width: 4, max_len: 5, length_normalize: false };
    for text in ["w001 w002 w003", "w004 worried w005", "w006 w007", "w008 happy", "w009 furious w010"] {
        let r = respond(&model, &mut session, text, &lex, &vocab, &decode)?;
        let bits: Vec<[u8; 6]> = r.emotions.iter().map(|i| i.bits()).collect();
        println!("user: {text}");
        println!("bot:  {}  emotions {bits:?}", r.response);
        if let Some(beta) = r.attention {
            println!("      attention {beta:.3?}");
        }
    }
    println!("{} turns kept of {}", session.len(), session.turns_total());
    Ok(())
}
