//! Memorises a 32-pair toy corpus with MEED and prints the perplexity curve.

use std::time::Instant;

use meed::emotion::EmotionLexicon;
use meed::experiments::{overfit_toy, OverfitConfig};

fn main() -> meed::Result<()> {
    let cfg = OverfitConfig::default();
    let started = Instant::now();
    let out = overfit_toy(&cfg, &EmotionLexicon::bundled())?;
    for (i, p) in out.curve.iter().enumerate().filter(|(i, _)| i % 25 == 0) {
        println!("epoch {:>4}  train ppl {p:.4}", i + 1);
    }
    match out.reached_at {
        Some(e) => println!("below {} at epoch {e} (|V| = {})", cfg.target_perplexity, out.vocab_size),
        None => println!("best {:.4} after {} epochs", out.best(), out.curve.len()),
    }
    println!("elapsed {:.1?}", started.elapsed());
    Ok(())
}
