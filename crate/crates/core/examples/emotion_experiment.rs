//! Trains MEED and its emotion ablation on the synthetic emotion corpus and
//! compares validation perplexity and output-weight clustering.
//!
//! `cargo run --release --example emotion_experiment -- [epochs] [d]`

use std::time::Instant;

use meed::emotion::EmotionLexicon;
use meed::experiments::{emotion_experiment, EmotionExperimentConfig};

fn main() -> meed::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = EmotionExperimentConfig::default();
    if let Some(&e) = args.first() {
        cfg.epochs = e;
    }
    if let Some(&d) = args.get(1) {
        cfg.d = d;
    }
    let started = Instant::now();
    let out = emotion_experiment(&cfg, &EmotionLexicon::bundled())?;
    println!("full MEED val perplexity   {:.4}", out.full_val_perplexity);
    println!("e=0 ablation perplexity    {:.4}", out.ablated_val_perplexity);
    println!("relative gain              {:.1}%", 100.0 * out.relative_gain());
    println!("emotion-half margin        {:.4}", out.emotion_margin);
    println!("lm-half margin             {:.4}", out.lm_margin);
    println!("elapsed                    {:.1?}", started.elapsed());
    Ok(())
}
