//! Exports output-layer rows for a polarity-tagged word list after a short
//! run on the synthetic emotion corpus, then prints the clustering margins.

use meed::emotion::EmotionLexicon;
use meed::experiments::{emotion_experiment, EmotionExperimentConfig};

fn main() -> meed::Result<()> {
    let out = emotion_experiment(&EmotionExperimentConfig::default(), &EmotionLexicon::bundled())?;
    let tsv = out.export.to_tsv();
    for line in tsv.lines().take(4) {
        let cols: Vec<&str> = line.split('\t').collect();
        println!("{} ... ({} columns)", cols[..4].join("\t"), cols.len());
    }
    println!("emotion-half margin {:.4}, lm-half margin {:.4}", out.emotion_margin, out.lm_margin);
    Ok(())
}
