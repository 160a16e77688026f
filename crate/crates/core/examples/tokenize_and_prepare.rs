//! Tokenizes dialogs, windows them into context-response pairs, and runs the
//! full preparation step into a temporary directory.

use meed::corpus::{extract_pairs, stats, tokenize, write_dialogs, Dialog, PrepareConfig};
use meed::pipeline::prepare_files;
use meed::synthetic::toy_dialogs;

fn main() -> meed::Result<()> {
    println!("{:?}", tokenize("I can't believe it's Monday... again!"));

    let d = Dialog::from_texts("demo", &["hi !", "hello , how are you ?", "fine , thanks .", "good to hear"]);
    for p in extract_pairs(&d, 6) {
        let ctx: Vec<String> = p.context.iter().map(|u| u.text()).collect();
        println!("{ctx:?} -> {}", p.response.text());
    }

    let dialogs = toy_dialogs(50, 5, 3);
    println!("{:?}", stats(&dialogs));
    let dir = tempfile::tempdir().map_err(|e| meed::Error::io("tempdir", e))?;
    let input = dir.path().join("dialogs.jsonl");
    write_dialogs(&input, &dialogs)?;
    let cfg = PrepareConfig {
        vocab_size: 500,
        val_size: 20,
        ..PrepareConfig::default()
    };
    let summary = prepare_files(&input, dir.path(), &cfg)?;
    println!(
        "{} train pairs, {} validation pairs, |V| = {}",
        summary.train_pairs, summary.val_pairs, summary.vocab_size
    );
    Ok(())
}
