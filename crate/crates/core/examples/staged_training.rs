//! Two-stage training from files: a broad stage, then a fine-tuning stage
//! that resumes from its parameters. Writes checkpoints and a JSONL log.

use meed::corpus::{write_dialogs, PrepareConfig};
use meed::models::ModelKind;
use meed::pipeline::{prepare_files, train_files, ModelSpec, StageFiles, TrainJob, TRAIN_LOG, TRAIN_PAIRS, VAL_PAIRS, VOCAB};
use meed::synthetic::toy_dialogs;
use meed::training::{StageSpec, TrainOptions};

fn main() -> meed::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| meed::Error::io("tempdir", e))?;
    let root = dir.path();
    write_dialogs(&root.join("dialogs.jsonl"), &toy_dialogs(60, 5, 1))?;
    let cfg = PrepareConfig {
        vocab_size: 500,
        val_size: 20,
        ..PrepareConfig::default()
    };
    prepare_files(&root.join("dialogs.jsonl"), root, &cfg)?;

    let stage = |name: &str, epochs| StageFiles {
        spec: StageSpec {
            name: name.into(),
            epochs,
            batch_size: 16,
            seed: 0,
        },
        train: root.join(TRAIN_PAIRS),
        val: Some(root.join(VAL_PAIRS)),
    };
    let job = TrainJob {
        model: ModelSpec::uniform(ModelKind::Meed, 32),
        vocab: root.join(VOCAB),
        lexicon: None,
        init_checkpoint: None,
        embeddings: None,
        stages: vec![stage("broad", 4), stage("fine", 2)],
        options: TrainOptions::default(),
    };
    println!("{}", serde_json::to_string_pretty(&job)?);
    let out = train_files(&job, &root.join("run"))?;
    print!("{}", std::fs::read_to_string(root.join("run").join(TRAIN_LOG)).map_err(|e| meed::Error::io(TRAIN_LOG, e))?);
    println!("final checkpoint {}", out.checkpoint.display());
    Ok(())
}
