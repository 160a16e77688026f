//! Saves a model, reloads it bit-exactly, and shows the distinct load errors
//! for a corrupt header and a truncated file.

use meed::models::{Model, ModelConfig, ModelKind};

fn main() -> meed::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| meed::Error::io("tempdir", e))?;
    let path = dir.path().join("meed.ckpt");
    let model = Model::<f32>::new(ModelConfig::uniform(ModelKind::Meed, 40, 8), 2)?;
    model.save(&path)?;
    let loaded = Model::<f32>::load(&path)?;
    println!("round trip identical: {}", loaded.to_checkpoint_bytes() == model.to_checkpoint_bytes());
    println!("{} parameters in {} tensors", model.params.iter().map(|(_, _, t)| t.len()).sum::<usize>(), model.params.len());

    let mut bytes = model.to_checkpoint_bytes();
    bytes[0] ^= 0xff;
    println!("corrupt magic: {}", Model::<f32>::from_checkpoint_bytes(&bytes).unwrap_err());
    let bytes = model.to_checkpoint_bytes();
    println!("truncated:     {}", Model::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() / 2]).unwrap_err());
    Ok(())
}
