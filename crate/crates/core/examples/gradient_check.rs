//! Central-difference gradient check of the full training loss for each
//! model kind.

use meed::emotion::EmotionIndicator;
use meed::models::{ContextInput, Example, Model, ModelConfig, ModelKind};
use meed::tensor::grad_check;

fn main() -> meed::Result<()> {
    for kind in [ModelKind::S2S, ModelKind::Hran, ModelKind::Meed] {
        let cfg = ModelConfig::uniform(kind, 12, 4);
        let (go, eos) = (cfg.go_id(), cfg.eos_id());
        let mut m = Model::<f64>::with_init_scale(cfg, 3, 1.0)?;
        let ex = Example {
            context: ContextInput {
                utterances: vec![vec![1, 2, 3], vec![4, 5]],
                indicators: vec![EmotionIndicator([0, 1, 1, 0, 0, 0]), EmotionIndicator([0, 0, 0, 0, 0, 1])],
            },
            decoder_input: vec![go, 6, 7],
            target: vec![6, 7, eos],
        };
        let arch = m.arch.clone();
        let report = grad_check(&mut m.params, 1e-5, |t| arch.forward_loss(t, &[&ex]))?;
        println!(
            "{kind:<5} {} entries, max rel error {:.2e}, violations {}",
            report.entries,
            report.max_rel_error,
            report.violations(1e-4, 1e-10)
        );
    }
    Ok(())
}
