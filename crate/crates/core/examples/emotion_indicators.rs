//! Emotion indicators from the bundled lexicon, and the emotion flow vector
//! an untrained encoder computes over a context.

use meed::emotion::{indicator, EmotionEncoder, EmotionLexicon};
use meed::corpus::Utterance;
use meed::encoders::Init;
use meed::rng::SeededRng;
use meed::tensor::{ParamStore, Tape};

fn main() -> meed::Result<()> {
    let lex = EmotionLexicon::bundled();
    let context = ["he is worried about me", "what a lovely surprise", "the bus leaves at noon", "i hate waiting"];
    let mut indicators = Vec::new();
    for text in context {
        let ind = indicator(&Utterance::new(text), &lex);
        println!("{:?}  {:<28} {:?}", ind.bits(), text, ind.categories());
        indicators.push(ind);
    }

    let mut store = ParamStore::<f64>::new();
    let mut rng = SeededRng::new(0);
    let enc = EmotionEncoder::register(&mut store, "emotion", 8, 8, &mut Init { rng: &mut rng, scale: 0.1 })?;
    let mut t = Tape::new(&store);
    let e = enc.encode_indicators(&mut t, &indicators)?;
    println!("e = {:.4?}", t.value(e));
    Ok(())
}
