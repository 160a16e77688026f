use meed::corpus::Utterance;
use meed::emotion::{indicator, indicator_for_tokens, EmotionEncoder, EmotionIndicator, EmotionLexicon};
use meed::encoders::Init;
use meed::rng::SeededRng;
use meed::tensor::{grad_check, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn encoder(seed: u64, de: usize, d: usize, scale: f64) -> (ParamStore<f64>, EmotionEncoder) {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let enc = EmotionEncoder::register(&mut store, "emotion", de, d, &mut Init { rng: &mut rng, scale }).unwrap();
    (store, enc)
}

#[test]
fn bundled_lexicon_fixture() {
    let lex = EmotionLexicon::bundled();
    assert_eq!(indicator(&Utterance::new("he is worried about me"), &lex).bits(), [0, 1, 1, 0, 0, 0]);
    assert_eq!(indicator(&Utterance::new("the train leaves at noon"), &lex), EmotionIndicator::NEUTRAL);
    assert_eq!(indicator(&Utterance::new("I'm so happy"), &lex).bits(), [1, 0, 0, 0, 0, 0]);
}

#[test]
fn empty_lexicon_makes_everything_neutral() {
    let lex = EmotionLexicon::parse("# nothing here\n").unwrap();
    assert!(lex.is_empty());
    assert_eq!(indicator(&Utterance::new("he is worried about me"), &lex), EmotionIndicator::NEUTRAL);
}

#[test]
fn embedding_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (mut store, enc) = encoder(seed, 3, 4, 1.0);
        let mut rng = SeededRng::new(seed + 50);
        let b = store.get(enc.b_e).len();
        let bias: Vec<f64> = (0..b).map(|_| rng.uniform(-1.0, 1.0)).collect();
        store.set_values(enc.b_e, bias).unwrap();
        let k = Tensor::uniform(vec![2, 4], 1.0, &mut rng).unwrap();
        let inds = [EmotionIndicator([0, 1, 1, 0, 0, 0]), EmotionIndicator([1, 0, 0, 0, 0, 0])];
        let flow = [EmotionIndicator::NEUTRAL, EmotionIndicator([0, 0, 0, 1, 1, 0])];
        let report = grad_check(&mut store, 1e-5, |t| {
            let x = EmotionEncoder::indicator_batch(t, &inds)?;
            let a = enc.embed(t, x)?;
            let steps = flow
                .iter()
                .zip(&inds)
                .map(|(f, i)| EmotionEncoder::indicator_batch(t, &[*f, *i]))
                .collect::<meed::Result<Vec<_>>>()?;
            let e = enc.encode(t, &steps)?;
            let a = t.slice_cols(a, 0, 3)?;
            let a = t.sum(a)?;
            let k = t.constant(&k)?;
            let e = t.mul(e, k)?;
            let e = t.sum(e)?;
            t.add(a, e)
        })
        .unwrap();
        assert_eq!(report.violations(1e-4, 1e-10), 0, "seed {seed}: {:?}", report.worst);
    }
}

#[test]
fn two_step_flow_matches_hand_unrolled_gru() {
    let (mut store, enc) = encoder(0, 2, 2, 0.0);
    let set = |store: &mut ParamStore<f64>, id, v: &[f64]| store.set_values(id, v.to_vec()).unwrap();
    let w_e = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1, -0.3, 0.2, 0.0, 0.4, -0.5, 0.1];
    set(&mut store, enc.w_e, &w_e);
    set(&mut store, enc.b_e, &[0.05, -0.05]);
    let c = &enc.cell;
    set(&mut store, c.w_z, &[0.2, -0.1, 0.3, 0.1]);
    set(&mut store, c.u_z, &[0.1, 0.2, -0.2, 0.1]);
    set(&mut store, c.b_z, &[0.01, -0.02]);
    set(&mut store, c.w_r, &[-0.3, 0.2, 0.1, 0.4]);
    set(&mut store, c.u_r, &[0.3, -0.1, 0.2, 0.2]);
    set(&mut store, c.b_r, &[0.0, 0.03]);
    set(&mut store, c.w_h, &[0.5, 0.1, -0.4, 0.2]);
    set(&mut store, c.u_h, &[-0.2, 0.3, 0.1, -0.1]);
    set(&mut store, c.b_h, &[0.02, 0.0]);

    let inds = [EmotionIndicator([0, 1, 1, 0, 0, 0]), EmotionIndicator::NEUTRAL];
    let mut t = Tape::new(&store);
    let e = enc.encode_indicators(&mut t, &inds).unwrap();
    let got = t.value(e).to_vec();

    let mv = |w: &[f64], x: &[f64]| -> Vec<f64> {
        let cols = x.len();
        (0..w.len() / cols).map(|i| (0..cols).map(|j| w[i * cols + j] * x[j]).sum()).collect()
    };
    let p = |id| store.get(id).data().to_vec();
    let mut h = vec![0.0, 0.0];
    for ind in &inds {
        let x: Vec<f64> = ind.0.iter().map(|&b| b as f64).collect();
        let a: Vec<f64> = mv(&w_e, &x).iter().zip([0.05, -0.05]).map(|(v, b)| sigmoid(v + b)).collect();
        let gate = |w, u, b| -> Vec<f64> {
            let (xa, hu, b): (Vec<f64>, Vec<f64>, Vec<f64>) = (mv(&p(w), &a), mv(&p(u), &h), p(b));
            (0..2).map(|i| sigmoid(xa[i] + hu[i] + b[i])).collect()
        };
        let z = gate(c.w_z, c.u_z, c.b_z);
        let r = gate(c.w_r, c.u_r, c.b_r);
        let rh: Vec<f64> = r.iter().zip(&h).map(|(r, h)| r * h).collect();
        let (xa, hu, b) = (mv(&p(c.w_h), &a), mv(&p(c.u_h), &rh), p(c.b_h));
        let cand: Vec<f64> = (0..2).map(|i| (xa[i] + hu[i] + b[i]).tanh()).collect();
        h = (0..2).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
    }
    for (g, w) in got.iter().zip(&h) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn single_utterance_flow_is_one_gru_step() {
    let (store, enc) = encoder(4, 3, 3, 0.5);
    let ind = EmotionIndicator([0, 0, 0, 1, 0, 0]);
    let mut t = Tape::new(&store);
    let e = enc.encode_indicators(&mut t, &[ind]).unwrap();
    let x = EmotionEncoder::indicator_batch(&mut t, &[ind]).unwrap();
    let a = enc.embed(&mut t, x).unwrap();
    let h0 = t.zeros(vec![1, 3]).unwrap();
    let h1 = enc.cell.step(&mut t, h0, a).unwrap();
    assert_eq!(t.value(e), t.value(h1));
}

#[test]
fn swapping_distinct_indicators_changes_e() {
    let a = EmotionIndicator([1, 0, 0, 0, 0, 0]);
    let b = EmotionIndicator([0, 0, 0, 1, 1, 0]);
    for seed in 0..5 {
        let (store, enc) = encoder(seed, 4, 4, 0.5);
        let mut t = Tape::new(&store);
        let ab = enc.encode_indicators(&mut t, &[a, b]).unwrap();
        let ba = enc.encode_indicators(&mut t, &[b, a]).unwrap();
        let diff: f64 = t.value(ab).iter().zip(t.value(ba)).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "seed {seed}");
    }
}

#[test]
fn empty_flow_is_a_contract_error() {
    let (store, enc) = encoder(0, 2, 2, 0.5);
    let mut t = Tape::new(&store);
    assert!(matches!(enc.encode(&mut t, &[]), Err(meed::Error::Contract(_))));
}

fn token() -> impl Strategy<Value = String> {
    let lex = EmotionLexicon::bundled();
    let words: Vec<String> = lex.words().map(str::to_string).collect();
    let stems: Vec<String> = lex.stems().map(|s| format!("{s}ing")).collect();
    prop_oneof![
        prop::sample::select(words),
        prop::sample::select(stems),
        "[a-z']{1,8}",
        "[.,!?]",
    ]
}

proptest! {
    #[test]
    fn exactly_one_of_emotion_or_neutral(tokens in prop::collection::vec(token(), 0..12)) {
        let lex = EmotionLexicon::bundled();
        let ind = indicator_for_tokens(&tokens, &lex);
        let any = ind.0[..5].contains(&1);
        prop_assert!(any ^ (ind.0[5] == 1));
        prop_assert!(ind.0.iter().all(|&b| b <= 1));
        prop_assert_eq!(ind, indicator_for_tokens(&tokens, &lex));
    }

    #[test]
    fn indicator_is_the_union_of_token_matches(tokens in prop::collection::vec(token(), 1..8)) {
        let lex = EmotionLexicon::bundled();
        let ind = indicator_for_tokens(&tokens, &lex);
        for c in meed::emotion::Category::ALL.iter().take(5) {
            let hit = tokens.iter().any(|t| lex.match_token(t).contains(c));
            prop_assert_eq!(ind.0[c.index()] == 1, hit);
        }
    }
}
