//! Records through trained tokenizers, every registered prompt and back.

use std::sync::OnceLock;

use mmtok_core::pipeline::{build_instance, Decoded, Tokenizers};
use mmtok_core::prompt::{parse, serialize, target_span};
use mmtok_core::sampler::{fill_window, sample_tasks_with, SamplerWeights};
use mmtok_core::synth::{generate_dataset, AvatarWorld, SampleRecord, WorldConfig};
use mmtok_core::tasks::registry_default;
use mmtok_core::vocab::{BOS_ID, FIELD_SEP_ID, PAD_ID};
use mmtok_core::{ModalityKind, ModalityRef, TokenSpace, TokenizerConfig};
use proptest::prelude::*;

struct Setup {
    records: Vec<SampleRecord>,
    tok: Tokenizers,
    space: TokenSpace,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let world = AvatarWorld::new(WorldConfig::default()).unwrap();
        let records = generate_dataset(&world, 16, 40, 5).unwrap();
        let tok = Tokenizers::train(&records, &TokenizerConfig::compact(), 8, 3).unwrap();
        let space = tok.space().unwrap();
        Setup { records, tok, space }
    })
}

#[test]
fn compact_layout_is_stable() {
    let s = setup();
    assert_eq!(s.space.vocab_size(), 837);
    assert_eq!(s.space.layout.hash(), 0xdca2_6b97_318b_fb86);
    assert_eq!((PAD_ID, BOS_ID, FIELD_SEP_ID), (0, 1, 2));
}

#[test]
fn every_task_serializes_and_parses_back() {
    let s = setup();
    let reg = registry_default();
    assert_eq!(reg.len(), 72);
    for rec in &s.records[..4] {
        let t = s.tok.tokenize(&s.space, rec).unwrap();
        for spec in reg.specs() {
            let inst = build_instance(&t, spec).unwrap();
            let ser = serialize(&inst, &s.space).unwrap();
            assert_eq!(ser.tokens[0], BOS_ID);
            assert!(ser.tokens.iter().all(|&id| (id as usize) < s.space.vocab_size()));
            assert_eq!(parse(&ser.tokens, &s.space).unwrap(), inst);
            let (a, b) = target_span(&ser.tokens, ser.prefix_len, &s.space).unwrap();
            assert_eq!((a, b), (ser.prefix_len, ser.tokens.len()));
            assert_eq!(&ser.tokens[a..b], &inst.output_payload[..]);
            // each payload token sits in the range its position allows
            for (pos, &id) in inst.output_payload.iter().enumerate() {
                assert!(s.space.allowed(spec.output.kind, inst.output_dims, pos).unwrap().contains(&id));
            }
        }
    }
}

#[test]
fn text_and_labels_decode_exactly() {
    let s = setup();
    let rec = &s.records[0];
    let t = s.tok.tokenize(&s.space, rec).unwrap();
    let text = |r| match s.tok.decode(&s.space, t.get(r).unwrap()).unwrap() {
        Decoded::Text(x) => x,
        d => panic!("{d:?}"),
    };
    assert_eq!(text(ModalityRef::invariant(ModalityKind::Description)), rec.description);
    assert_eq!(text(ModalityRef::current(ModalityKind::Script)), rec.current.script);
    assert_eq!(text(ModalityRef::past(ModalityKind::Script)), rec.past.script);
    match s.tok.decode(&s.space, t.get(ModalityRef::current(ModalityKind::Semantic)).unwrap()).unwrap() {
        Decoded::Semantic(v) => {
            let truth = &rec.current.semantic;
            assert_eq!((v.frames, v.height, v.width), (truth.frames, truth.height, truth.width));
        }
        d => panic!("{d:?}"),
    }
}

#[test]
fn shape_decode_is_closer_than_the_mean() {
    let s = setup();
    let mean: Vec<f64> = (0..s.records[0].shape.len())
        .map(|i| s.records.iter().map(|r| r.shape[i]).sum::<f64>() / s.records.len() as f64)
        .collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let (mut err, mut base) = (0.0, 0.0);
    for rec in &s.records {
        let t = s.tok.tokenize(&s.space, rec).unwrap();
        let seg = t.get(ModalityRef::invariant(ModalityKind::Shape)).unwrap();
        let Decoded::Shape(x) = s.tok.decode(&s.space, seg).unwrap() else {
            panic!("not a shape")
        };
        err += sq(&x, &rec.shape);
        base += sq(&mean, &rec.shape);
    }
    assert!(err < 0.5 * base, "{err} vs {base}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windows_hold_whole_prompts(seed in any::<u64>(), budget in 200usize..1500) {
        let s = setup();
        let reg = registry_default();
        let n = reg.len();
        let weights = SamplerWeights { raw: vec![1.0; n], probs: vec![1.0 / n as f64; n] };
        let t: Vec<_> = s.records.iter().map(|r| s.tok.tokenize(&s.space, r).unwrap()).collect();
        let mut rng = mmtok_core::rng::seeded(seed);
        let mut drawn = Vec::new();
        let (w, packed) = fill_window(
            || {
                use rand::Rng as _;
                let task = sample_tasks_with(&weights, 1, &mut rng)[0];
                let rec = &t[rng.random_range(0..t.len())];
                drawn.push(task);
                serialize(&build_instance(rec, &reg.specs()[task]).unwrap(), &s.space).unwrap()
            },
            budget,
            PAD_ID,
        );
        prop_assert_eq!(w.tokens.len(), budget);
        prop_assert_eq!(packed.len(), w.spans.len());
        prop_assert!(w.tokens[w.used()..].iter().all(|&x| x == PAD_ID));
        for (i, &d) in packed.iter().enumerate() {
            let toks = w.instance_tokens(i);
            prop_assert_eq!(toks[0], BOS_ID);
            let inst = parse(toks, &s.space).unwrap();
            prop_assert_eq!(reg.specs()[drawn[d]].output, inst.output);
            prop_assert_eq!(w.spans[i].target.1 - w.spans[i].target.0, inst.output_payload.len());
        }
    }
}
