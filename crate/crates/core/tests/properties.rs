//! Brute-force oracles and invariants over data, rendering, tokenization,
//! batching, and the consistency objective.

mod common;

use std::collections::HashSet;

use common::{brute_consistency, scan_first_digit};
use modadd::numerics::{Array, Graph};
use modadd::rendering::{render, render_variants, Family, Mixture, PositionRange, TemplateRegistry};
use modadd::rng::Stream;
use modadd::runner::{ExperimentId, Scale};
use modadd::task_data::{split, universe, Pair, SplitSpec, MODULUS};
use modadd::tokenizer::{Vocabulary, EXPR_CLOSE, EXPR_OPEN};
use modadd::training::{consistency_loss, curriculum_range, BatchSource};
use proptest::prelude::*;

#[test]
fn split_invariants_over_100_seeds() {
    let all: HashSet<Pair> = universe(MODULUS).unwrap().into_iter().collect();
    for seed in 42..142 {
        let s = split(seed, MODULUS).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4704, 4705), "seed {seed}");
        let train: HashSet<(u32, u32)> = s.train.iter().map(|p| (p.a, p.b)).collect();
        assert_eq!(train.len(), 4704, "seed {seed}: duplicate train pair");
        assert!(s.test.iter().all(|p| !train.contains(&(p.a, p.b))), "seed {seed}: overlap");
        let union: HashSet<Pair> = s.train.iter().chain(&s.test).copied().collect();
        assert_eq!(union, all, "seed {seed}: incomplete");
        assert!(union.iter().all(|p| p.label == (p.a + p.b) % 97));
    }
}

#[test]
fn split_file_round_trip() {
    let s = split(7, MODULUS).unwrap();
    assert_eq!(SplitSpec::from_text(&s.to_text(), 7, MODULUS).unwrap(), s);
    assert_ne!(split(8, MODULUS).unwrap(), s);
}

#[test]
fn rendering_position_oracle_10k() {
    let registry = TemplateRegistry::builtin();
    let templates = registry.templates();
    let mut rng = Stream::derived(1, "render-oracle");
    let (mut ok, mut attempts) = (0, 0);
    while ok < 10_000 {
        attempts += 1;
        assert!(attempts < 100_000, "too many infeasible draws");
        let pair = Pair::new(rng.below(97) as u32, rng.below(97) as u32, 97).unwrap();
        let t = &templates[rng.below(templates.len() as u64) as usize];
        let target = rng.inclusive(0, 70);
        let anchored = rng.below(2) == 1;
        let Ok(ex) = render(&pair, t, target, anchored, &mut rng) else { continue };
        ok += 1;
        assert_eq!(scan_first_digit(&ex.text), Some(target), "{:?} via {}", ex.text, t.id);
        assert_eq!(ex.position, target);
        assert!(ex.text.chars().count() <= 100);
        assert_eq!(ex.text.contains(EXPR_OPEN), anchored);
    }
}

#[test]
fn tokenizer_round_trip_10k() {
    let registry = TemplateRegistry::builtin();
    let vocab = Vocabulary::builtin();
    let templates = registry.templates();
    let mut rng = Stream::derived(2, "tokenizer-oracle");
    let mut ok = 0;
    while ok < 10_000 {
        let pair = Pair::new(rng.below(97) as u32, rng.below(97) as u32, 97).unwrap();
        let t = &templates[rng.below(templates.len() as u64) as usize];
        let anchored = rng.below(2) == 1;
        let Ok(ex) = render(&pair, t, rng.inclusive(0, 70), anchored, &mut rng) else { continue };
        ok += 1;
        let seq = vocab.encode(&ex.text).unwrap();
        assert_eq!(vocab.decode(&seq).unwrap(), ex.text);
        let chars = ex.text.chars().count();
        // Each anchor is one token standing for its whole literal.
        let expected = if anchored {
            chars - (EXPR_OPEN.len() - 1) - (EXPR_CLOSE.len() - 1)
        } else {
            chars
        };
        assert_eq!(seq.raw_len, expected);
        assert_eq!(seq.mask.iter().filter(|&&m| m).count(), seq.raw_len);
    }
}

#[test]
fn consistency_loss_matches_double_loop() {
    let mut rng = Stream::derived(3, "consistency-oracle");
    for k in [2, 3, 4] {
        for trial in 0..100 {
            let n_groups = rng.inclusive(1, 3);
            let rows: Vec<Vec<f64>> = (0..n_groups * k)
                .map(|_| (0..97).map(|_| rng.normal(2.0)).collect())
                .collect();
            let mut g = Graph::<f64>::new();
            let logits = g.leaf(Array::from_rows(&rows));
            let c = consistency_loss(&mut g, logits, k).unwrap();
            let got = g.value(c).item();
            let want = brute_consistency(&rows, k);
            assert!((got - want).abs() <= 1e-6 * want.max(1.0), "k {k} trial {trial}: {got} vs {want}");
        }
    }
}

#[test]
fn curriculum_table() {
    let r = |lo, hi| PositionRange { lo, hi };
    assert_eq!(curriculum_range(0).unwrap(), r(10, 30));
    assert_eq!(curriculum_range(1666).unwrap(), r(10, 30));
    assert_eq!(curriculum_range(1667).unwrap(), r(10, 50));
    assert_eq!(curriculum_range(3334).unwrap(), r(10, 70));
}

#[test]
fn mixture_frequencies() {
    let registry = TemplateRegistry::builtin();
    let mix = Mixture::by_family(&registry, &[(Family::Padding, 0.4), (Family::Natural, 0.4), (Family::Mixed, 0.2)]).unwrap();
    let mut rng = Stream::derived(4, "mixture");
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        match mix.draw(&mut rng).family {
            Family::Padding => counts[0] += 1,
            Family::Natural => counts[1] += 1,
            Family::Mixed => counts[2] += 1,
            f => panic!("drew {f:?}"),
        }
    }
    for (c, p) in counts.iter().zip([0.4, 0.4, 0.2]) {
        assert!((*c as f64 / 10_000.0 - p).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn baseline_batches_are_bare_at_zero() {
    let spec = ExperimentId::Baseline001.spec(Scale::Smoke);
    let registry = TemplateRegistry::builtin();
    let vocab = Vocabulary::builtin();
    let s = split(42, MODULUS).unwrap();
    let source = BatchSource::new(&s.train, &spec.train, &registry, &vocab).unwrap();
    let mut rng = Stream::derived(42, "train");
    for step in 0..100 {
        let batch = source.make_batch(step, &mut rng).unwrap();
        assert_eq!(batch.seqs.len(), 128);
        for ex in &batch.examples {
            assert_eq!(ex.text, format!("{}+{}=", ex.pair.a, ex.pair.b));
        }
    }
}

#[test]
fn steered_batches_follow_the_curriculum() {
    let registry = TemplateRegistry::builtin();
    let vocab = Vocabulary::builtin();
    let s = split(42, MODULUS).unwrap();
    for id in [ExperimentId::I1_001_1, ExperimentId::I1002a] {
        let spec = id.spec(Scale::Full);
        let source = BatchSource::new(&s.train, &spec.train, &registry, &vocab).unwrap();
        let mut rng = Stream::derived(42, "train");
        for step in [0, 1666, 1667, 3334, 4999] {
            let range = spec.train.curriculum.range_at(step).unwrap();
            let batch = source.make_batch(step, &mut rng).unwrap();
            assert_eq!(batch.seqs.len(), 256);
            for group in batch.examples.chunks(4) {
                let keys: HashSet<(usize, &str)> = group.iter().map(|e| (e.position, e.template_id.as_str())).collect();
                assert_eq!(keys.len(), 4, "variants not distinct");
                assert!(group.iter().all(|e| e.pair == group[0].pair && e.variant_group == group[0].variant_group));
            }
            for (ex, label) in batch.examples.iter().zip(&batch.labels) {
                assert!(range.contains(ex.position), "{id} step {step}: position {}", ex.position);
                assert_eq!(scan_first_digit(&ex.text), Some(ex.position));
                assert_eq!(*label, ex.pair.label as usize);
                assert_eq!(ex.anchored, spec.train.anchored);
            }
        }
    }
}

#[test]
fn batches_are_deterministic_per_seed() {
    let spec = ExperimentId::I1002a.spec(Scale::Smoke);
    let registry = TemplateRegistry::builtin();
    let vocab = Vocabulary::builtin();
    let s = split(43, MODULUS).unwrap();
    let source = BatchSource::new(&s.train, &spec.train, &registry, &vocab).unwrap();
    let texts = |seed| {
        let mut rng = Stream::derived(seed, "train");
        (0..3)
            .flat_map(|step| source.make_batch(step, &mut rng).unwrap().examples)
            .map(|e| e.text)
            .collect::<Vec<_>>()
    };
    assert_eq!(texts(43), texts(43));
    assert_ne!(texts(43), texts(44));
}

#[test]
fn variants_need_room_to_differ() {
    let registry = TemplateRegistry::builtin();
    let mix = Mixture::single(registry.get("bare").unwrap().clone());
    let pair = Pair::new(1, 2, 97).unwrap();
    let mut rng = Stream::derived(5, "variants");
    assert!(render_variants(&pair, 4, PositionRange::fixed(0), &mix, false, 0, &mut rng).is_err());
    assert_eq!(render_variants(&pair, 1, PositionRange::fixed(0), &mix, false, 0, &mut rng).unwrap()[0].text, "1+2=");
}

fn logit_rows(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), k..=k)
}

proptest! {
    #[test]
    fn consistency_is_nonnegative_and_permutation_invariant(rows in logit_rows(4), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let loss = |rows: &[Vec<f64>]| {
            let mut g = Graph::<f64>::new();
            let l = g.leaf(Array::from_rows(rows));
            let c = consistency_loss(&mut g, l, rows.len()).unwrap();
            g.value(c).item()
        };
        let base = loss(&rows);
        prop_assert!(base >= 0.0);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        prop_assert!((loss(&shuffled) - base).abs() < 1e-12);
        let same = vec![rows[0].clone(); 4];
        prop_assert_eq!(loss(&same), 0.0);
    }

    #[test]
    fn rendered_position_is_exact(a in 0u32..97, b in 0u32..97, target in 0usize..=70, idx in 0usize..22, anchored: bool, seed: u64) {
        let registry = TemplateRegistry::builtin();
        let t = &registry.templates()[idx % registry.templates().len()];
        let pair = Pair::new(a, b, 97).unwrap();
        if let Ok(ex) = render(&pair, t, target, anchored, &mut Stream::from_state(seed)) {
            prop_assert_eq!(scan_first_digit(&ex.text), Some(target));
        }
    }

    #[test]
    fn encode_rejects_or_round_trips(text in "[ -~]{0,120}") {
        let vocab = Vocabulary::builtin();
        if let Ok(seq) = vocab.encode(&text) {
            prop_assert_eq!(vocab.decode(&seq).unwrap(), text);
        }
    }
}
