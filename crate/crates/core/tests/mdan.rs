mod common;

use common::oracle;
use common::*;
use dan_core::attention::RegionSet;
use dan_core::gradcheck::grad_check;
use dan_core::mdan::{
    mdan_similarity, mdan_step, ranking_loss, sample_negatives, sample_negatives_seeded, DualMemories, MDan,
    MDanConfig, PairRef, Quadruplet,
};
use dan_core::text::{encode_bidirectional, EncodedText, TokenSequence};
use dan_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn model(hidden: usize, steps: usize, seed: u64) -> MDan {
    MDan::new(small_mdan_config(hidden, steps, 5, 12, 5.0), seed).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn random_pairs(r: &mut impl Rng, n: usize, cfg: &MDanConfig) -> Vec<(RegionSet, TokenSequence)> {
    (0..n)
        .map(|_| {
            let regions = r.random_range(2..5);
            let valid = r.random_range(1..=4);
            (
                random_regions(r, regions, cfg.region_dim, 1.0),
                random_tokens(r, valid, 5, cfg.vocab_size),
            )
        })
        .collect()
}

fn refs(data: &[(RegionSet, TokenSequence)]) -> Vec<PairRef<'_>> {
    data.iter().map(|(v, u)| PairRef { regions: v, text: u }).collect()
}

fn oracle_similarity(m: &MDan, regions: &RegionSet, text: &TokenSequence) -> f64 {
    oracle::mdan(m.params(), m.config().steps, &oracle::rows_of(regions.features()), text.ids(), text.valid_len()).0
}

/// Sum of hinges from a full matrix of oracle similarities.
fn oracle_ranking_loss(m: &MDan, data: &[(RegionSet, TokenSequence)], quads: &[Quadruplet], margin: f64) -> f64 {
    let s = |i: usize, j: usize| oracle_similarity(m, &data[i].0, &data[j].1);
    quads
        .iter()
        .map(|q| {
            let pos = s(q.positive, q.positive);
            (margin - pos + s(q.negative_image, q.positive)).max(0.0)
                + (margin - pos + s(q.positive, q.negative_text)).max(0.0)
        })
        .sum()
}

fn loss_value(m: &MDan, data: &[(RegionSet, TokenSequence)], quads: &[Quadruplet], margin: f64) -> f64 {
    let mut tape = Tape::new();
    let vars = m.load_vars(&mut tape).unwrap();
    let loss = ranking_loss(&mut tape, &vars, m.config(), &refs(data), quads, margin, None).unwrap();
    tape.scalar(loss)
}

fn zero_params(store: &mut ParamStore, pred: impl Fn(&str) -> bool) {
    let names: Vec<String> = store.names().filter(|n| pred(n)).map(String::from).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn zero_visual_context_adds_nothing() {
    let mut m = model(4, 1, 1);
    zero_params(m.params_mut(), |n| n.starts_with("mdan/visual/step1/") && (n.ends_with("/p") || n.ends_with("/b_p")));
    let mut r = rng(2);
    let regions = random_regions(&mut r, 3, 5, 1.0);
    let text = random_tokens(&mut r, 3, 4, 12);
    let mut tape = Tape::new();
    let vars = m.load_vars(&mut tape).unwrap();
    let rv = regions.load(&mut tape);
    let enc = encode_bidirectional(&mut tape, &text, &vars.text).unwrap();
    let mem = DualMemories {
        m_v: tape.constant(Tensor::vector(vec![0.5, -0.1, 0.3, 0.9])),
        m_u: tape.constant(Tensor::vector(vec![1.0, 0.2, -0.4, 0.0])),
        step: 0,
    };
    let step = mdan_step(&mut tape, &mem, rv, &enc, &vars.visual.steps[0], &vars.textual.steps[0], None).unwrap();
    assert_eq!(tape.value(step.memories.m_v).data(), tape.value(mem.m_v).data());
    assert_eq!(tape.scalar(step.similarity), 0.0);
}

#[test]
fn equal_contexts_give_the_squared_norm() {
    let w = [0.3, -0.6, 0.25, 0.8];
    let mut m = model(4, 1, 3);
    m.params_mut().set("mdan/visual/step1/p", Tensor::zeros(&[4, 5])).unwrap();
    m.params_mut()
        .set("mdan/visual/step1/b_p", Tensor::vector(w.iter().map(|x: &f64| x.atanh()).collect()))
        .unwrap();
    let mut r = rng(4);
    let regions = random_regions(&mut r, 3, 5, 1.0);
    let mut tape = Tape::new();
    let vars = m.load_vars(&mut tape).unwrap();
    let rv = regions.load(&mut tape);
    let rows: Vec<f64> = (0..3).flat_map(|_| w).collect();
    let enc = EncodedText {
        rows: tape.constant(Tensor::new(vec![3, 4], rows).unwrap()),
        valid_len: 3,
    };
    let zero = tape.constant(Tensor::zeros(&[4]));
    let mem = DualMemories { m_v: zero, m_u: zero, step: 0 };
    let step = mdan_step(&mut tape, &mem, rv, &enc, &vars.visual.steps[0], &vars.textual.steps[0], None).unwrap();
    assert!((tape.scalar(step.similarity) - oracle::dot(&w, &w)).abs() < 1e-12);
}

#[test]
fn similarity_matches_oracle() {
    let mut r = rng(5);
    for steps in 0..4 {
        let m = model(6, steps, 10 + steps as u64);
        for (regions, text) in random_pairs(&mut r, 5, m.config()) {
            let (total, per_step, trace) = m.similarity(&regions, &text).unwrap();
            let (want_total, want_steps) =
                oracle::mdan(m.params(), steps, &oracle::rows_of(regions.features()), text.ids(), text.valid_len());
            assert!(close(&per_step, &want_steps, 1e-12));
            assert!((total - want_total).abs() <= 1e-10);
            assert_eq!(trace.steps.len(), steps);
        }
    }
}

#[test]
fn zero_steps_reduce_to_global_contexts() {
    let m = model(5, 0, 6);
    let mut r = rng(7);
    let (regions, text) = random_pairs(&mut r, 1, m.config()).pop().unwrap();
    let v0 = oracle::global_visual(m.params(), "mdan", &oracle::rows_of(regions.features()));
    let u = oracle::encode(m.params(), "mdan", text.ids(), text.valid_len());
    let u0 = oracle::global_textual(&u, text.valid_len());
    let (total, per_step, _) = m.similarity(&regions, &text).unwrap();
    assert_eq!(per_step.len(), 1);
    assert!((total - oracle::dot(&v0, &u0)).abs() < 1e-12);
}

#[test]
fn similarity_is_deterministic() {
    let mut r = rng(8);
    let (regions, text) = random_pairs(&mut r, 1, &small_mdan_config(6, 2, 5, 12, 5.0)).pop().unwrap();
    let a = model(6, 2, 9).similarity(&regions, &text).unwrap();
    let b = model(6, 2, 9).similarity(&regions, &text).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn similarity_is_the_inner_product_of_embeddings() {
    let mut r = rng(10);
    let m = model(8, 2, 11);
    for (regions, text) in random_pairs(&mut r, 100, m.config()) {
        let (total, _, _) = m.similarity(&regions, &text).unwrap();
        let zv = m.embed_image(&regions).unwrap();
        let zu = m.embed_text(&text).unwrap();
        assert_eq!(zv.z.len(), m.config().embedding_dim());
        assert!((total - zv.dot(&zu)).abs() <= 1e-10);
    }
}

#[test]
fn embedding_blocks_are_the_step_contexts() {
    let mut r = rng(12);
    let m = model(6, 3, 13);
    for (regions, text) in random_pairs(&mut r, 5, m.config()) {
        let zv = m.embed_image(&regions).unwrap();
        let zu = m.embed_text(&text).unwrap();
        let v0 = oracle::global_visual(m.params(), "mdan", &oracle::rows_of(regions.features()));
        assert!(close(zv.block(0, 6), &v0, 1e-14));

        let mut tape = Tape::new();
        let vars = m.load_vars(&mut tape).unwrap();
        let sim = mdan_similarity(&mut tape, &vars, m.config(), &regions, &text, None).unwrap();
        for (k, (v, u)) in sim.visual_contexts().iter().zip(sim.textual_contexts()).enumerate() {
            assert!(close(zv.block(k, 6), tape.value(*v).data(), 1e-12));
            assert!(close(zu.block(k, 6), tape.value(u).data(), 1e-12));
        }

        // The visual memory telescopes to the sum of its contexts.
        let mut sum = vec![0.0; 6];
        for v in sim.visual_contexts() {
            sum = oracle::add(&sum, tape.value(v).data());
        }
        let last = sim.steps.last().unwrap().memories.m_v;
        assert!(close(tape.value(last).data(), &sum, 1e-12));
    }
}

#[test]
fn pipelines_do_not_share_parameters() {
    let mut r = rng(14);
    let base = model(5, 2, 15);
    let (regions, text) = random_pairs(&mut r, 1, base.config()).pop().unwrap();
    let (zv, zu) = (base.embed_image(&regions).unwrap(), base.embed_text(&text).unwrap());

    let mut no_text = base.clone();
    zero_params(no_text.params_mut(), |n| n.starts_with("mdan/text/") || n.starts_with("mdan/textual/"));
    assert_eq!(no_text.embed_image(&regions).unwrap(), zv);
    assert_ne!(no_text.embed_text(&text).unwrap(), zu);

    let mut no_visual = base.clone();
    zero_params(no_visual.params_mut(), |n| n.starts_with("mdan/visual/"));
    assert_eq!(no_visual.embed_text(&text).unwrap(), zu);
    assert_ne!(no_visual.embed_image(&regions).unwrap(), zv);
}

#[test]
fn padding_leaves_the_text_embedding_unchanged() {
    let m = model(5, 2, 16);
    let mut r = rng(17);
    for valid in 1..5 {
        let seq = random_tokens(&mut r, valid, valid, 12);
        let a = m.embed_text(&seq).unwrap();
        let b = m.embed_text(&seq.padded_to(8)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn ranking_loss_examples() {
    let mut r = rng(18);
    let cfg = small_mdan_config(4, 2, 5, 12, 100.0);

    // All similarities vanish when every visual context is zero.
    let mut flat = MDan::new(cfg.clone(), 19).unwrap();
    zero_params(flat.params_mut(), |n| n.ends_with("/p0") || n.ends_with("/b_p0") || n.ends_with("/p") || n.ends_with("/b_p"));
    let data = random_pairs(&mut r, 3, &cfg);
    let quads = sample_negatives_seeded(3, 20).unwrap();
    assert_eq!(loss_value(&flat, &data, &quads, 100.0), 200.0 * 3.0);

    // A margin below every positive gap is satisfied.
    let mut found = false;
    for seed in 0..200 {
        let m = MDan::new(cfg.clone(), seed).unwrap();
        let data = random_pairs(&mut r, 2, &cfg);
        let quads = sample_negatives_seeded(2, seed).unwrap();
        let s = |i: usize, j: usize| oracle_similarity(&m, &data[i].0, &data[j].1);
        let slack = quads
            .iter()
            .map(|q| {
                let pos = s(q.positive, q.positive);
                (pos - s(q.negative_image, q.positive)).min(pos - s(q.positive, q.negative_text))
            })
            .fold(f64::INFINITY, f64::min);
        if slack > 1e-6 {
            assert_eq!(loss_value(&m, &data, &quads, slack / 2.0), 0.0);
            assert!(loss_value(&m, &data, &quads, slack * 2.0) > 0.0);
            found = true;
            break;
        }
    }
    assert!(found);
}

#[test]
fn hinges_at_the_kink_pass_no_gradient() {
    let m = model(5, 2, 21);
    let mut r = rng(22);
    let (regions, text) = random_pairs(&mut r, 1, m.config()).pop().unwrap();
    let data = vec![(regions.clone(), text.clone()), (regions, text)];
    let quads = sample_negatives_seeded(2, 0).unwrap();
    let mut tape = Tape::new();
    let vars = m.load_vars(&mut tape).unwrap();
    let loss = ranking_loss(&mut tape, &vars, m.config(), &refs(&data), &quads, 0.0, None).unwrap();
    assert_eq!(tape.scalar(loss), 0.0);
    let grads = tape.backward(loss).unwrap().params(&tape);
    assert!(grads.values().all(|g| g.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn ranking_loss_matches_oracle() {
    let mut r = rng(23);
    for seed in 0..5 {
        let m = model(6, 2, 30 + seed);
        let n = 2 + seed as usize;
        let data = random_pairs(&mut r, n, m.config());
        let quads = sample_negatives_seeded(n, seed).unwrap();
        for margin in [0.0, 0.5, 5.0] {
            let got = loss_value(&m, &data, &quads, margin);
            let want = oracle_ranking_loss(&m, &data, &quads, margin);
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }
}

#[test]
fn ranking_loss_rejects_bad_inputs() {
    let m = model(4, 1, 24);
    let mut r = rng(25);
    let data = random_pairs(&mut r, 2, m.config());
    let mut tape = Tape::new();
    let vars = m.load_vars(&mut tape).unwrap();
    let quads = sample_negatives_seeded(2, 0).unwrap();
    assert!(ranking_loss(&mut tape, &vars, m.config(), &refs(&data), &[], 1.0, None).is_err());
    assert!(ranking_loss(&mut tape, &vars, m.config(), &refs(&data), &quads, -1.0, None).is_err());
    let bad = [Quadruplet { positive: 0, negative_image: 2, negative_text: 1 }];
    assert!(ranking_loss(&mut tape, &vars, m.config(), &refs(&data), &bad, 1.0, None).is_err());
}

#[test]
fn ranking_loss_gradients_match_finite_differences() {
    let cfg = small_mdan_config(8, 2, 5, 12, 5.0);
    let m = MDan::new(cfg.clone(), 26).unwrap();
    let data = random_pairs(&mut rng(27), 2, &cfg);
    let quads = sample_negatives_seeded(2, 28).unwrap();
    assert!(oracle_ranking_loss(&m, &data, &quads, 5.0) > 0.0);
    let pairs = refs(&data);
    let report = grad_check(
        m.params(),
        |tape, store| MDan::from_parts(cfg.clone(), store.clone())?.batch_loss(tape, &pairs, &quads, None),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn negatives_are_uniform_over_other_items() {
    let n = 5;
    let draws = 10_000;
    let mut r = rng(29);
    let mut image_counts = vec![vec![0usize; n]; n];
    let mut text_counts = vec![vec![0usize; n]; n];
    for _ in 0..draws {
        for q in sample_negatives(n, &mut r).unwrap() {
            assert_ne!(q.negative_image, q.positive);
            assert_ne!(q.negative_text, q.positive);
            image_counts[q.positive][q.negative_image] += 1;
            text_counts[q.positive][q.negative_text] += 1;
        }
    }
    let p = 1.0 / (n - 1) as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for counts in [&image_counts, &text_counts] {
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    assert!((c as f64 - mean).abs() <= 3.0 * sd, "{i}->{j}: {c}");
                }
            }
        }
    }
    assert!(sample_negatives(1, &mut r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ranking_loss_is_nonnegative_and_vanishes_only_when_satisfied(seed in any::<u64>(), margin in 0.0f64..3.0) {
        let m = model(4, 1, seed % 50);
        let mut r = rng(seed);
        let data = random_pairs(&mut r, 3, m.config());
        let quads = sample_negatives_seeded(3, seed).unwrap();
        let loss = loss_value(&m, &data, &quads, margin);
        prop_assert!(loss >= 0.0);
        let s = |i: usize, j: usize| oracle_similarity(&m, &data[i].0, &data[j].1);
        let all_satisfied = quads.iter().all(|q| {
            let pos = s(q.positive, q.positive);
            margin - pos + s(q.negative_image, q.positive) <= 0.0 && margin - pos + s(q.positive, q.negative_text) <= 0.0
        });
        prop_assert_eq!(loss == 0.0, all_satisfied);
    }
}
