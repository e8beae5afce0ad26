mod common;

use common::rng;
use dan_core::error::DanError;
use dan_core::gradcheck::grad_check;
use dan_core::tape::masked_softmax;
use dan_core::{ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
    tape.variable(Tensor::vector(v.to_vec()))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Central-difference derivative of a scalar function.
fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[test]
fn affine_examples() {
    let mut tape = Tape::new();
    let x = vec_var(&mut tape, &[3.0, 4.0]);
    let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero_b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.affine(x, eye, Some(zero_b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

    let w0 = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.affine(x, w0, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn affine_matches_loop_oracle() {
    let mut r = rng(10);
    let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut expected = vec![0.0; 3];
    for i in 0..3 {
        let mut acc = b[i];
        for j in 0..2 {
            acc += w[i * 2 + j] * x[j];
        }
        expected[i] = acc;
    }
    let mut tape = Tape::new();
    let xv = vec_var(&mut tape, &x);
    let wv = tape.variable(Tensor::matrix(3, 2, w).unwrap());
    let bv = vec_var(&mut tape, &b);
    let y = tape.affine(xv, wv, Some(bv)).unwrap();
    assert!(close(tape.value(y).data(), &expected, 1e-15));
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let x = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
    let w = tape.variable(Tensor::zeros(&[2, 2]));
    match tape.affine(x, w, None) {
        Err(DanError::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 2]);
            assert_eq!(right, vec![3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn tanh_examples() {
    let mut tape = Tape::new();
    let x = vec_var(&mut tape, &[0.0]);
    let y = tape.tanh_elem(x);
    assert_eq!(tape.value(y).data(), &[0.0]);
    let loss = tape.sum(y);
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[1.0]);

    let mut tape = Tape::new();
    let x = vec_var(&mut tape, &[0.7]);
    let y = tape.tanh_elem(x);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap().get(x).unwrap()[0];
    assert!((g - fd(f64::tanh, 0.7, 1e-5)).abs() < 1e-6);
}

#[test]
fn mul_elem_examples() {
    let a = [0.5, -2.0, 3.25];
    let mut tape = Tape::new();
    let av = vec_var(&mut tape, &a);
    let ones = tape.constant(Tensor::filled(&[3], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let y1 = tape.mul_elem(av, ones).unwrap();
    let y0 = tape.mul_elem(av, zeros).unwrap();
    assert_eq!(tape.value(y1).data(), &a);
    assert_eq!(tape.value(y0).data(), &[0.0; 3]);
}

#[test]
fn mul_elem_gradient_is_upstream_times_other() {
    let (a, b, c) = ([0.3, -1.1, 0.8], [1.5, 0.25, -0.6], [2.0, -1.0, 0.5]);
    let mut tape = Tape::new();
    let av = vec_var(&mut tape, &a);
    let bv = tape.constant(Tensor::vector(b.to_vec()));
    let cv = tape.constant(Tensor::vector(c.to_vec()));
    let prod = tape.mul_elem(av, bv).unwrap();
    // Loss c·(a⊙b) makes the upstream gradient equal to c.
    let loss = tape.dot(cv, prod).unwrap();
    let g = tape.backward(loss).unwrap().get(av).unwrap().to_vec();
    for i in 0..3 {
        assert_eq!(g[i], c[i] * b[i]);
        let f = |t: f64| {
            let mut a2 = a;
            a2[i] = t;
            (0..3).map(|j| c[j] * a2[j] * b[j]).sum::<f64>()
        };
        assert!((g[i] - fd(f, a[i], 1e-5)).abs() < 1e-9);
    }
}

#[test]
fn softmax_examples() {
    let p = masked_softmax(&[0.0, 0.0, 0.0], &[true; 3]).unwrap();
    assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));
    let p = masked_softmax(&[2f64.ln(), 0.0], &[true, true]).unwrap();
    assert!(close(&p, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    let p = masked_softmax(&[5.0, 9.0, 5.0], &[true, false, true]).unwrap();
    assert_eq!(p, vec![0.5, 0.0, 0.5]);
    assert!(matches!(masked_softmax(&[1.0, 2.0], &[false, false]), Err(DanError::EmptySupport)));

    let mut tape = Tape::new();
    let s = vec_var(&mut tape, &[1.0, 2.0]);
    assert!(matches!(tape.softmax_masked(s, &[false, false]), Err(DanError::EmptySupport)));
    assert!(matches!(tape.softmax_masked(s, &[true]), Err(DanError::Shape { .. })));
}

#[test]
fn softmax_survives_large_scores() {
    let p = masked_softmax(&[1000.0, 1000.0, -1000.0], &[true; 3]).unwrap();
    assert!(close(&p, &[0.5, 0.5, 0.0], 1e-15));
}

#[test]
fn weighted_sum_examples() {
    let rows = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mut tape = Tape::new();
    let r = tape.constant(rows);
    let one_hot = vec_var(&mut tape, &[0.0, 1.0, 0.0]);
    let y = tape.weighted_sum(one_hot, r).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    let uniform = vec_var(&mut tape, &[1.0 / 3.0; 3]);
    let y = tape.weighted_sum(uniform, r).unwrap();
    assert!(close(tape.value(y).data(), &[3.0, 4.0], 1e-15));
    let bad = vec_var(&mut tape, &[0.5, 0.5]);
    assert!(tape.weighted_sum(bad, r).is_err());
}

#[test]
fn weighted_sum_matches_accumulation_oracle() {
    let mut r = rng(11);
    let w: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
    let rows: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut expected = [0.0; 3];
    for n in 0..4 {
        for j in 0..3 {
            expected[j] += w[n] * rows[n * 3 + j];
        }
    }
    let mut tape = Tape::new();
    let wv = vec_var(&mut tape, &w);
    let rv = tape.variable(Tensor::matrix(4, 3, rows).unwrap());
    let y = tape.weighted_sum(wv, rv).unwrap();
    assert!(close(tape.value(y).data(), &expected, 1e-15));
}

fn kahan_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let term = x * y - comp;
        let t = sum + term;
        comp = (t - sum) - term;
        sum = t;
    }
    sum
}

#[test]
fn dot_examples() {
    let mut tape = Tape::new();
    let e1 = vec_var(&mut tape, &[1.0, 0.0]);
    let e2 = vec_var(&mut tape, &[0.0, 1.0]);
    let d = tape.dot(e1, e2).unwrap();
    assert_eq!(tape.scalar(d), 0.0);
    let a = vec_var(&mut tape, &[3.0, 4.0]);
    let d = tape.dot(a, a).unwrap();
    assert_eq!(tape.scalar(d), 25.0);
    let c = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
    assert!(tape.dot(a, c).is_err());
}

#[test]
fn dot_matches_compensated_sum() {
    let mut r = rng(12);
    let a: Vec<f64> = (0..512).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..512).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let (av, bv) = (vec_var(&mut tape, &a), vec_var(&mut tape, &b));
    let d = tape.dot(av, bv).unwrap();
    let oracle = kahan_dot(&a, &b);
    assert!((tape.scalar(d) - oracle).abs() <= 1e-10 * oracle.abs().max(1e-300));
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = vec_var(&mut tape, &[1.0, 2.0]);
    let b = vec_var(&mut tape, &[3.0]);
    let c = tape.concat(&[a, b]).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let single = tape.concat(&[a]).unwrap();
    assert_eq!(tape.value(single).data(), &[1.0, 2.0]);
    assert!(tape.concat(&[]).is_err());

    // Reverse pass splits the upstream gradient back into the parts.
    let w = tape.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let loss = tape.dot(w, c).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap(), &[10.0, 20.0]);
    assert_eq!(g.get(b).unwrap(), &[30.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = vec_var(&mut tape, &[1.0, 2.0]);
    let loss = tape.dot(x, x).unwrap();
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = vec_var(&mut tape, &[1.0, 2.0]);
    let c = tape.constant(Tensor::vector(vec![3.0, 1.0]));
    let loss = tape.dot(c, c).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.get_or_zeros(&tape, x).data(), &[0.0, 0.0]);

    assert!(matches!(tape.backward(x), Err(DanError::NonScalarLoss(_))));
}

#[test]
fn reused_parameter_accumulates_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::vector(vec![0.5, -0.25])).unwrap();
    let mut tape = Tape::new();
    let w1 = tape.param(&store, "w").unwrap();
    let w2 = tape.param(&store, "w").unwrap();
    assert_eq!(w1, w2);
    let a = tape.dot(w1, w1).unwrap();
    let b = tape.sum(w2);
    let loss = tape.add(a, b).unwrap();
    let g = tape.backward(loss).unwrap().params(&tape);
    assert_eq!(g["w"].data(), &[2.0, 0.5]);
}

/// Builds a store with one random tensor per shape.
fn random_store(r: &mut impl Rng, shapes: &[(&str, &[usize])], scale: f64) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-scale..scale)).collect();
        s.insert(*name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
    }
    s
}

fn primitive_program(op: usize) -> impl Fn(&mut Tape, &ParamStore) -> dan_core::Result<Var> {
    move |tape: &mut Tape, p: &ParamStore| {
        let x = tape.param(p, "x")?;
        let y = tape.param(p, "y")?;
        let w = tape.param(p, "w")?;
        let b = tape.param(p, "b")?;
        let rows = tape.param(p, "rows")?;
        let probe = tape.constant(Tensor::vector(vec![0.7, -1.3, 0.4]));
        let out = match op {
            0 => tape.affine(x, w, Some(b))?,
            1 => tape.tanh_elem(x),
            2 => tape.sigmoid_elem(x),
            3 => tape.mul_elem(x, y)?,
            4 => {
                let s = tape.softmax_masked(x, &[true, false, true])?;
                tape.weighted_sum(s, rows)?
            }
            5 => {
                let s = tape.softmax_masked(x, &[true, true, true])?;
                tape.mul_elem(s, y)?
            }
            6 => {
                let logits = tape.affine(x, w, Some(b))?;
                return tape.cross_entropy(logits, 1);
            }
            7 => {
                let c = tape.concat(&[x, b])?;
                let d = tape.concat(&[y, b])?;
                return tape.dot(c, d);
            }
            8 => {
                let r = tape.affine_rows(rows, w, None)?;
                let t = tape.tanh_elem(r);
                let m = tape.mean_rows(t, 2)?;
                tape.sub(m, b)?
            }
            _ => {
                let g = tape.gather_columns(w, &[2, 0, 2])?;
                let r1 = tape.row(g, 0)?;
                let r2 = tape.row(g, 2)?;
                tape.add_n(&[r1, r2, y])?
            }
        };
        let v = tape.value(out).clone();
        if v.len() == 3 {
            tape.dot(probe, out)
        } else {
            let probe = tape.constant(Tensor::filled(v.shape(), 0.3));
            let prod = tape.mul_elem(probe, out)?;
            Ok(tape.sum(prod))
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let shapes: &[(&str, &[usize])] = &[
        ("x", &[3]),
        ("y", &[3]),
        ("w", &[3, 3]),
        ("b", &[3]),
        ("rows", &[3, 3]),
    ];
    for op in 0..10 {
        for seed in 0..5 {
            let store = random_store(&mut rng(100 * op as u64 + seed), shapes, 1.5);
            let report = grad_check(&store, primitive_program(op), 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "op {op} seed {seed}: {:?}", report.worst());
        }
    }
}

#[test]
fn replaying_a_program_is_bitwise_deterministic() {
    let shapes: &[(&str, &[usize])] = &[("x", &[3]), ("y", &[3]), ("w", &[3, 3]), ("b", &[3]), ("rows", &[3, 3])];
    let store = random_store(&mut rng(5), shapes, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let loss = primitive_program(6)(&mut tape, &store).unwrap();
        let grads = tape.backward(loss).unwrap().params(&tape);
        (tape.scalar(loss).to_bits(), grads)
    };
    assert_eq!(run(), run());
}

fn scores_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-30.0f64..30.0, n),
            prop::collection::vec(any::<bool>(), n).prop_filter("one valid entry", |m| m.iter().any(|&b| b)),
        )
    })
}

proptest! {
    #[test]
    fn softmax_is_a_masked_simplex((scores, mask) in scores_and_mask()) {
        let p = masked_softmax(&scores, &mask).unwrap();
        for (pi, &m) in p.iter().zip(&mask) {
            prop_assert!(*pi >= 0.0);
            if !m {
                prop_assert_eq!(*pi, 0.0);
            }
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant((scores, mask) in scores_and_mask(), shift in -50.0f64..50.0) {
        let p = masked_softmax(&scores, &mask).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = masked_softmax(&shifted, &mask).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_dot_decomposes(
        a in prop::collection::vec(-5.0f64..5.0, 1..8),
        b in prop::collection::vec(-5.0f64..5.0, 1..8),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let c: Vec<f64> = a.iter().map(|_| r.random_range(-5.0..5.0)).collect();
        let d: Vec<f64> = b.iter().map(|_| r.random_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let (av, bv, cv, dv) = (vec_var(&mut tape, &a), vec_var(&mut tape, &b), vec_var(&mut tape, &c), vec_var(&mut tape, &d));
        let ab = tape.concat(&[av, bv]).unwrap();
        let cd = tape.concat(&[cv, dv]).unwrap();
        let whole = tape.dot(ab, cd).unwrap();
        let left = tape.dot(av, cv).unwrap();
        let right = tape.dot(bv, dv).unwrap();
        let (w, l, rr) = (tape.scalar(whole), tape.scalar(left), tape.scalar(right));
        let scale = a.iter().zip(&c).chain(b.iter().zip(&d)).map(|(x, y)| (x * y).abs()).sum::<f64>();
        prop_assert!((w - (l + rr)).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn elementwise_derivatives_match_finite_differences(x in -3.0f64..3.0) {
        for (f, op) in [(f64::tanh as fn(f64) -> f64, 0), (|v: f64| 1.0 / (1.0 + (-v).exp()), 1)] {
            let mut tape = Tape::new();
            let xv = vec_var(&mut tape, &[x]);
            let y = if op == 0 { tape.tanh_elem(xv) } else { tape.sigmoid_elem(xv) };
            let loss = tape.sum(y);
            let g = tape.backward(loss).unwrap().get(xv).unwrap()[0];
            let n = fd(f, x, 1e-5);
            prop_assert!((g - n).abs() <= 1e-4 * g.abs().max(n.abs()).max(1e-7));
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(seed in any::<u64>(), op in 0usize..10) {
        let shapes: &[(&str, &[usize])] = &[("x", &[3]), ("y", &[3]), ("w", &[3, 3]), ("b", &[3]), ("rows", &[3, 3])];
        let store = random_store(&mut rng(seed), shapes, 20.0);
        let mut tape = Tape::new();
        let loss = primitive_program(op)(&mut tape, &store).unwrap();
        prop_assert!(tape.scalar(loss).is_finite());
        let grads = tape.backward(loss).unwrap().params(&tape);
        for g in grads.values() {
            prop_assert!(g.is_finite());
        }
    }
}
