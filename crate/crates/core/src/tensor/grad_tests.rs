use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seesaw_oracles::{finite_difference_grad, naive_dft, relative_error};

use super::{Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares tape gradients of `build` (which must reduce to a scalar) with
/// central differences, returning the worst relative error.
fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.wrt(v).data().to_vec())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_difference_grad(
        |x| {
            let mut tape = Tape::new();
            let mut offset = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| {
                    let n = t.numel();
                    let v = Tensor::new(t.shape().to_vec(), x[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    tape.param(v)
                })
                .collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        },
        &flat,
        1e-5,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, 1e-4))
        .fold(0.0, f64::max)
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
    let y = tape.mul_const(x, &w).unwrap();
    tape.sum(y)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out), tape.value(m));

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert_eq!(msg.matches("[2, 3]").count(), 2);
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let err = grad_check(&[a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c)
    });
    assert!(err < 1e-6, "{err}");

    // Batched, shared right operand and transposed variants.
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let bt = random(&[2, 5, 4], &mut rng);
    let w = random(&[4, 3], &mut rng);
    let err = grad_check(&[a, b, bt, w], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        let d = t.matmul_nt(v[0], v[2]).unwrap();
        let e = t.matmul(v[0], v[3]).unwrap();
        let s1 = weighted_sum(t, c);
        let s2 = weighted_sum(t, d);
        let s3 = weighted_sum(t, e);
        let s = t.add(s1, s2).unwrap();
        t.add(s, s3).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![2.0; 4], vec![0.0, 3f64.ln(), 0.0, 0.0]]));
    let x = tape.slice_last(x, 0, 4).unwrap();
    let s = tape.softmax(x).unwrap();
    let v = tape.value(s);
    for j in 0..4 {
        assert!((v.get(&[0, j]) - 0.25).abs() < 1e-15);
    }
    let y = tape.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]));
    let s = tape.softmax(y).unwrap();
    let v = tape.value(s).data();
    assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

    let bad = tape.constant(Tensor::from_rows(&[vec![0.0, f64::NAN]]));
    assert!(tape.softmax(bad).is_err());
    let inf = tape.constant(Tensor::from_rows(&[vec![0.0, f64::INFINITY]]));
    assert!(tape.softmax(inf).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_stochastic_and_shift_invariant(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-10.0..10.0));
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + shift));
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for row in tape.value(sa).rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
    }

    #[test]
    fn rdft_matches_naive_loop(len in 1usize..=64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[len], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let (re, im) = tape.rdft(v).unwrap();
        let expect = naive_dft(x.data());
        prop_assert_eq!(tape.shape(re), &[len / 2 + 1]);
        for (k, &(er, ei)) in expect.iter().enumerate() {
            prop_assert!((tape.value(re).data()[k] - er).abs() < 1e-9);
            prop_assert!((tape.value(im).data()[k] - ei).abs() < 1e-9);
        }
    }
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5], &mut rng);
    let err = grad_check(&[x], |t, v| {
        let s = t.softmax(v[0]).unwrap();
        weighted_sum(t, s)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn sigmoid_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 1.3, -2.7, 8.0]]));
    let nx = tape.neg(x);
    let s = tape.sigmoid(x);
    let sn = tape.sigmoid(nx);
    assert_eq!(tape.value(s).data()[0], 0.5);
    for (a, b) in tape.value(s).data().iter().zip(tape.value(sn).data()) {
        assert!((a + b - 1.0).abs() < 1e-15);
        assert!(*a > 0.0 && *a < 1.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[6], &mut rng);
    let err = grad_check(&[x], |t, v| {
        let s = t.sigmoid(v[0]);
        weighted_sum(t, s)
    });
    assert!(err < 1e-7, "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.5));
    let g = tape.constant(Tensor::ones(&[5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = tape.constant(random(&[3, 5], &mut rng));
    let g = tape.constant(Tensor::full(&[5], 1.7));
    let bias = Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.2);
    let bias_mean = bias.data().iter().sum::<f64>() / 5.0;
    let b = tape.constant(bias);
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).rows() {
        let mean = row.iter().sum::<f64>() / 5.0;
        assert!((mean - bias_mean).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 6], &mut rng);
    let g = random(&[6], &mut rng);
    let b = random(&[6], &mut rng);
    let err = grad_check(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted_sum(t, y)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let c = tape.concat(va, va).unwrap();
    assert_eq!(tape.shape(c), &[3, 8]);
    for row in tape.value(c).rows() {
        assert_eq!(row[..4], row[4..]);
    }
    let back = tape.slice_last(c, 0, 4).unwrap();
    assert_eq!(tape.value(back), &a);

    let other = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(tape.concat(va, other).is_err());
}

#[test]
fn rdft_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[10], 1.5));
    let (re, im) = tape.rdft(c).unwrap();
    assert!((tape.value(re).data()[0] - 15.0).abs() < 1e-12);
    for k in 1..6 {
        assert!(tape.value(re).data()[k].abs() < 1e-12);
        assert!(tape.value(im).data()[k].abs() < 1e-12);
    }

    // Pure cosine at bin 3: energy only in bin 3, matching the loop DFT.
    let len = 16;
    let x = Tensor::from_fn(&[len], |t| {
        (2.0 * std::f64::consts::PI * 3.0 * t as f64 / len as f64).cos()
    });
    let naive = naive_dft(x.data());
    let v = tape.constant(x);
    let (re, im) = tape.rdft(v).unwrap();
    for k in 0..=len / 2 {
        let mag = tape.value(re).data()[k].hypot(tape.value(im).data()[k]);
        let expect = naive[k].0.hypot(naive[k].1);
        assert!((mag - expect).abs() < 1e-9);
        if k == 3 {
            assert!((mag - 8.0).abs() < 1e-9);
        } else {
            assert!(mag < 1e-9);
        }
    }

    // Linearity.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[2, 9], &mut rng);
    let b = random(&[2, 9], &mut rng);
    let va = tape.constant(a);
    let vb = tape.constant(b);
    let sum = tape.add(va, vb).unwrap();
    let (ra, ia) = tape.rdft(va).unwrap();
    let (rb, ib) = tape.rdft(vb).unwrap();
    let (rs, is) = tape.rdft(sum).unwrap();
    for k in 0..10 {
        let lhs = tape.value(rs).data()[k];
        let rhs = tape.value(ra).data()[k] + tape.value(rb).data()[k];
        assert!((lhs - rhs).abs() < 1e-9);
        let lhs = tape.value(is).data()[k];
        let rhs = tape.value(ia).data()[k] + tape.value(ib).data()[k];
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[test]
fn rdft_and_hypot_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 7], &mut rng);
    let err = grad_check(&[x], |t, v| {
        let (re, im) = t.rdft(v[0]).unwrap();
        let m = t.hypot(re, im).unwrap();
        weighted_sum(t, m)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_basic_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let v = tape.param(w.clone());
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(v).data().iter().all(|&x| x == 1.0));

    let mut tape = Tape::new();
    let v = tape.param(w.clone());
    let sq = tape.square(v);
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(v), &w.map(|x| 2.0 * x));

    let mut tape = Tape::new();
    let v = tape.param(w);
    let unused = tape.param(Tensor::ones(&[2]));
    assert!(tape.backward(v).is_err(), "non-scalar loss must be rejected");
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(unused), &Tensor::zeros(&[2]));
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let p = tape.param(Tensor::ones(&[2]));
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(p).is_some());
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[2, 3, 4], &mut rng);
    let bias = random(&[3, 4], &mut rng);
    let err = grad_check(&[x, bias], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]).unwrap();
        let r = t.reshape(p, &[4, 6]).unwrap();
        let s = t.slice_last(r, 1, 4).unwrap();
        let e = t.expand_last(s, 3);
        let tr = t.transpose(v[0]).unwrap();
        let tr = t.transpose(tr).unwrap();
        let b = t.add_broadcast(tr, v[1]).unwrap();
        let s1 = weighted_sum(t, e);
        let s2 = weighted_sum(t, b);
        t.add(s1, s2).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Keep values away from the relu/abs kinks.
    let x = Tensor::from_fn(&[12], |i| {
        let v: f64 = rng.random_range(0.1..1.0);
        if i % 2 == 0 { v } else { -v }
    });
    let y = random(&[12], &mut rng);
    let scale: Vec<f64> = vec![0.5, -2.0, 3.0];
    let shift: Vec<f64> = vec![1.0, 2.0, 3.0];
    let err = grad_check(&[x, y], |t, v| {
        let a = t.gelu(v[0]);
        let b = t.relu(v[0]);
        let c = t.abs(v[0]);
        let d = t.mul(v[0], v[1]).unwrap();
        let e = t.sub(d, v[1]).unwrap();
        let f = t.add_scalar(e, 0.3);
        let f = t.scale(f, 1.7);
        let r = t.reshape(f, &[3, 4]).unwrap();
        let aff = t.affine_rows(r, &scale, &shift).unwrap();
        let m = t.mean_last(aff).unwrap();
        let vr = t.var_last(aff).unwrap();
        let parts = [a, b, c];
        let mut total = t.sum(m);
        for p in parts {
            let s = weighted_sum(t, p);
            total = t.add(total, s).unwrap();
        }
        let sv = weighted_sum(t, vr);
        t.add(total, sv).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn dropout_modes() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[1000]));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let same = tape.dropout(x, 0.1, false, &mut rng).unwrap();
    assert_eq!(same, x, "eval mode is the identity");

    let d = tape.dropout(x, 0.25, true, &mut rng).unwrap();
    let vals = tape.value(d).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
    assert!((650..850).contains(&kept), "{kept}");

    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let a = tape.dropout(x, 0.5, true, &mut r1).unwrap();
    let b = tape.dropout(x, 0.5, true, &mut r2).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let w = tape.param(random(&[4, 4], &mut rng));
        let x = tape.constant(random(&[3, 4], &mut rng));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let h = tape.dropout(h, 0.3, true, &mut rng).unwrap();
        let s = tape.softmax(h).unwrap();
        let l = weighted_sum(&mut tape, s);
        let g = tape.backward(l).unwrap();
        (tape.value(l).item().to_bits(), g.wrt(w).clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(
        g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
