use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seesaw_oracles as oracle;

use super::*;

fn tiny(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        channels: 2,
        seq_len: 16,
        pred_len: 4,
        patch_len: 4,
        stride: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        dropout: 0.0,
        n_patch_layers: 1,
        n_channel_layers: 1,
        n_prime: 2,
        ablation,
        seed: 7,
    }
}

fn input(b: usize, c: usize, l: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, c, l], |i| {
        let ch = (i / l) % c;
        (ch as f64 + 1.0) * rng.random_range(-2.0..2.0) + 3.0 * ch as f64
    })
}

#[test]
fn output_shape() {
    let cfg = ModelConfig {
        channels: 3,
        seq_len: 32,
        pred_len: 8,
        patch_len: 8,
        stride: 4,
        n_prime: 4,
        ..tiny(Ablation::Full)
    };
    let model = SeesawModel::new(cfg).unwrap();
    let y = model.predict(&input(2, 3, 32, 1)).unwrap();
    assert_eq!(y.shape(), &[2, 3, 8]);
    assert!(model.predict(&input(2, 2, 32, 1)).is_err());
}

#[test]
fn zero_weights_forecast_the_channel_mean() {
    let mut model = SeesawModel::new(tiny(Ablation::Full)).unwrap();
    for t in model.params_mut().values_mut() {
        t.data_mut().fill(0.0);
    }
    let x = input(3, 2, 16, 2);
    let y = model.predict(&x).unwrap();
    for (row, xr) in y.rows().zip(x.rows()) {
        let mean = xr.iter().sum::<f64>() / 16.0;
        assert!(row.iter().all(|&v| (v - mean).abs() < 1e-12));
    }
}

#[test]
fn parameter_count_formula() {
    let default = ModelConfig {
        channels: 4,
        seq_len: 96,
        pred_len: 24,
        patch_len: 16,
        stride: 8,
        d_model: 16,
        n_heads: 4,
        d_ff: 64,
        dropout: 0.1,
        n_patch_layers: 2,
        n_channel_layers: 1,
        n_prime: 6,
        ablation: Ablation::Full,
        seed: 0,
    };
    // N = 12; block = 6*256 + 2*16*4 + 4 + 2*(2*16*64 + 64 + 16) + 6*16 = 6020
    // 2(16*16 + 12*16) + 3*6020 + 2*6*12 + 6*16*24 + 24
    assert_eq!(default.param_count(), 896 + 18060 + 144 + 2304 + 24);
    let configs = [
        default.clone(),
        ModelConfig {
            ablation: Ablation::NoCr,
            ..default.clone()
        },
        ModelConfig {
            ablation: Ablation::NoPd,
            ..tiny(Ablation::NoPd)
        },
        tiny(Ablation::CrThenPd),
    ];
    for cfg in configs {
        let model = SeesawModel::new(cfg.clone()).unwrap();
        assert_eq!(model.params().num_scalars(), cfg.param_count(), "{:?}", cfg.ablation);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { n_heads: 3, ..tiny(Ablation::Full) },
        ModelConfig { n_prime: 6, ..tiny(Ablation::Full) },
        ModelConfig { n_prime: 0, ..tiny(Ablation::Full) },
        ModelConfig { patch_len: 20, ..tiny(Ablation::Full) },
        ModelConfig { dropout: 1.0, ..tiny(Ablation::Full) },
    ];
    for cfg in bad {
        assert!(matches!(SeesawModel::new(cfg), Err(Error::Config(_))));
    }
}

#[test]
fn ablation_names_roundtrip() {
    for a in Ablation::ALL {
        assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
    }
    assert!("none".parse::<Ablation>().is_err());
}

#[test]
fn channels_are_equivariant() {
    let cfg = ModelConfig {
        channels: 3,
        ..tiny(Ablation::Full)
    };
    let model = SeesawModel::new(cfg).unwrap();
    let x = input(1, 3, 16, 3);
    let perm = [2, 0, 1];
    let xp = Tensor::from_fn(&[1, 3, 16], |i| x.get(&[0, perm[i / 16], i % 16]));
    let y = model.predict(&x).unwrap();
    let yp = model.predict(&xp).unwrap();
    for (c, &src) in perm.iter().enumerate() {
        for h in 0..4 {
            assert!((yp.get(&[0, c, h]) - y.get(&[0, src, h])).abs() < 1e-10);
        }
    }
}

#[test]
fn channels_are_independent_without_channel_layers() {
    let cfg = ModelConfig {
        n_channel_layers: 0,
        ..tiny(Ablation::Full)
    };
    let model = SeesawModel::new(cfg).unwrap();
    let x = input(1, 2, 16, 4);
    let mut x2 = x.clone();
    for t in 0..16 {
        x2.set(&[0, 1, t], x.get(&[0, 1, t]) * 3.0 - 5.0 + t as f64);
    }
    let (y, y2) = (model.predict(&x).unwrap(), model.predict(&x2).unwrap());
    assert_eq!(y.outer(0).rows().next(), y2.outer(0).rows().next());
    assert_ne!(y, y2);
}

#[test]
fn aggregation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let eye = tape.constant(Tensor::identity(3));
    let same = aggregate(&mut tape, zv, eye).unwrap();
    assert_eq!(tape.value(same), &z);

    let avg = tape.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
    let m = aggregate(&mut tape, zv, avg).unwrap();
    assert_eq!(tape.shape(m), &[2, 1, 4]);
    for g in 0..2 {
        for d in 0..4 {
            let mean = (0..3).map(|n| z.get(&[g, n, d])).sum::<f64>() / 3.0;
            assert!((tape.value(m).get(&[g, 0, d]) - mean).abs() < 1e-14);
        }
    }

    let w = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
    let weights = Tensor::from_fn(&[2, 2, 4], |i| (i % 7) as f64 - 3.0);
    let eval = |w: &Tensor, tape: &mut Tape| {
        let wv = tape.param(w.clone());
        let zv = tape.constant(z.clone());
        let out = aggregate(tape, zv, wv).unwrap();
        let s = tape.mul_const(out, &weights).unwrap();
        (tape.sum(s), wv)
    };
    let mut tape = Tape::new();
    let (l, wv) = eval(&w, &mut tape);
    let analytic = tape.backward(l).unwrap().wrt(wv).clone();
    let numeric = oracle::finite_difference_grad(
        |x| {
            let mut tape = Tape::new();
            let (l, _) = eval(&Tensor::new(vec![2, 3], x.to_vec()).unwrap(), &mut tape);
            tape.value(l).item()
        },
        w.data(),
        1e-5,
    );
    for (a, n) in analytic.data().iter().zip(&numeric) {
        assert!(oracle::relative_error(*a, *n, 1e-6) < 1e-5);
    }
}

fn mse_loss_value(model: &SeesawModel, x: &Tensor, y: &Tensor) -> (Tape, Var, Bound) {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&mut tape, &bound, x, false, &mut rng, false).unwrap();
    let target = tape.constant(y.clone());
    let diff = tape.sub(out.y_hat, target).unwrap();
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    (tape, loss, bound)
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for ablation in [Ablation::Full, Ablation::CrThenPd] {
        let model = SeesawModel::new(tiny(ablation)).unwrap();
        let x = input(2, 2, 16, 6);
        let y = input(2, 2, 4, 7);
        let (tape, loss, bound) = mse_loss_value(&model, &x, &y);
        let grads = bound.collect(&tape.backward(loss).unwrap(), model.params());
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let mut probe = model.clone();
        let numeric = oracle::finite_difference_grad(
            |flat| {
                probe.params_mut().assign_flat(flat).unwrap();
                let (tape, loss, _) = mse_loss_value(&probe, &x, &y);
                tape.value(loss).item()
            },
            &model.params().flatten(),
            1e-4,
        );
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| oracle::relative_error(*a, *n, 1e-4))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{ablation}: worst relative error {worst}");
    }
}

#[test]
fn closed_gate_equals_no_non_bitwise() {
    let no_non = SeesawModel::new(tiny(Ablation::NoNon)).unwrap();
    let mut full = SeesawModel::new(tiny(Ablation::Full)).unwrap();
    assert_eq!(no_non.params(), full.params());
    for (w, b) in full.gate_params() {
        full.params_mut().get_mut(w).data_mut().fill(0.0);
        full.params_mut().get_mut(b).data_mut().fill(-1e4);
    }
    let x = input(3, 2, 16, 8);
    let a = no_non.predict(&x).unwrap();
    let b = full.predict(&x).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn stationary_only_model_is_affine_covariant() {
    let model = SeesawModel::new(tiny(Ablation::NoNon)).unwrap();
    let x = input(2, 2, 16, 9);
    let (a, b) = ([0.5, 40.0], [-3.0, 1000.0]);
    let xa = Tensor::from_fn(&[2, 2, 16], |i| {
        let c = (i / 16) % 2;
        a[c] * x.data()[i] + b[c]
    });
    let y = model.predict(&x).unwrap();
    let ya = model.predict(&xa).unwrap();
    for (i, (&v, &va)) in y.data().iter().zip(ya.data()).enumerate() {
        let c = (i / 4) % 2;
        assert!((a[c] * v + b[c] - va).abs() < 1e-7 * (1.0 + va.abs()));
    }
}

#[test]
fn dropout_only_acts_in_training() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..tiny(Ablation::Full)
    };
    let model = SeesawModel::new(cfg).unwrap();
    let x = input(2, 2, 16, 10);
    assert_eq!(model.predict(&x).unwrap(), model.predict(&x).unwrap());
    let run = |seed| {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(&mut tape, &bound, &x, true, &mut rng, false).unwrap();
        tape.value(out.y_hat).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert_ne!(run(1), model.predict(&x).unwrap());
}

#[test]
fn diagnostics_cover_every_layer() {
    let model = SeesawModel::new(tiny(Ablation::Full)).unwrap();
    let (_, diag) = model.predict_with_diag(&input(1, 2, 16, 11), true).unwrap();
    let diag = diag.unwrap();
    assert_eq!(diag.patch_layers.len(), 1);
    assert_eq!(diag.channel_layers.len(), 1);
    // N = 5 patches per channel; the channel layer runs over N' = 2 groups of C = 2 tokens.
    assert_eq!(diag.patch_layers[0].a_sta.shape(), &[2, 2, 5, 5]);
    assert_eq!(diag.channel_layers[0].a_non.shape(), &[2, 2, 2, 2]);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let model = SeesawModel::new(tiny(Ablation::CrThenPd)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.params(), model.params());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(checkpoint::encode(&loaded).unwrap(), bytes);

    assert!(matches!(checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}
