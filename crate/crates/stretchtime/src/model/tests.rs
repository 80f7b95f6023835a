use super::*;
use rand::SeedableRng;

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(8, 4, 2, 8);
    cfg.n_heads = 2;
    cfg.dropout_rate = 0.1;
    cfg
}

fn random_input(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.lookback * cfg.channels)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect()
}

fn eval_forward(model: &StretchTimeModel, x: &[f64]) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let binds = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &binds, x, None).unwrap();
    tape.values(out).to_vec()
}

#[test]
fn center_last_value_examples() {
    let (diff, reference) = center_last_value(&[1.0, 2.0, 3.0], 3, 1).unwrap();
    assert_eq!(diff, vec![-2.0, -1.0, 0.0]);
    assert_eq!(reference, vec![3.0]);

    let constant = vec![5.0; 8];
    let (diff, _) = center_last_value(&constant, 4, 2).unwrap();
    assert!(diff.iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let (diff, _) = center_last_value(&x, 5, 3).unwrap();
    assert!(
        diff[12..].iter().all(|&v| v == 0.0),
        "final row must be exactly zero"
    );

    assert!(center_last_value(&[], 0, 3).is_err());
}

#[test]
fn channel_dropout_identity_and_mask_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let kept = channel_dropout(&x, 3, 4, 1.0, &mut rng).unwrap();
    assert_eq!(kept, x, "keep_ratio 1 is the identity");

    // Explicit mask keeping channels {0, 2} at keep 0.5.
    let mask = vec![2.0, 0.0, 2.0, 0.0];
    let out = apply_channel_mask(&x, 3, 4, &mask);
    for t in 0..3 {
        assert_eq!(out[t * 4], x[t * 4] * 2.0);
        assert_eq!(out[t * 4 + 1], 0.0);
        assert_eq!(out[t * 4 + 2], x[t * 4 + 2] * 2.0);
        assert_eq!(out[t * 4 + 3], 0.0);
    }

    assert!(channel_dropout(&x, 3, 4, 0.0, &mut rng).is_err());
    assert!(channel_dropout(&x, 3, 4, 1.5, &mut rng).is_err());
}

#[test]
fn channel_dropout_is_unbiased_in_expectation() {
    // Sanity-size Monte Carlo; the acceptance suite runs the pinned 1e5 one.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = [1.0, -2.0, 0.5, 3.0];
    let trials = 50_000;
    let mut acc = [0.0f64; 4];
    for _ in 0..trials {
        let keep = rng.gen_range(0.5..=1.0);
        let mask = sample_channel_mask(4, keep, &mut rng);
        for (a, (v, m)) in acc.iter_mut().zip(x.iter().zip(&mask)) {
            *a += v * m;
        }
    }
    for (a, v) in acc.iter().zip(&x) {
        let mean = a / trials as f64;
        assert!(
            (mean - v).abs() / v.abs() < 0.025,
            "expectation {mean} vs {v}"
        );
    }
}

#[test]
fn count_params_rejects_degenerate_configs() {
    let mut cfg = tiny_config();
    cfg.n_layers = 0;
    assert!(count_params(&cfg).is_err());
    let mut cfg = tiny_config();
    cfg.d_model = 0;
    cfg.d_global = 0;
    cfg.d_local = 0;
    assert!(count_params(&cfg).is_err());
}

#[test]
fn count_params_is_additive_in_layers() {
    let mk = |n_layers: usize| {
        let mut cfg = tiny_config();
        cfg.n_layers = n_layers;
        count_params(&cfg).unwrap()
    };
    let step21 = mk(2) - mk(1);
    let step32 = mk(3) - mk(2);
    assert_eq!(step21, step32, "each extra layer adds the same block");
}

#[test]
fn count_params_matches_registry_tally() {
    for pe in [PeKind::Sype, PeKind::Rope, PeKind::None] {
        for warp_mode in [WarpMode::Adaptive, WarpMode::Identity] {
            for use_mlp in [true, false] {
                let mut cfg = tiny_config();
                cfg.pe_kind = pe;
                cfg.warp_mode = warp_mode;
                cfg.use_mlp = use_mlp;
                let model = StretchTimeModel::init(cfg, 11).unwrap();
                assert_eq!(
                    model.params.total_scalars(),
                    count_params(&cfg).unwrap(),
                    "pe={pe:?} warp={warp_mode:?} mlp={use_mlp}"
                );
            }
        }
    }
}

#[test]
fn untrained_model_is_last_value_persistence() {
    let cfg = tiny_config();
    let model = StretchTimeModel::init(cfg, 5).unwrap();
    let x = random_input(&cfg, 9);
    let pred = eval_forward(&model, &x);
    let last = &x[(cfg.lookback - 1) * cfg.channels..];
    for t in 0..cfg.horizon {
        for c in 0..cfg.channels {
            assert_eq!(pred[t * cfg.channels + c].to_bits(), last[c].to_bits());
        }
    }
}

#[test]
fn forward_is_translation_equivariant() {
    let cfg = tiny_config();
    let mut model = StretchTimeModel::init(cfg, 5).unwrap();
    // Give the readout real values so the model is not trivially persistence.
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for name in ["readout.weight"] {
        for v in &mut model.params.get_mut(name).unwrap().values {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let x = random_input(&cfg, 10);
    let base = eval_forward(&model, &x);
    let kappa = [1.75, -3.5];
    let shifted_x: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v + kappa[i % cfg.channels])
        .collect();
    let shifted = eval_forward(&model, &shifted_x);
    for t in 0..cfg.horizon {
        for c in 0..cfg.channels {
            let want = base[t * cfg.channels + c] + kappa[c];
            let got = shifted[t * cfg.channels + c];
            assert!((got - want).abs() <= 1e-8, "({t},{c}): {got} vs {want}");
        }
    }
}

#[test]
fn tokens_scale_linearly_in_input() {
    let cfg = tiny_config();
    let model = StretchTimeModel::init(cfg, 7).unwrap();
    let n = cfg.n_tokens();
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut pad = vec![0.0; n * c];
    for v in pad.iter_mut().take(cfg.lookback * c) {
        *v = rng.gen_range(-1.0..1.0);
    }
    let doubled: Vec<f64> = pad.iter().map(|v| 2.0 * v).collect();
    let zero = vec![0.0; n * c];

    let mut tape = Tape::no_grad();
    let binds = model.bind(&mut tape, false);
    let xp = tape.constant(pad, vec![n, c]);
    let xd = tape.constant(doubled, vec![n, c]);
    let xz = tape.constant(zero, vec![n, c]);
    let t1 = model.tokenize(&mut tape, &binds, xp, 0).unwrap();
    let t2 = model.tokenize(&mut tape, &binds, xd, 0).unwrap();
    let t0 = model.tokenize(&mut tape, &binds, xz, 0).unwrap();
    // tokens(2X) + tokens(0) = 2 * tokens(X): the value part is linear and
    // the positional/channel part is constant.
    for i in 0..n * cfg.d_model {
        let lhs = tape.values(t2)[i] + tape.values(t0)[i];
        let rhs = 2.0 * tape.values(t1)[i];
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn future_slot_tokens_ignore_the_lookback_values() {
    let cfg = tiny_config();
    let model = StretchTimeModel::init(cfg, 7).unwrap();
    let n = cfg.n_tokens();
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut pad_a = vec![0.0; n * c];
    let mut pad_b = vec![0.0; n * c];
    for i in 0..cfg.lookback * c {
        pad_a[i] = rng.gen_range(-1.0..1.0);
        pad_b[i] = rng.gen_range(-1.0..1.0);
    }
    let mut tape = Tape::no_grad();
    let binds = model.bind(&mut tape, false);
    let xa = tape.constant(pad_a, vec![n, c]);
    let xb = tape.constant(pad_b, vec![n, c]);
    let ta = model.tokenize(&mut tape, &binds, xa, 1).unwrap();
    let tb = model.tokenize(&mut tape, &binds, xb, 1).unwrap();
    let from = cfg.lookback * cfg.d_model;
    assert_eq!(
        &tape.values(ta)[from..],
        &tape.values(tb)[from..],
        "future-slot tokens depend only on position and channel embeddings"
    );

    let zero_tokens = {
        let mut zero_model = model.clone();
        for name in ["pos_embed", "chan_embed"] {
            for v in &mut zero_model.params.get_mut(name).unwrap().values {
                *v = 0.0;
            }
        }
        let binds = zero_model.bind(&mut tape, false);
        let xz = tape.constant(vec![0.0; n * c], vec![n, c]);
        let t = zero_model.tokenize(&mut tape, &binds, xz, 0).unwrap();
        tape.values(t).to_vec()
    };
    assert!(zero_tokens.iter().all(|&v| v == 0.0));
}

#[test]
fn sype_at_init_is_bit_identical_to_static_clock() {
    let mut cfg = tiny_config();
    cfg.pe_kind = PeKind::Sype;
    cfg.warp_mode = WarpMode::Adaptive;
    let adaptive = StretchTimeModel::init(cfg, 77).unwrap();
    let mut cfg_static = cfg;
    cfg_static.warp_mode = WarpMode::Identity;
    let static_clock = StretchTimeModel::init(cfg_static, 77).unwrap();

    let x = random_input(&cfg, 21);
    let a = eval_forward(&adaptive, &x);
    let b = eval_forward(&static_clock, &x);
    for (x1, x2) in a.iter().zip(&b) {
        assert_eq!(x1.to_bits(), x2.to_bits());
    }
}

#[test]
fn channels_decouple_when_global_projection_is_zero() {
    let cfg = tiny_config();
    let mut model = StretchTimeModel::init(cfg, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for v in &mut model.params.get_mut("readout.weight").unwrap().values {
        *v = rng.gen_range(-0.5..0.5);
    }
    for v in &mut model.params.get_mut("global_proj").unwrap().values {
        *v = 0.0;
    }
    let x1 = random_input(&cfg, 40);
    let mut x2 = x1.clone();
    // Perturb channel 1 everywhere; channel 0 predictions must not move.
    for t in 0..cfg.lookback {
        x2[t * cfg.channels + 1] += 3.0;
    }
    let p1 = eval_forward(&model, &x1);
    let p2 = eval_forward(&model, &x2);
    for t in 0..cfg.horizon {
        assert_eq!(
            p1[t * cfg.channels].to_bits(),
            p2[t * cfg.channels].to_bits(),
            "channel 0 must ignore channel 1 without global mixing"
        );
    }

    // With a non-zero global projection the coupling reappears.
    let coupled = StretchTimeModel::init(cfg, 31).unwrap();
    let mut coupled = coupled;
    for v in &mut coupled.params.get_mut("readout.weight").unwrap().values {
        *v = 0.3;
    }
    let q1 = eval_forward(&coupled, &x1);
    let q2 = eval_forward(&coupled, &x2);
    assert_ne!(q1, q2);
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_config();
    let model = StretchTimeModel::init(cfg, 123).unwrap();
    let x = random_input(&cfg, 55);
    let a = eval_forward(&model, &x);
    let b = eval_forward(&model, &x);
    for (x1, x2) in a.iter().zip(&b) {
        assert_eq!(x1.to_bits(), x2.to_bits());
    }
    let again = StretchTimeModel::init(cfg, 123).unwrap();
    assert_eq!(model.params, again.params);
}

#[test]
fn training_masks_change_the_output() {
    let mut cfg = tiny_config();
    cfg.dropout_rate = 0.2;
    let mut model = StretchTimeModel::init(cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for v in &mut model.params.get_mut("readout.weight").unwrap().values {
        *v = rng.gen_range(-0.5..0.5);
    }
    let x = random_input(&cfg, 2);
    let masks = SampleMasks::sample(&cfg, &mut rng);
    let mut tape = Tape::no_grad();
    let binds = model.bind(&mut tape, false);
    let with = model.forward(&mut tape, &binds, &x, Some(&masks)).unwrap();
    let without = model.forward(&mut tape, &binds, &x, None).unwrap();
    assert_ne!(tape.values(with), tape.values(without));
}

#[test]
fn mse_loss_zero_for_exact_prediction() {
    let cfg = tiny_config();
    let model = StretchTimeModel::init(cfg, 5).unwrap();
    let x = random_input(&cfg, 3);
    let mut tape = Tape::no_grad();
    let binds = model.bind(&mut tape, false);
    let pred = model.forward(&mut tape, &binds, &x, None).unwrap();
    let truth = tape.values(pred).to_vec();
    let loss = model.mse_loss(&mut tape, pred, &truth).unwrap();
    assert_eq!(tape.scalar_value(loss), 0.0);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let dir = std::env::temp_dir().join("stretchtime_test_ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    let mut cfg = tiny_config();
    cfg.pe_kind = PeKind::Sype;
    let mut model = StretchTimeModel::init(cfg, 2026).unwrap();
    // Scatter non-trivial values so round-trip precision is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for i in 0..model.params.len() {
        for v in &mut model.params.at_mut(i).values {
            if rng.gen::<f64>() < 0.25 {
                *v = rng.gen_range(-1.0..1.0) * 1e-13;
            }
        }
    }
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.params.len(), model.params.len());
    for (a, b) in loaded.params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(x.to_bits(), y.to_bits(), "param {} must round-trip", a.name);
        }
    }

    std::fs::write(&path, "not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
