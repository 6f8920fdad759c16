use std::collections::HashSet;

use proptest::prelude::*;
use ssgan_core::data::{make_synthetic, preprocess_image, split_train_test, strip_labels, tensor_to_image, Protocol};
use ssgan_core::eval::{cmc_curve, rank_classes};
use ssgan_core::layers::{softmax, BatchNorm, Mode, ParamStore};
use ssgan_core::losses::{feature_matching_loss, supervised_loss, unsupervised_loss};
use ssgan_core::tensor::{conv2d, conv2d_transpose};
use ssgan_core::training::{Adam, AdamConfig, Checkpoint, RunState, TrainingConfig};
use ssgan_core::{RandomSource, Tape, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = RandomSource::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(b in 1usize..6, w in 2usize..9, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = tensor(&[b, w], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = softmax(&mut tape, v).unwrap();
        let p = tape.value(p).clone();
        for row in p.data().chunks(w) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&q| q > 0.0 && q < 1.0));
        }
        let mut tape = Tape::new();
        let v = tape.constant(x.map(|a| a + shift));
        let q = softmax(&mut tape, v).unwrap();
        prop_assert!(tape.value(q).max_abs_diff(&p).unwrap() < 1e-12);
    }

    #[test]
    fn conv_transpose_is_the_adjoint(
        n in 1usize..3, c in 1usize..4, f in 1usize..4,
        k in 1usize..5, stride in 1usize..4, pad in 0usize..3, out in 1usize..5, seed in any::<u64>(),
    ) {
        prop_assume!(pad < k);
        // Input side for which the transposed conv maps back exactly.
        let side = (out - 1) * stride + k;
        prop_assume!(side > 2 * pad);
        let side = side - 2 * pad;
        let x = tensor(&[n, c, side, side], seed);
        let kern = tensor(&[f, c, k, k], seed ^ 1);
        let y = tensor(&[n, f, out, out], seed ^ 2);
        let ax = conv2d(&x, &kern, stride, pad).unwrap();
        prop_assert_eq!(ax.shape(), y.shape());
        let aty = conv2d_transpose(&y, &kern, stride, pad).unwrap();
        prop_assert_eq!(aty.shape(), x.shape());
        let (l, r) = (ax.dot(&y).unwrap(), x.dot(&aty).unwrap());
        prop_assert!((l - r).abs() <= 1e-10 * (1.0 + l.abs()), "{} vs {}", l, r);
    }

    #[test]
    fn batchnorm_train_output_is_standardized(b in 2usize..6, ch in 1usize..4, side in 1usize..4, seed in any::<u64>()) {
        prop_assume!(b * side * side >= 2);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let bn = BatchNorm::register::<f64>(&mut params, &mut buffers, "bn", ch, 1e-5, 0.1).unwrap();
        let x = tensor(&[b, ch, side, side], seed).map(|v| 3.0 * v + 1.5);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x_copy = x.clone();
        let xv = tape.constant(x);
        let (y, _) = bn.forward(&mut tape, &p, &buffers, xv, Mode::Train).unwrap();
        let y = tape.value(y);
        let hw = side * side;
        let channel = |t: &Tensor<f64>, c: usize| -> Vec<f64> {
            (0..b).flat_map(|s| t.data()[(s * ch + c) * hw..(s * ch + c + 1) * hw].to_vec()).collect()
        };
        let moments = |v: &[f64]| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            (mean, v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
        };
        for c in 0..ch {
            let (_, raw_var) = moments(&channel(&x_copy, c));
            let (mean, var) = moments(&channel(y, c));
            prop_assert!(mean.abs() < 1e-6);
            // eps pulls the variance just below 1; it only matters for tiny spreads.
            prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);
            if raw_var > 0.1 {
                prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_delta_identity_holds(b in 1usize..6, k in 2usize..6, seed in any::<u64>(), scale in 0.1f64..8.0) {
        let logits = tensor(&[b, k + 1], seed).map(|v| v * scale);
        let fake = tensor(&[b, k + 1], seed ^ 7).map(|v| v * scale);
        let mut rng = RandomSource::new(seed);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let f = tape.constant(fake.clone());
        let theta = supervised_loss(&mut tape, l, &labels, None).unwrap();
        let delta = unsupervised_loss(&mut tape, l, f).unwrap();
        let theta = tape.value(theta).item().unwrap();
        let delta = tape.value(delta).item().unwrap();
        prop_assert!(theta >= 0.0 && delta >= 0.0);

        // The same δ through log Σ_{i<k} p_i instead of log(1 − p_fake).
        let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
        let probs = |t: &Tensor<f64>, r: usize| {
            let row = &t.data()[r * (k + 1)..(r + 1) * (k + 1)];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let mut real_term = 0.0;
        let mut fake_term = 0.0;
        for r in 0..b {
            let p = probs(&logits, r);
            let pf = clamp(p[k]);
            let real_mass: f64 = if pf == p[k] { p[..k].iter().sum() } else { 1.0 - pf };
            real_term += real_mass.ln();
            fake_term += clamp(probs(&fake, r)[k]).ln();
        }
        let oracle = -(real_term / b as f64) - fake_term / b as f64;
        prop_assert!((delta - oracle).abs() < 1e-9, "{} vs {}", delta, oracle);
    }

    #[test]
    fn supervised_loss_ignores_real_logit_shifts(b in 1usize..5, k in 2usize..6, seed in any::<u64>(), shift in -20.0f64..20.0, fake_shift in -5.0f64..5.0) {
        let logits = tensor(&[b, k + 1], seed);
        let moved = Tensor::from_fn([b, k + 1], |i| logits.data()[i] + if i % (k + 1) == k { fake_shift } else { shift });
        let labels: Vec<usize> = (0..b).map(|r| r % k).collect();
        let eval = |t: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let l = supervised_loss(&mut tape, v, &labels, Some(0.9)).unwrap();
            tape.value(l).item().unwrap()
        };
        prop_assert!((eval(logits) - eval(moved)).abs() < 1e-10);
    }

    #[test]
    fn feature_matching_is_zero_iff_means_agree(b in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let real = tensor(&[b, w], seed);
        let mut rows: Vec<usize> = (0..b).collect();
        RandomSource::new(seed).shuffle(&mut rows);
        let permuted = real.select_rows(&rows).unwrap();
        let other = tensor(&[b, w], seed ^ 3);
        let fm = |a: &Tensor<f64>, c: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(c.clone()));
            let l = feature_matching_loss(&mut tape, x, y).unwrap();
            tape.value(l).item().unwrap()
        };
        prop_assert!(fm(&real, &permuted) < 1e-20);
        prop_assert!(fm(&real, &other) > 0.0);
    }

    #[test]
    fn cmc_matches_brute_force(k in 1usize..=10, n in 1usize..=50, seed in any::<u64>(), coarse in any::<bool>()) {
        let mut rng = RandomSource::new(seed);
        // Coarse logits produce plenty of ties.
        let logits = Tensor::from_fn([n, k + 1], |_| if coarse { rng.below(3) as f64 } else { rng.normal() });
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let ranks = rank_classes(&logits, k).unwrap();
        for order in &ranks {
            let set: HashSet<usize> = order.iter().copied().collect();
            prop_assert_eq!(set, (0..k).collect::<HashSet<_>>());
        }
        let curve = cmc_curve(&ranks, &labels).unwrap();
        for r in 1..=k {
            let hits = (0..n)
                .filter(|&s| {
                    let row = &logits.data()[s * (k + 1)..s * (k + 1) + k];
                    let y = labels[s];
                    let ahead = (0..k).filter(|&j| row[j] > row[y] || (row[j] == row[y] && j < y)).count();
                    ahead < r
                })
                .count();
            prop_assert_eq!(curve.at(r), hits as f64 / n as f64);
        }
        prop_assert!(curve.accuracies.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(curve.at(k), 1.0);
    }

    #[test]
    fn adam_matches_scalar_trace(theta0 in -2.0f64..2.0, g1 in -5.0f64..5.0, g2 in -5.0f64..5.0, lr in 1e-4f64..1e-1, b1 in 0.0f64..0.95, b2 in 0.9f64..0.9999) {
        prop_assume!(g1 != 0.0 && g2 != 0.0);
        let cfg = AdamConfig { lr, beta1: b1, beta2: b2, eps: 1e-8 };
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new([1], vec![theta0]).unwrap()).unwrap();
        let mut adam = Adam::new(cfg, &p);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            let mut gs = ParamStore::new();
            gs.insert("w", Tensor::new([1], vec![g]).unwrap()).unwrap();
            adam.step(&mut p, &gs).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + 1e-8);
        }
        prop_assert!((p.get("w").unwrap().data()[0] - th).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_for_any_state(steps in 0usize..5, seed in any::<u64>()) {
        let mut p = ParamStore::new();
        p.insert("a", tensor(&[3, 2], seed)).unwrap();
        p.insert("b", tensor(&[4], seed ^ 9)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for s in 0..steps {
            let mut g = ParamStore::new();
            g.insert("a", tensor(&[3, 2], seed ^ (s as u64 + 11))).unwrap();
            g.insert("b", tensor(&[4], seed ^ (s as u64 + 23))).unwrap();
            adam.step(&mut p, &g).unwrap();
        }
        let before = p.clone();
        let mut zero = ParamStore::new();
        zero.insert("a", Tensor::zeros([3, 2])).unwrap();
        zero.insert("b", Tensor::zeros([4])).unwrap();
        adam.step(&mut p, &zero).unwrap();
        prop_assert_eq!(p, before);
        prop_assert_eq!(adam.t, steps as u64 + 1);
    }

    #[test]
    fn checkpoint_round_trip_is_identity(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5),
        seed in any::<u64>(), iteration in any::<u64>(), cursor in 0usize..10, draws in 0usize..20,
    ) {
        let mut rng = RandomSource::new(seed);
        let mut tensors = indexmap::IndexMap::new();
        for (i, s) in shapes.iter().enumerate() {
            tensors.insert(format!("params/t{i}"), Tensor::from_fn(s.clone(), |_| rng.normal() as f32));
        }
        for _ in 0..draws {
            rng.next_u64();
        }
        let mut order: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut order);
        let ckpt = Checkpoint {
            tensors,
            iteration,
            state: RunState {
                adam_g_t: seed % 1000,
                adam_d_t: seed % 777,
                rngs: vec![("latent".into(), rng.clone()), ("noise".into(), rng.fork("x"))],
                sampler_order: order,
                sampler_cursor: cursor,
                config: format!("seed = {}\n", seed >> 1),
            },
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back, &ckpt);
        // Restored streams continue identically.
        let (mut a, mut b) = (back.state.rng("latent").unwrap(), ckpt.state.rng("latent").unwrap());
        prop_assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn training_config_round_trips(batch in 1usize..64, iters in 0u64..100_000, u in 0.0f64..=1.0, alpha in 0.01f64..=1.0, seed in 0u64..(i64::MAX as u64), lr in 1e-6f64..1.0) {
        let c = TrainingConfig {
            batch_size: batch * 2,
            iterations: iters,
            unlabeled_fraction: u,
            label_smoothing: alpha,
            seed,
            lr_d: lr,
            ..TrainingConfig::default()
        };
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        let back: TrainingConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(toml::to_string(&back).unwrap(), text);
    }

    #[test]
    fn preprocessing_is_idempotent_on_the_byte_grid(h in 1usize..9, w in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
        let c = if rgb { 3 } else { 1 };
        let mut rng = RandomSource::new(seed);
        let t = Tensor::from_fn([c, h, w], |_| (rng.below(256) as f64 / 127.5 - 1.0) as f32);
        let img = tensor_to_image(&t).unwrap();
        let back = preprocess_image(&img, [c, h, w]).unwrap();
        prop_assert_eq!(back.data(), t.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint_and_pure(k in 2usize..5, per in 3usize..12, p in 0.1f64..0.9, u in 0.0f64..=1.0, seed in any::<u64>()) {
        let raw = make_synthetic(k, per, 8, seed).unwrap();
        let split = split_train_test(&raw, Protocol::Fraction(p), seed).unwrap();
        let train: HashSet<&str> = split.train.iter().map(|s| s.source_id.as_str()).collect();
        let test: HashSet<&str> = split.test.iter().map(|s| s.source_id.as_str()).collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), k * per);
        let again = split_train_test(&raw, Protocol::Fraction(p), seed).unwrap();
        prop_assert_eq!(&again.train, &split.train);
        prop_assert_eq!(&again.test, &split.test);

        let stripped = strip_labels(&split, u, seed).unwrap();
        prop_assert_eq!(&stripped.test, &split.test);
        for (a, b) in stripped.train.iter().zip(&split.train) {
            prop_assert_eq!(&a.image, &b.image);
            prop_assert_eq!(&a.source_id, &b.source_id);
            prop_assert!(a.label.is_none() || a.label == b.label);
        }
        for class in 0..k {
            let n = split.train.iter().filter(|s| s.class == class).count();
            let hidden = stripped.train.iter().filter(|s| s.class == class && s.label.is_none()).count();
            prop_assert_eq!(hidden, (u * n as f64).round() as usize);
        }
        prop_assert_eq!(strip_labels(&split, u, seed).unwrap().train, stripped.train);
    }
}
