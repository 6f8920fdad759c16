//! One PASS/FAIL line per acceptance criterion. Every tolerance is pinned
//! here; the process exits non-zero if any line fails.
//!
//! `SSGAN_ACCEPT_ONLY=benefit,cmc` restricts the run to the named
//! criteria, which is handy while iterating on one of them.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssgan_core::data::{
    load_dataset, make_synthetic, make_synthetic_classes, split_train_test, strip_labels, write_image_tree, Dataset,
    Protocol, SyntheticStyle,
};
use ssgan_core::eval::{cmc_curve, rank_classes};
use ssgan_core::gradcheck::{run_suite, Precision, SuiteOptions, CHECK_NAMES};
use ssgan_core::losses::{supervised_loss, total_loss, unsupervised_loss};
use ssgan_core::models::ModelConfig;
use ssgan_core::tensor::{conv2d, conv2d_transpose};
use ssgan_core::training::{
    train, Algorithm, Checkpoint, ExperimentConfig, TrainOptions, Trainer, TrainingConfig,
};
use ssgan_core::{Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Gradient suite

const GRAD_TRIALS: usize = 20;
const GRAD_THRESHOLD: f64 = 1e-4;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(120);

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let opts = SuiteOptions { trials: GRAD_TRIALS, precision: Precision::Double, ..SuiteOptions::default() };
    let results = run_suite(&opts).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let covered = CHECK_NAMES.iter().all(|n| results.iter().any(|r| r.name == *n));
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !(r.max_error < GRAD_THRESHOLD && r.trials >= GRAD_TRIALS && r.threshold <= GRAD_THRESHOLD))
        .map(|r| format!("{} ({:.2e})", r.name, r.max_error))
        .collect();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    ensure(
        covered && failing.is_empty() && elapsed < GRAD_TIME_LIMIT,
        format!(
            "{} checks x {GRAD_TRIALS} trials, worst rel err {worst:.2e} < {GRAD_THRESHOLD:e}, {:.1}s < {}s{}",
            results.len(),
            elapsed.as_secs_f64(),
            GRAD_TIME_LIMIT.as_secs(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// Loss identities and worked values

const IDENTITY_TOL: f64 = 1e-9;
const WORKED_TOL: f64 = 1e-6;

fn eval_scalar(tape: &Tape<f64>, v: ssgan_core::Var) -> f64 {
    tape.value(v).data()[0]
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_total = 0.0f64;
    let mut worst_delta = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for trial in 0..200 {
        let k = rng.random_range(2..12);
        let (nr, nf) = (rng.random_range(1..9), rng.random_range(1..9));
        let scale = if trial % 2 == 0 { 1.0 } else { 6.0 };
        let mut logits = |n: usize| Tensor::<f64>::from_fn([n, k + 1], |_| scale * (rng.random::<f64>() * 2.0 - 1.0));
        let (real, fake) = (logits(nr), logits(nf));
        let labels: Vec<usize> = (0..nr).map(|i| (i * 7 + trial) % k).collect();

        let mut tape = Tape::new();
        let rv = tape.constant(real.clone());
        let fv = tape.constant(fake.clone());
        let theta = supervised_loss(&mut tape, rv, &labels, None).map_err(|e| e.to_string())?;
        let delta = unsupervised_loss(&mut tape, rv, fv).map_err(|e| e.to_string())?;
        let total = total_loss(&mut tape, theta, delta).map_err(|e| e.to_string())?;
        let (t, d, l) = (eval_scalar(&tape, theta), eval_scalar(&tape, delta), eval_scalar(&tape, total));
        if l != t + d {
            return Err(format!("total {l} != theta {t} + delta {d}"));
        }
        worst_total = worst_total.max((l - (t + d)).abs());

        // δ through log Σ_{i≤k} p_i, computed with a stable log-sum-exp.
        let lse = |row: &[f64]| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let rows = |t: &Tensor<f64>| t.data().chunks(k + 1).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let real_term: f64 = rows(&real).iter().map(|r| lse(&r[..k]) - lse(r)).sum::<f64>() / nr as f64;
        let fake_term: f64 = rows(&fake).iter().map(|r| r[k] - lse(r)).sum::<f64>() / nf as f64;
        worst_delta = worst_delta.max((d - (-real_term - fake_term)).abs());

        let c = rng.random::<f64>() * 10.0 - 5.0;
        let uniform = Tensor::<f64>::from_fn([3, k + 1], |_| c);
        let mut tape = Tape::new();
        let u = tape.constant(uniform);
        let th = supervised_loss(&mut tape, u, &[0, k - 1, k / 2], None).map_err(|e| e.to_string())?;
        worst_uniform = worst_uniform.max((eval_scalar(&tape, th) - (k as f64).ln()).abs());
    }
    ensure(
        worst_delta < IDENTITY_TOL && worst_uniform < IDENTITY_TOL,
        format!(
            "200 draws: |L-(θ+δ)| = {worst_total:e}, δ identity {worst_delta:.1e}, uniform vs ln k {worst_uniform:.1e} (tol {IDENTITY_TOL:e})"
        ),
    )
}

/// `ln x` for `x` near 1 via the atanh series, as a check on the library
/// values that does not go through `f64::ln`.
fn series_ln(x: f64) -> f64 {
    let y = (x - 1.0) / (x + 1.0);
    let (mut term, mut sum, y2) = (y, 0.0, y * y);
    for n in 0..200 {
        sum += term / (2 * n + 1) as f64;
        term *= y2;
    }
    2.0 * sum
}

fn worked_values() -> Outcome {
    const THETA: f64 = 0.405465;
    const DELTA: f64 = 1.504077;
    // k=2, logits (ln 2, 0, 0), first class: -ln(2/3).
    let theta_oracle = -series_ln(2.0 / 3.0);
    // One real and one fake, all logits zero: -ln(2/3) - ln(1/3).
    let delta_oracle = -series_ln(2.0 / 3.0) - (series_ln(2.0 / 3.0) + series_ln(0.5));

    let mut tape = Tape::<f64>::new();
    let lg = tape.constant(Tensor::new([1, 3], vec![2f64.ln(), 0.0, 0.0]).unwrap());
    let th = supervised_loss(&mut tape, lg, &[0], None).map_err(|e| e.to_string())?;
    let z = tape.constant(Tensor::new([1, 3], vec![0.0; 3]).unwrap());
    let z2 = tape.constant(Tensor::new([1, 3], vec![0.0; 3]).unwrap());
    let de = unsupervised_loss(&mut tape, z, z2).map_err(|e| e.to_string())?;
    let (t, d) = (eval_scalar(&tape, th), eval_scalar(&tape, de));
    let errs = [(t - theta_oracle).abs(), (d - delta_oracle).abs(), (t - THETA).abs(), (d - DELTA).abs()];
    ensure(
        errs.iter().all(|&e| e < WORKED_TOL),
        format!("θ = {t:.7} (oracle {theta_oracle:.7}), δ = {d:.7} (oracle {delta_oracle:.7}), tol {WORKED_TOL:e}"),
    )
}

// ---------------------------------------------------------------------------
// CMC

fn cmc_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let k = rng.random_range(1..=10);
        let n = rng.random_range(1..=50);
        // Half the instances draw from a coarse grid so ties are common.
        let coarse = case % 2 == 1;
        let logits = Tensor::<f64>::from_fn([n, k + 1], |_| {
            if coarse {
                rng.random_range(0..3) as f64
            } else {
                rng.random::<f64>()
            }
        });
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ranks = rank_classes(&logits, k).map_err(|e| e.to_string())?;
        let curve = cmc_curve(&ranks, &labels).map_err(|e| e.to_string())?;

        // Brute force: position = classes scoring higher, plus equal scores
        // at a lower index (the documented tie rule), plus one.
        let mut oracle = vec![0.0; k];
        for r in 1..=k {
            let hits = (0..n)
                .filter(|&i| {
                    let row = &logits.data()[i * (k + 1)..i * (k + 1) + k];
                    let y = labels[i];
                    let ahead = (0..k).filter(|&c| row[c] > row[y] || (row[c] == row[y] && c < y)).count();
                    ahead < r
                })
                .count();
            oracle[r - 1] = hits as f64 / n as f64;
        }
        let monotone = curve.accuracies.windows(2).all(|w| w[0] <= w[1]);
        if curve.accuracies != oracle || !monotone || curve.accuracies[k - 1] != 1.0 {
            return Err(format!("instance {case} (k={k}, n={n}): {:?} vs oracle {oracle:?}", curve.accuracies));
        }
    }
    Ok("100 instances (k <= 10, n <= 50, half with ties): exact match, monotone, ends at 1".into())
}

// ---------------------------------------------------------------------------
// Adjoint

const ADJOINT_TOL: f64 = 1e-10;

fn adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 50 {
        let (n, c, f) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let (k, stride) = (rng.random_range(1..6), rng.random_range(1..4));
        let pad = rng.random_range(0..k);
        let out = rng.random_range(1..6);
        let full = (out - 1) * stride + k;
        if full <= 2 * pad {
            continue;
        }
        let side = full - 2 * pad;
        let mut t = |shape: [usize; 4]| Tensor::<f64>::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0);
        let (x, kern, y) = (t([n, c, side, side]), t([f, c, k, k]), t([n, f, out, out]));
        let ax = conv2d(&x, &kern, stride, pad).map_err(|e| e.to_string())?;
        let aty = conv2d_transpose(&y, &kern, stride, pad).map_err(|e| e.to_string())?;
        if ax.shape() != y.shape() || aty.shape() != x.shape() {
            return Err(format!("shape mismatch at stride {stride}, pad {pad}, k {k}"));
        }
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let (l, r) = (dot(&ax, &y), dot(&x, &aty));
        worst = worst.max((l - r).abs() / (1.0 + l.abs()));
        done += 1;
    }
    ensure(worst < ADJOINT_TOL, format!("50 shape/stride/pad draws, max |<Ax,y>-<x,A'y>|/(1+|<Ax,y>|) = {worst:.2e} < {ADJOINT_TOL:e}"))
}

// ---------------------------------------------------------------------------
// Semi-supervised benefit

const BENEFIT_SEEDS: [u64; 3] = [0, 1, 2];
const BENEFIT_BUDGET: Duration = Duration::from_secs(480);
const BENEFIT_MARGIN: f64 = 5.0;
// Layer noise for both arms; see the decisions ledger for the sweep behind it.
const BENEFIT_NOISE: f64 = 0.1;
const RUN_LIMIT: Duration = Duration::from_secs(15 * 60);
// Filled/hollow pairs: telling them apart under heavy jitter needs more than 25 labels.
const BENEFIT_SHAPES: [&str; 4] = ["disc", "ring", "square", "frame"];

fn benefit_dataset(seed: u64) -> Result<Dataset, String> {
    let raw = make_synthetic_classes(&BENEFIT_SHAPES, 500, 16, 7, &SyntheticStyle::hard()).map_err(|e| e.to_string())?;
    let split = split_train_test(&raw, Protocol::Fraction(0.5), 7).map_err(|e| e.to_string())?;
    strip_labels(&split, 0.9, seed).map_err(|e| e.to_string())
}

fn benefit_experiment(algorithm: Algorithm, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        num_classes: 4,
        image_shape: [1, 16, 16],
        training: TrainingConfig {
            algorithm,
            batch_size: 64,
            iterations: u64::MAX,
            eval_interval: u64::MAX,
            unlabeled_fraction: 0.9,
            lr_d: 1e-3,
            lr_g: 1e-3,
            seed,
            ..TrainingConfig::default()
        },
        model: ModelConfig { channel_widths: vec![16, 32], noise_std: BENEFIT_NOISE, ..ModelConfig::default() },
    }
}

fn timed_top1(algorithm: Algorithm, seed: u64, ds: &Dataset) -> Result<(f64, u64, Duration), String> {
    let t0 = Instant::now();
    let mut tr = Trainer::new(benefit_experiment(algorithm, seed), ds).map_err(|e| e.to_string())?;
    let opts = TrainOptions { checkpoint_dir: None, time_budget: Some(BENEFIT_BUDGET) };
    train(&mut tr, ds, &opts, &mut []).map_err(|e| e.to_string())?;
    let top1 = tr.evaluate(ds).map_err(|e| e.to_string())?.top1;
    Ok((top1, tr.iteration, t0.elapsed()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn semi_supervised_benefit() -> Outcome {
    let mut ssgan = Vec::new();
    let mut sup = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in BENEFIT_SEEDS {
        let ds = benefit_dataset(seed)?;
        let labeled = ds.train.iter().filter(|s| s.label.is_some()).count();
        if labeled != 100 || ds.train.len() != 1000 {
            return Err(format!("benefit split has {labeled} labeled of {}", ds.train.len()));
        }
        let (a, ia, ta) = timed_top1(Algorithm::Ssgan, seed, &ds)?;
        let (b, ib, tb) = timed_top1(Algorithm::Supervised, seed, &ds)?;
        eprintln!("  seed {seed}: ssgan {a:.1}% ({ia} it) vs supervised {b:.1}% ({ib} it)");
        slowest = slowest.max(ta).max(tb);
        ssgan.push(a);
        sup.push(b);
    }
    let (ms, mb) = (median(ssgan.clone()), median(sup.clone()));
    ensure(
        ms - mb >= BENEFIT_MARGIN && slowest <= RUN_LIMIT,
        format!(
            "median top-1 ssgan {ms:.1}% vs supervised {mb:.1}% (+{:.1} pp, need +{BENEFIT_MARGIN}), {}s budget each, slowest run {:.0}s; per seed {ssgan:.1?} vs {sup:.1?}",
            ms - mb,
            BENEFIT_BUDGET.as_secs(),
            slowest.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism and persistence

const DETERMINISM_TOL: f64 = 1e-12;

fn small_run(seed: u64) -> Result<(Dataset, ExperimentConfig), String> {
    let raw = make_synthetic(3, 24, 16, 5).map_err(|e| e.to_string())?;
    let split = split_train_test(&raw, Protocol::Fraction(0.5), 5).map_err(|e| e.to_string())?;
    let ds = strip_labels(&split, 0.5, 5).map_err(|e| e.to_string())?;
    let exp = ExperimentConfig {
        num_classes: 3,
        image_shape: [1, 16, 16],
        training: TrainingConfig { batch_size: 16, unlabeled_fraction: 0.5, seed, ..TrainingConfig::default() },
        model: ModelConfig { latent_dim: 16, channel_widths: vec![8, 16], ..ModelConfig::default() },
    };
    Ok((ds, exp))
}

fn losses(tr: &mut Trainer, ds: &Dataset, n: usize) -> Result<Vec<[f64; 4]>, String> {
    (0..n)
        .map(|_| tr.step(ds).map(|r| [r.theta, r.delta, r.total, r.gen_loss]).map_err(|e| e.to_string()))
        .collect()
}

fn max_gap(a: &[[f64; 4]], b: &[[f64; 4]]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn determinism() -> Outcome {
    let (ds, exp) = small_run(21)?;
    let first = losses(&mut Trainer::new(exp.clone(), &ds).map_err(|e| e.to_string())?, &ds, 10)?;
    let second = losses(&mut Trainer::new(exp.clone(), &ds).map_err(|e| e.to_string())?, &ds, 10)?;
    let rerun = max_gap(&first, &second);

    let mut straight = Trainer::new(exp, &ds).map_err(|e| e.to_string())?;
    losses(&mut straight, &ds, 4)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ssgn");
    straight.checkpoint().and_then(|c| c.save(&path)).map_err(|e| e.to_string())?;
    let want = losses(&mut straight, &ds, 5)?;
    let ckpt = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(&ckpt, &ds).map_err(|e| e.to_string())?;
    let got = losses(&mut resumed, &ds, 5)?;
    let resume = max_gap(&want, &got);
    ensure(
        rerun <= DETERMINISM_TOL && resume <= DETERMINISM_TOL,
        format!("10-iteration rerun gap {rerun:e}, 5-iteration resume gap {resume:e} (tol {DETERMINISM_TOL:e})"),
    )
}

// ---------------------------------------------------------------------------
// Protocol fidelity

fn per_class_counts(ds: &Dataset) -> Vec<(usize, usize, usize)> {
    (0..ds.num_classes())
        .map(|c| {
            let train: Vec<_> = ds.train.iter().filter(|s| s.class == c).collect();
            let withheld = train.iter().filter(|s| s.label.is_none()).count();
            (train.len(), ds.test.iter().filter(|s| s.class == c).count(), withheld)
        })
        .collect()
}

fn protocol_case(protocol: Protocol, per_class: usize, u: f64, want: (usize, usize, usize)) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tree = make_synthetic(2, per_class, 8, 17).map_err(|e| e.to_string())?;
    write_image_tree(&tree, dir.path()).map_err(|e| e.to_string())?;
    let loaded = load_dataset(dir.path(), [1, 8, 8]).map_err(|e| e.to_string())?;
    let split = split_train_test(&loaded, protocol, 3).map_err(|e| e.to_string())?;
    let ds = strip_labels(&split, u, 3).map_err(|e| e.to_string())?;
    let counts = per_class_counts(&ds);
    ensure(
        counts.iter().all(|&c| c == want),
        format!("{protocol}: {per_class}/class -> train/test/withheld {counts:?}, want {want:?}"),
    )
}

fn protocol_fidelity() -> Outcome {
    let eth = protocol_case(Protocol::Eth, 1000, 0.1, (750, 250, 75));
    let indian = protocol_case(Protocol::Indian, 100, 0.5, (80, 20, 40));
    match (eth, indian) {
        (Ok(a), Ok(b)) => Ok(format!("{a}; {b}")),
        (a, b) => Err(format!("{}; {}", a.unwrap_or_else(|e| e), b.unwrap_or_else(|e| e))),
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Vec<String> = std::env::var("SSGAN_ACCEPT_ONLY")
        .map(|s| s.split(',').map(|t| t.trim().to_string()).collect())
        .unwrap_or_default();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradients", gradient_suite),
        ("loss-identities", loss_identities),
        ("worked-values", worked_values),
        ("cmc", cmc_properties),
        ("adjoint", adjoint),
        ("determinism", determinism),
        ("protocol", protocol_fidelity),
        ("benefit", semi_supervised_benefit),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let t0 = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name}: {detail} [{:.1}s]", t0.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
