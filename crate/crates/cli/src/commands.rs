use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ssgan_core::data::{
    load_dataset, make_synthetic_classes, make_synthetic_with, split_train_test, strip_labels, write_image_tree, Dataset, Labeling, Manifest,
    Protocol, SplitKind, SyntheticStyle,
};
use ssgan_core::eval::{evaluate, report_table, write_image_grid, write_report, ReportFormat};
use ssgan_core::gradcheck::{run_suite, Precision, SuiteOptions, CHECK_NAMES};
use ssgan_core::training::{
    discriminator_from_checkpoint, generator_from_checkpoint, train as run_training, Algorithm, Checkpoint, CsvSink,
    ExperimentConfig, TrainOptions, Trainer, FINAL_CHECKPOINT,
};
use ssgan_core::{Error, RandomSource};

use crate::config::RunConfig;
use crate::{EvalArgs, GenerateArgs, GradcheckArgs, PrecisionArg, Shared, SplitArgs, StyleArg, SynthArgs, TrainArgs};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

/// Bad user input that the library never saw.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.is::<Invalid>() || c.downcast_ref::<Error>().is_some_and(Error::is_validation)
    });
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn load_config(shared: &Shared) -> Result<RunConfig> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("image shape `{s}` is not CxHxW")))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(invalid(format!("image shape `{s}` is not CxHxW"))),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| invalid(format!("grid `{s}` is not ROWSxCOLS")))?;
    let r: usize = r.trim().parse().map_err(|_| invalid(format!("grid `{s}` is not ROWSxCOLS")))?;
    let c: usize = c.trim().parse().map_err(|_| invalid(format!("grid `{s}` is not ROWSxCOLS")))?;
    if r == 0 || c == 0 {
        bail!(invalid("grid dimensions must be positive"));
    }
    Ok((r, c))
}

fn check_fraction(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        bail!(invalid(format!("--unlabeled must be in [0, 1], got {u}")));
    }
    Ok(())
}

pub fn split(shared: &Shared, a: SplitArgs) -> Result<()> {
    let mut cfg = load_config(shared)?;
    if let Some(d) = a.data {
        cfg.data_root = Some(d);
    }
    if let Some(p) = a.protocol {
        cfg.protocol = p;
    }
    if let Some(u) = a.unlabeled {
        cfg.training.unlabeled_fraction = u;
    }
    if let Some(s) = &a.image_shape {
        cfg.image_shape = parse_shape(s)?;
    }
    let u = cfg.training.unlabeled_fraction;
    check_fraction(u)?;
    let protocol: Protocol = cfg.protocol.parse()?;
    let root = cfg.data_root.clone().ok_or_else(|| invalid("split needs --data or data_root"))?;
    let seed = cfg.training.seed;
    let loaded = load_dataset(&root, cfg.image_shape).with_context(|| format!("loading {}", root.display()))?;
    let ds = strip_labels(&split_train_test(&loaded, protocol, seed)?, u, seed)?;
    let manifest = Manifest::from_dataset(&ds, protocol, u, seed);
    let out = shared.out.clone().or_else(|| cfg.manifest_path()).expect("data root is set");
    manifest.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{}: {} classes, train {} ({} labeled, {} unlabeled), test {}{}",
        out.display(),
        manifest.classes.len(),
        manifest.count(SplitKind::Train, None),
        manifest.count(SplitKind::Train, Some(Labeling::Labeled)),
        manifest.count(SplitKind::Train, Some(Labeling::Unlabeled)),
        manifest.count(SplitKind::Test, None),
        match manifest.warnings.len() {
            0 => String::new(),
            n => format!(", {n} files skipped"),
        }
    );
    Ok(())
}

pub fn synth(shared: &Shared, a: SynthArgs) -> Result<()> {
    let out = shared.out.clone().ok_or_else(|| invalid("synth needs --out <dir>"))?;
    let seed = load_config(shared)?.training.seed;
    let style = match a.style {
        StyleArg::Default => SyntheticStyle::default(),
        StyleArg::Clean => SyntheticStyle::clean(),
        StyleArg::Hard => SyntheticStyle::hard(),
    };
    let ds = if a.shapes.is_empty() {
        make_synthetic_with(a.classes, a.per_class, a.side, seed, &style)?
    } else {
        let names: Vec<&str> = a.shapes.iter().map(|s| s.trim()).collect();
        make_synthetic_classes(&names, a.per_class, a.side, seed, &style)?
    };
    write_image_tree(&ds, &out)?;
    println!(
        "{}: {} x {} images ({}x{})",
        out.display(),
        ds.class_names.join(", "),
        a.per_class,
        a.side,
        a.side
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, manifest: Option<PathBuf>) -> Result<(Manifest, Dataset)> {
    let path = manifest
        .or_else(|| cfg.manifest_path())
        .ok_or_else(|| invalid("no manifest: pass --manifest or --data"))?;
    let m = Manifest::load(&path).with_context(|| format!("reading manifest {}", path.display()))?;
    let root = cfg.data_root_for(&path);
    let ds = m.load_dataset(&root).with_context(|| format!("loading images under {}", root.display()))?;
    Ok((m, ds))
}

pub fn train(shared: &Shared, a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(shared)?;
    if let Some(d) = a.data {
        cfg.data_root = Some(d);
    }
    if let Some(m) = a.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(alg) = &a.algorithm {
        cfg.training.algorithm = alg.parse::<Algorithm>()?;
    }
    if let Some(i) = a.iterations {
        cfg.training.iterations = i;
    }
    if let Some(o) = &shared.out {
        cfg.out = o.clone();
    }
    if let Some(r) = a.resume {
        cfg.resume = Some(r);
    }
    if let Some(t) = a.time_budget {
        cfg.time_budget_secs = Some(t);
    }
    cfg.training.validate()?;
    let budget = match cfg.time_budget_secs {
        Some(t) if !(t > 0.0 && t.is_finite()) => bail!(invalid(format!("time budget must be positive, got {t}"))),
        t => t.map(Duration::from_secs_f64),
    };
    let (manifest, ds) = load_split(&cfg, None)?;

    let mut trainer = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let mut t = Trainer::from_checkpoint(&ckpt, &ds)?;
            if t.config().algorithm != cfg.training.algorithm {
                log::warn!("resuming a {} run; the configured algorithm is ignored", t.config().algorithm);
            }
            t.experiment.training.iterations = cfg.training.iterations;
            t
        }
        None => {
            let exp = ExperimentConfig {
                num_classes: manifest.classes.len(),
                image_shape: manifest.image_shape,
                training: cfg.training.clone(),
                model: cfg.model.clone(),
            };
            Trainer::new(exp, &ds)?
        }
    };

    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    std::fs::write(cfg.out.join("run.toml"), cfg.to_toml()?)?;
    let metrics = cfg.out.join("metrics.csv");
    let mut sink = if cfg.resume.is_some() && metrics.exists() {
        CsvSink::continuing(BufWriter::new(OpenOptions::new().append(true).open(&metrics)?))
    } else {
        CsvSink::create(&metrics)?
    };
    let opts = TrainOptions { checkpoint_dir: Some(cfg.out.clone()), time_budget: budget };
    let outcome = run_training(&mut trainer, &ds, &opts, &mut [&mut sink])?;

    if let Some(last) = outcome.history.last() {
        let l = last.losses;
        println!(
            "{} iterations ({:.1}s{}): theta {:.4} delta {:.4} total {:.4} gen {:.4}",
            trainer.iteration,
            outcome.elapsed.as_secs_f64(),
            if outcome.budget_exhausted { ", time budget reached" } else { "" },
            l.theta,
            l.delta,
            l.total,
            l.gen_loss
        );
    } else {
        println!("no iterations run; initial state saved");
    }
    if let Some(r) = outcome.reports.last() {
        println!("test top1 {:.2} top5 {:.2} top10 {:.2}", r.top1, r.top5, r.top10);
        let title = trainer.config().algorithm.to_string();
        for &f in &cfg.report_formats {
            write_report(r, &cfg.out.join(format!("report.{}", f.extension())), f, &title)?;
        }
    }
    println!("checkpoint {}", cfg.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.checkpoint.clone()).unwrap_or_else(|| cfg.out.join(FINAL_CHECKPOINT))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

pub fn eval(shared: &Shared, a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(shared)?;
    if let Some(d) = a.data {
        cfg.data_root = Some(d);
    }
    if let Some(o) = &shared.out {
        cfg.out = o.clone();
    }
    let formats = if a.format.is_empty() {
        cfg.report_formats.clone()
    } else {
        a.format.iter().map(|f| f.parse::<ReportFormat>()).collect::<ssgan_core::Result<Vec<_>>>()?
    };
    let path = checkpoint_path(&cfg, a.checkpoint);
    let ckpt = read_checkpoint(&path)?;
    let (exp, d) = discriminator_from_checkpoint(&ckpt)?;
    let (manifest, ds) = load_split(&cfg, a.manifest)?;
    if exp.training.algorithm == Algorithm::Vanilla {
        bail!(invalid("vanilla checkpoints have no class head to evaluate"));
    }
    if exp.num_classes != manifest.classes.len() {
        return Err(Error::ParamMismatch {
            name: "params/d.head.weight".into(),
            msg: format!(
                "checkpoint head has {} classes but the manifest lists {}",
                exp.num_classes,
                manifest.classes.len()
            ),
        }
        .into());
    }
    if exp.image_shape != manifest.image_shape {
        return Err(Error::ParamMismatch {
            name: "params/d.down1.weight".into(),
            msg: format!("checkpoint expects {:?} images, manifest has {:?}", exp.image_shape, manifest.image_shape),
        }
        .into());
    }
    let id = format!("{}@{}", exp.training.algorithm, ckpt.iteration);
    let report = evaluate(&d, &ds.test, &ds.class_names, cfg.training.eval_batch_size, &id)?;
    let title = a.title.unwrap_or_else(|| exp.training.algorithm.to_string());
    std::fs::create_dir_all(&cfg.out)?;
    for f in formats {
        let out = cfg.out.join(format!("report.{}", f.extension()));
        write_report(&report, &out, f, &title).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", report_table(&report, &title));
    Ok(())
}

pub fn generate(shared: &Shared, a: GenerateArgs) -> Result<()> {
    let cfg = load_config(shared)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => {
            let side = (a.count as f64).sqrt().ceil() as usize;
            (side.max(1), side.max(1))
        }
    };
    if a.count == 0 || a.count > grid.0 * grid.1 {
        bail!(invalid(format!("{} samples do not fit a {}x{} grid", a.count, grid.0, grid.1)));
    }
    let ckpt = read_checkpoint(&checkpoint_path(&cfg, a.checkpoint))?;
    let (_, g) = generator_from_checkpoint(&ckpt)?;
    let out = match &shared.out {
        Some(p) if p.is_dir() => p.join("samples.png"),
        Some(p) => p.clone(),
        None => cfg.out.join("samples.png"),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = RandomSource::new(cfg.training.seed).fork("generate");
    write_image_grid(&g, a.count, grid, &out, &mut rng).with_context(|| format!("writing {}", out.display()))?;
    println!("{}: {} samples on a {}x{} grid", out.display(), a.count, grid.0, grid.1);
    Ok(())
}

pub fn gradcheck(shared: &Shared, a: GradcheckArgs) -> Result<()> {
    if a.list {
        for name in CHECK_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    if a.trials == 0 {
        bail!(invalid("--trials must be at least 1"));
    }
    let mut opts = SuiteOptions {
        trials: a.trials,
        precision: match a.precision {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        },
        inject_fault: a.inject_fault,
        only: a.only,
        ..SuiteOptions::default()
    };
    if let Some(seed) = shared.seed {
        opts.seed = seed;
    }
    let results = run_suite(&opts)?;
    println!("{:<26} {:>6} {:>12} {:>10}  result", "check", "trials", "max rel err", "threshold");
    for r in &results {
        println!(
            "{:<26} {:>6} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.trials,
            r.max_error,
            r.threshold,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
