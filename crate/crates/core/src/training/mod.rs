//! Optimizer, minibatch sampling, the SSGAN / vanilla / supervised-only
//! steps, the outer loop with periodic evaluation, and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod sampler;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use indexmap::IndexMap;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, RunState, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use config::{Algorithm, BnBatches, ExperimentConfig, TrainingConfig};
pub use sampler::{compose_minibatch, MiniBatch, Sampler, SamplerState};

use crate::autodiff::{Tape, Var};
use crate::data::{stack_images, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::layers::{Bound, Mode, ParamStore};
use crate::losses::{
    generator_loss, supervised_loss, supervised_loss_on_rows, total_loss, unsupervised_loss, vanilla_d_objective,
    vanilla_g_objective, LossReport,
};
use crate::models::{build_discriminator, build_discriminator_with_head, build_generator, Discriminator, DiscriminatorPass, Generator, Head};
use crate::rng::{sample_gaussian, RandomSource};
use crate::tensor::Tensor;

const RNG_SAMPLING: &str = "sampling";
const RNG_LATENT: &str = "latent";
const RNG_NOISE: &str = "noise";

/// Models, optimizers and random streams of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub experiment: ExperimentConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    /// Completed iterations.
    pub iteration: u64,
    sampler: Sampler,
    latent_rng: RandomSource,
    noise_rng: RandomSource,
}

fn check_dataset(exp: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    if ds.num_classes() != exp.num_classes {
        return Err(Error::invalid(format!(
            "model expects {} classes but the dataset has {}",
            exp.num_classes,
            ds.num_classes()
        )));
    }
    if ds.image_shape != exp.image_shape {
        return Err(Error::invalid(format!(
            "model expects images {:?} but the dataset has {:?}",
            exp.image_shape, ds.image_shape
        )));
    }
    Ok(())
}

/// Builds the discriminator an experiment trains (sigmoid head for the
/// vanilla algorithm).
pub fn experiment_discriminator(exp: &ExperimentConfig) -> Result<Discriminator<f32>> {
    let seed = exp.training.seed;
    match exp.training.algorithm {
        Algorithm::Vanilla => build_discriminator_with_head(Head::Sigmoid, exp.image_shape, &exp.model, seed),
        _ => build_discriminator(exp.num_classes, exp.image_shape, &exp.model, seed),
    }
}

pub fn experiment_generator(exp: &ExperimentConfig) -> Result<Generator<f32>> {
    build_generator(exp.model.latent_dim, exp.image_shape, &exp.model, exp.training.seed)
}

fn adam_config(t: &TrainingConfig, lr: f64) -> AdamConfig {
    AdamConfig { lr, beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps }
}

fn scalar(tape: &Tape<f32>, v: crate::Var) -> Result<f64> {
    let x = tape.value(v).item()? as f64;
    if !x.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok(x)
}

impl Trainer {
    pub fn new(experiment: ExperimentConfig, ds: &Dataset) -> Result<Self> {
        experiment.validate()?;
        check_dataset(&experiment, ds)?;
        let t = &experiment.training;
        let generator = experiment_generator(&experiment)?;
        let discriminator = experiment_discriminator(&experiment)?;
        let pool: Vec<usize> = match t.algorithm {
            Algorithm::Supervised => (0..ds.train.len()).filter(|&i| ds.train[i].label.is_some()).collect(),
            _ => (0..ds.train.len()).collect(),
        };
        let root = RandomSource::new(t.seed);
        let sampler = Sampler::new(pool, root.fork(RNG_SAMPLING))?;
        Ok(Self {
            adam_g: Adam::new(adam_config(t, t.lr_g), &generator.params),
            adam_d: Adam::new(adam_config(t, t.lr_d), &discriminator.params),
            generator,
            discriminator,
            iteration: 0,
            sampler,
            latent_rng: root.fork(RNG_LATENT),
            noise_rng: root.fork(RNG_NOISE),
            experiment,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.experiment.training
    }

    /// `ceil(pool / m)`: the pool is the whole train split, or only its
    /// labeled part for supervised-only training.
    pub fn iterations_per_epoch(&self) -> u64 {
        self.sampler.pool_len().div_ceil(self.config().batch_size) as u64
    }

    fn latent(&mut self, m: usize) -> Result<Tensor<f32>> {
        sample_gaussian(&mut self.latent_rng, &[m, self.generator.latent_dim], 0.0, 1.0)
    }

    /// One iteration of the configured algorithm.
    pub fn step(&mut self, ds: &Dataset) -> Result<LossReport> {
        let report = match self.config().algorithm {
            Algorithm::Ssgan => self.ssgan_step(ds)?,
            Algorithm::Vanilla => {
                let (d_obj, g_obj) = self.vanilla_gan_step(ds)?;
                LossReport { theta: 0.0, delta: -d_obj, total: -d_obj, gen_loss: g_obj }
            }
            Algorithm::Supervised => {
                let theta = self.supervised_step(ds)?;
                LossReport { theta, delta: 0.0, total: theta, gen_loss: 0.0 }
            }
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Discriminator descent on `θ + δ` followed by a generator descent;
    /// each sub-step draws its own latent batch.
    pub fn ssgan_step(&mut self, ds: &Dataset) -> Result<LossReport> {
        let batch = compose_minibatch(ds, self.config().batch_size, &mut self.sampler)?;
        let real = batch.images(ds)?;
        let (theta, delta) = self.ssgan_discriminator_step(&batch, &real, &batch.labels(ds))?;
        let gen_loss = self.ssgan_generator_step(&real)?;
        Ok(LossReport { theta, delta, total: theta + delta, gen_loss })
    }

    /// `real` holds the labeled rows of `batch` first. Returns `(θ, δ)`.
    pub fn ssgan_discriminator_step(&mut self, batch: &MiniBatch, real: &Tensor<f32>, labels: &[usize]) -> Result<(f64, f64)> {
        let m = batch.len();
        let z = self.latent(m)?;
        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        // G's batch statistics from this pass are discarded; its running
        // averages only follow the generator's own step.
        let fake = self.generator.forward(&mut tape, &gp, zv, Mode::Train)?.images;
        let rv = tape.constant(real.clone());
        let dp = self.discriminator.params.bind(&mut tape, true);
        let pass = self.discriminate(&mut tape, &dp, rv, fake)?;
        let labeled_rows: Vec<usize> = (0..batch.labeled.len()).collect();
        let theta = supervised_loss_on_rows(&mut tape, pass.logits, &labeled_rows, labels, self.config().smoothing())?;
        let real_rows: Vec<usize> = (0..m).collect();
        let fake_rows: Vec<usize> = (m..2 * m).collect();
        let rl = tape.select_rows(pass.logits, &real_rows)?;
        let fl = tape.select_rows(pass.logits, &fake_rows)?;
        let delta = unsupervised_loss(&mut tape, rl, fl)?;
        let total = total_loss(&mut tape, theta, delta)?;
        let (theta_v, delta_v) = (scalar(&tape, theta)?, scalar(&tape, delta)?);
        let grads = dp.gradients(&mut tape.backward(total)?)?;
        self.adam_d.step(&mut self.discriminator.params, &grads)?;
        self.discriminator.update_running_stats(&pass.stats)?;
        Ok((theta_v, delta_v))
    }

    /// Train-mode discriminator pass over `[real; fake]` rows.
    fn discriminate(&mut self, tape: &mut Tape<f32>, dp: &Bound, real: Var, fake: Var) -> Result<DiscriminatorPass<f32>> {
        let d = &self.discriminator;
        match self.experiment.training.bn_batches {
            BnBatches::Joint => {
                let both = tape.concat_rows(&[real, fake])?;
                d.forward(tape, dp, both, Mode::Train, &mut self.noise_rng)
            }
            BnBatches::Separate => {
                let r = d.forward(tape, dp, real, Mode::Train, &mut self.noise_rng)?;
                let f = d.forward(tape, dp, fake, Mode::Train, &mut self.noise_rng)?;
                let logits = tape.concat_rows(&[r.logits, f.logits])?;
                let features = tape.concat_rows(&[r.features, f.features])?;
                Ok(DiscriminatorPass { logits, features, stats: r.stats })
            }
        }
    }

    /// Generator descent with the discriminator frozen. Returns the
    /// generator loss.
    pub fn ssgan_generator_step(&mut self, real: &Tensor<f32>) -> Result<f64> {
        let m = real.shape()[0];
        let z = self.latent(m)?;
        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, true);
        let zv = tape.constant(z);
        let gpass = self.generator.forward(&mut tape, &gp, zv, Mode::Train)?;
        let rv = tape.constant(real.clone());
        let dp = self.discriminator.params.bind(&mut tape, false);
        let pass = self.discriminate(&mut tape, &dp, rv, gpass.images)?;
        let real_rows: Vec<usize> = (0..m).collect();
        let fake_rows: Vec<usize> = (m..2 * m).collect();
        let rf = tape.select_rows(pass.features, &real_rows)?;
        let ff = tape.select_rows(pass.features, &fake_rows)?;
        let fl = tape.select_rows(pass.logits, &fake_rows)?;
        let loss = generator_loss(&mut tape, self.config().gen_loss, rf, ff, fl)?;
        let value = scalar(&tape, loss)?;
        let grads = gp.gradients(&mut tape.backward(loss)?)?;
        self.adam_g.step(&mut self.generator.params, &grads)?;
        self.generator.update_running_stats(&gpass.stats)?;
        Ok(value)
    }

    /// `k_steps` discriminator ascents on `mean log D(x) + mean log(1 − D(G(z)))`
    /// and one generator descent on `mean log(1 − D(G(z)))`. Returns the
    /// last discriminator objective and the generator objective.
    pub fn vanilla_gan_step(&mut self, ds: &Dataset) -> Result<(f64, f64)> {
        let mut d_obj = 0.0;
        let mut real = None;
        for _ in 0..self.config().k_steps {
            let batch = compose_minibatch(ds, self.config().batch_size, &mut self.sampler)?;
            let x = batch.images(ds)?;
            d_obj = self.vanilla_discriminator_step(&x)?;
            real = Some(x);
        }
        let g_obj = self.vanilla_generator_step(&real.expect("k_steps >= 1"))?;
        Ok((d_obj, g_obj))
    }

    fn require_sigmoid(&self) -> Result<()> {
        if self.discriminator.head != Head::Sigmoid {
            return Err(Error::invalid("vanilla GAN steps need a sigmoid-head discriminator"));
        }
        Ok(())
    }

    /// `B×1` sigmoid logits to `B` probabilities for the given rows.
    fn rows_prob(tape: &mut Tape<f32>, logits: crate::Var, rows: std::ops::Range<usize>) -> Result<crate::Var> {
        let n = rows.len();
        let rows: Vec<usize> = rows.collect();
        let l = tape.select_rows(logits, &rows)?;
        let l = tape.reshape(l, &[n])?;
        Ok(tape.sigmoid(l))
    }

    /// One ascent of the vanilla discriminator on a real batch against
    /// fresh fakes. Returns the objective before the update.
    pub fn vanilla_discriminator_step(&mut self, real: &Tensor<f32>) -> Result<f64> {
        self.require_sigmoid()?;
        let m = real.shape()[0];
        let z = self.latent(m)?;
        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let fake = self.generator.forward(&mut tape, &gp, zv, Mode::Train)?.images;
        let rv = tape.constant(real.clone());
        let both = tape.concat_rows(&[rv, fake])?;
        let dp = self.discriminator.params.bind(&mut tape, true);
        let pass = self.discriminator.forward(&mut tape, &dp, both, Mode::Train, &mut self.noise_rng)?;
        let pr = Self::rows_prob(&mut tape, pass.logits, 0..m)?;
        let pf = Self::rows_prob(&mut tape, pass.logits, m..2 * m)?;
        let obj = vanilla_d_objective(&mut tape, pr, pf)?;
        let value = scalar(&tape, obj)?;
        let neg = tape.neg(obj)?;
        let grads = dp.gradients(&mut tape.backward(neg)?)?;
        self.adam_d.step(&mut self.discriminator.params, &grads)?;
        self.discriminator.update_running_stats(&pass.stats)?;
        Ok(value)
    }

    /// One generator descent against the frozen vanilla discriminator.
    pub fn vanilla_generator_step(&mut self, real: &Tensor<f32>) -> Result<f64> {
        self.require_sigmoid()?;
        let m = real.shape()[0];
        let z = self.latent(m)?;
        let mut tape = Tape::new();
        let gp = self.generator.params.bind(&mut tape, true);
        let zv = tape.constant(z);
        let gpass = self.generator.forward(&mut tape, &gp, zv, Mode::Train)?;
        let rv = tape.constant(real.clone());
        let both = tape.concat_rows(&[rv, gpass.images])?;
        let dp = self.discriminator.params.bind(&mut tape, false);
        let pass = self.discriminator.forward(&mut tape, &dp, both, Mode::Train, &mut self.noise_rng)?;
        let pf = Self::rows_prob(&mut tape, pass.logits, m..2 * m)?;
        let obj = vanilla_g_objective(&mut tape, pf)?;
        let value = scalar(&tape, obj)?;
        let grads = gp.gradients(&mut tape.backward(obj)?)?;
        self.adam_g.step(&mut self.generator.params, &grads)?;
        self.generator.update_running_stats(&gpass.stats)?;
        Ok(value)
    }

    /// The discriminator alone, descending `θ` on a labeled batch.
    pub fn supervised_step(&mut self, ds: &Dataset) -> Result<f64> {
        let m = self.config().batch_size;
        let idx = self.sampler.draw(m);
        let real = stack_images(idx.iter().map(|&i| &ds.train[i]), ds.image_shape)?;
        let labels = idx
            .iter()
            .map(|&i| ds.train[i].label.ok_or_else(|| Error::invalid("supervised pool holds an unlabeled sample")))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let dp = self.discriminator.params.bind(&mut tape, true);
        let xv = tape.constant(real);
        let pass = self.discriminator.forward(&mut tape, &dp, xv, Mode::Train, &mut self.noise_rng)?;
        let theta = supervised_loss(&mut tape, pass.logits, &labels, self.config().smoothing())?;
        let value = scalar(&tape, theta)?;
        let grads = dp.gradients(&mut tape.backward(theta)?)?;
        self.adam_d.step(&mut self.discriminator.params, &grads)?;
        self.discriminator.update_running_stats(&pass.stats)?;
        Ok(value)
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalReport> {
        let id = format!("{}@{}", self.config().algorithm, self.iteration);
        evaluate(&self.discriminator, &ds.test, &ds.class_names, self.config().eval_batch_size, &id)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = IndexMap::new();
        let mut put = |prefix: &str, store: &ParamStore<f32>| {
            for (name, t) in store.iter() {
                tensors.insert(format!("{prefix}/{name}"), t.clone());
            }
        };
        put("params", &self.generator.params);
        put("buffers", &self.generator.buffers);
        put("adam_m", &self.adam_g.m);
        put("adam_v", &self.adam_g.v);
        put("params", &self.discriminator.params);
        put("buffers", &self.discriminator.buffers);
        put("adam_m", &self.adam_d.m);
        put("adam_v", &self.adam_d.v);
        let s = self.sampler.state();
        Ok(Checkpoint {
            tensors,
            iteration: self.iteration,
            state: RunState {
                adam_g_t: self.adam_g.t,
                adam_d_t: self.adam_d.t,
                rngs: vec![
                    (RNG_SAMPLING.into(), s.rng),
                    (RNG_LATENT.into(), self.latent_rng.clone()),
                    (RNG_NOISE.into(), self.noise_rng.clone()),
                ],
                sampler_order: s.order,
                sampler_cursor: s.cursor,
                config: self.experiment.to_toml()?,
            },
        })
    }

    /// Rebuilds the exact trainer state a checkpoint was taken from.
    pub fn from_checkpoint(ckpt: &Checkpoint, ds: &Dataset) -> Result<Self> {
        let exp = ExperimentConfig::from_toml(&ckpt.state.config)?;
        let mut tr = Self::new(exp, ds)?;
        let mut expected = 0;
        for (prefix, store) in [
            ("params", &mut tr.generator.params),
            ("buffers", &mut tr.generator.buffers),
            ("adam_m", &mut tr.adam_g.m),
            ("adam_v", &mut tr.adam_g.v),
            ("params", &mut tr.discriminator.params),
            ("buffers", &mut tr.discriminator.buffers),
            ("adam_m", &mut tr.adam_d.m),
            ("adam_v", &mut tr.adam_d.v),
        ] {
            restore_store(ckpt, prefix, store)?;
            expected += store.len();
        }
        if expected != ckpt.tensors.len() {
            let extra = ckpt
                .tensors
                .keys()
                .find(|k| !tr.knows_tensor(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::ParamMismatch { name: extra, msg: "checkpoint tensor unknown to the model".into() });
        }
        tr.adam_g.t = ckpt.state.adam_g_t;
        tr.adam_d.t = ckpt.state.adam_d_t;
        tr.latent_rng = ckpt.state.rng(RNG_LATENT)?;
        tr.noise_rng = ckpt.state.rng(RNG_NOISE)?;
        tr.sampler.restore(SamplerState {
            order: ckpt.state.sampler_order.clone(),
            cursor: ckpt.state.sampler_cursor,
            rng: ckpt.state.rng(RNG_SAMPLING)?,
        })?;
        tr.iteration = ckpt.iteration;
        Ok(tr)
    }

    fn knows_tensor(&self, key: &str) -> bool {
        let Some((prefix, name)) = key.split_once('/') else { return false };
        let stores: [&ParamStore<f32>; 4] = match (prefix, name.starts_with("g.")) {
            (_, true) => [&self.generator.params, &self.generator.buffers, &self.adam_g.m, &self.adam_g.v],
            (_, false) => [&self.discriminator.params, &self.discriminator.buffers, &self.adam_d.m, &self.adam_d.v],
        };
        let i = match prefix {
            "params" => 0,
            "buffers" => 1,
            "adam_m" => 2,
            "adam_v" => 3,
            _ => return false,
        };
        stores[i].get(name).is_ok()
    }
}

fn restore_store(ckpt: &Checkpoint, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let key = format!("{prefix}/{name}");
        let t = ckpt.tensor(&key)?;
        store.set(&name, t.clone()).map_err(|e| match e {
            Error::ParamMismatch { msg, .. } => Error::ParamMismatch { name: key.clone(), msg },
            other => other,
        })?;
    }
    Ok(())
}

/// Experiment config and discriminator (with running statistics) stored in
/// a checkpoint.
pub fn discriminator_from_checkpoint(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Discriminator<f32>)> {
    let exp = ExperimentConfig::from_toml(&ckpt.state.config)?;
    let mut d = experiment_discriminator(&exp)?;
    restore_store(ckpt, "params", &mut d.params)?;
    restore_store(ckpt, "buffers", &mut d.buffers)?;
    Ok((exp, d))
}

pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Generator<f32>)> {
    let exp = ExperimentConfig::from_toml(&ckpt.state.config)?;
    let mut g = experiment_generator(&exp)?;
    restore_store(ckpt, "params", &mut g.params)?;
    restore_store(ckpt, "buffers", &mut g.buffers)?;
    Ok((exp, g))
}

pub const METRICS_HEADER: &str = "iter,epoch,theta,delta,total,gen_loss,top1,top5,top10";

/// One line of the metrics stream; `eval` holds Top-1/5/10 (percent) on
/// evaluation iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub epoch: u64,
    pub losses: LossReport,
    pub eval: Option<[f64; 3]>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        let eval = match self.eval {
            Some([a, b, c]) => format!("{a:.2},{b:.2},{c:.2}"),
            None => ",,".into(),
        };
        format!("{},{},{},{},{},{},{eval}", self.iter, self.epoch, l.theta, l.delta, l.total, l.gen_loss)
    }
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;

    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Metrics CSV with [`METRICS_HEADER`].
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::Sink(e.to_string()))?;
        Ok(Self { out })
    }

    /// Continues an existing stream (e.g. after resuming) without
    /// repeating the header.
    pub fn continuing(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.csv_line()).map_err(|e| Error::Sink(e.to_string()))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::Sink(e.to_string()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where periodic (`checkpoint_interval`) and final checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop early once this much wall time has elapsed.
    pub time_budget: Option<Duration>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    /// Test-split reports, one per evaluation.
    pub reports: Vec<EvalReport>,
    pub elapsed: Duration,
    pub budget_exhausted: bool,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt-{iteration:08}.ssgn"))
}

pub const FINAL_CHECKPOINT: &str = "final.ssgn";

/// Runs the trainer up to `iterations` (or the time budget), evaluating
/// every `eval_interval` epochs and streaming one row per iteration to the
/// sinks. A failing sink aborts the run after the final checkpoint has been
/// written.
pub fn train(trainer: &mut Trainer, ds: &Dataset, opts: &TrainOptions, sinks: &mut [&mut dyn MetricsSink]) -> Result<TrainOutcome> {
    let start = Instant::now();
    let cfg = trainer.config().clone();
    let per_epoch = trainer.iterations_per_epoch().max(1);
    let can_eval = cfg.algorithm != Algorithm::Vanilla && !ds.test.is_empty();
    let mut history = Vec::new();
    let mut reports = Vec::new();
    let mut budget_exhausted = false;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let save_final = |tr: &Trainer| -> Result<Checkpoint> {
        let ckpt = tr.checkpoint()?;
        if let Some(dir) = &opts.checkpoint_dir {
            ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(ckpt)
    };
    while trainer.iteration < cfg.iterations {
        if opts.time_budget.is_some_and(|b| start.elapsed() >= b) {
            budget_exhausted = true;
            break;
        }
        let losses = trainer.step(ds)?;
        let iter = trainer.iteration;
        let epoch = iter / per_epoch;
        let eval = if can_eval && iter % per_epoch == 0 && epoch % cfg.eval_interval == 0 {
            let r = trainer.evaluate(ds)?;
            let top = [r.top1, r.top5, r.top10];
            log::info!("iter {iter} epoch {epoch}: top1 {:.2}", r.top1);
            reports.push(r);
            Some(top)
        } else {
            None
        };
        let row = MetricsRow { iter, epoch, losses, eval };
        for sink in sinks.iter_mut() {
            if let Err(e) = sink.record(&row) {
                save_final(trainer)?;
                return Err(match e {
                    Error::Sink(m) => Error::Sink(m),
                    other => Error::Sink(other.to_string()),
                });
            }
        }
        history.push(row);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0 {
                trainer.checkpoint()?.save(&checkpoint_path(dir, iter))?;
            }
        }
    }
    for sink in sinks.iter_mut() {
        if let Err(e) = sink.flush() {
            save_final(trainer)?;
            return Err(e);
        }
    }
    let checkpoint = save_final(trainer)?;
    Ok(TrainOutcome { history, checkpoint, reports, elapsed: start.elapsed(), budget_exhausted })
}
