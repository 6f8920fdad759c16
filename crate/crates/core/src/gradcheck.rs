//! Central finite-difference verification of every differentiable path.
//!
//! [`grad_check`] compares the tape's analytic gradient against
//! `(f(x+h) − f(x−h)) / 2h` element by element. [`run_suite`] runs it over
//! every op, layer, loss and a tiny generator/discriminator composite on
//! randomly drawn shapes and values.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{apply_noise, BatchNorm, Bound, Dense, Mode, ParamStore};
use crate::losses::{
    feature_matching_loss, generator_loss, supervised_loss, supervised_loss_on_rows, total_loss,
    unsupervised_loss, vanilla_d_objective, vanilla_g_objective, GenLossMode,
};
use crate::models::{build_discriminator, build_generator, ModelConfig};
use crate::rng::{sample_gaussian, RandomSource};
use crate::tensor::{conv2d_output_size, conv2d_transpose_output_size, ReduceOp, Real, Tensor};

/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central differences with step `h`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_impl(&f, x, h, REL_FLOOR, false)
}

fn eval_at<T, F>(f: &F, x: Tensor<T>) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    let y = tape.value(out).item()?.as_f64();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

fn analytic_grad<T, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(tape.backward(out)?.take(xv))
}

fn numeric_grad<T, F>(f: &F, x: &Tensor<T>, h: f64) -> Result<Vec<f64>>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] = plus.data()[i] + T::lit(h);
            let mut minus = x.clone();
            minus.data_mut()[i] = minus.data()[i] - T::lit(h);
            Ok((eval_at(f, plus)? - eval_at(f, minus)?) / (2.0 * h))
        })
        .collect()
}

fn grad_check_impl<T, F>(f: &F, x: &Tensor<T>, h: f64, floor: f64, flip: bool) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let numeric = numeric_grad(f, x, h)?;
    let analytic = analytic_grad(f, x)?;
    let sign = if flip { -1.0 } else { 1.0 };
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, &n)| relative_error_floored(sign * a.as_f64(), n, floor))
        .fold(0.0, f64::max))
}

/// Arithmetic of the analytic gradients under test. The finite-difference
/// oracle always evaluates the same graph in f64: f32 central differences
/// are too coarse to separate roundoff from real errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub trials: usize,
    pub precision: Precision,
    pub seed: u64,
    /// Negates the analytic gradient of the named check. Negative control
    /// for the suite itself.
    pub inject_fault: Option<String>,
    /// Run only these checks (all when empty).
    pub only: Vec<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            precision: Precision::Double,
            seed: 0x5eed,
            inject_fault: None,
            only: Vec::new(),
        }
    }
}

impl SuiteOptions {
    /// `(step, pass threshold, relative-error floor)`. An f32 gradient
    /// agrees with the f64 oracle only to roughly single-precision
    /// accumulation error, hence the looser threshold and floor.
    pub fn tolerances(&self) -> (f64, f64, f64) {
        match self.precision {
            Precision::Double => (1e-5, 1e-4, REL_FLOOR),
            Precision::Single => (1e-5, 1e-3, 1e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

pub const CHECK_NAMES: &[&str] = &[
    "elementwise",
    "matmul",
    "reduce",
    "dense",
    "conv2d",
    "conv2d_transpose",
    "batchnorm_train",
    "batchnorm_eval",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "noise_frozen",
    "supervised_loss",
    "unsupervised_loss",
    "total_loss",
    "feature_matching",
    "vanilla_d_objective",
    "vanilla_g_objective",
    "generator_nonsaturating",
    "composite_classifier",
    "generator",
    "gan_composite",
];

/// What [`Ctx::check`] does with each differentiated input.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    /// Compare against central differences immediately.
    Check,
    /// Only record the analytic gradient.
    Analytic,
    /// Only record central differences.
    Numeric,
}

struct Ctx<T: Real> {
    rng: RandomSource,
    h: f64,
    floor: f64,
    flip: bool,
    role: Role,
    record: Vec<f64>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Ctx<T> {
    fn gauss(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        sample_gaussian(&mut self.rng, shape, 0.0, std).expect("std > 0")
    }

    fn between(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }

    /// Values bounded away from zero, for kinked functions.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<T> {
        let mut t = self.gauss(shape, 1.0);
        for v in t.data_mut() {
            if v.abs() < T::lit(0.05) {
                *v = *v + T::lit(if *v >= T::zero() { 0.1 } else { -0.1 });
            }
        }
        t
    }

    fn rescale_weights(&mut self, params: &mut ParamStore<T>) {
        for (name, t) in params.iter_mut() {
            if name.ends_with(".weight") {
                *t = sample_gaussian(&mut self.rng, t.shape(), 0.0, 0.3).expect("std > 0");
            }
        }
    }

    fn check<F>(&mut self, f: F, x: &Tensor<T>) -> Result<f64>
    where
        F: Fn(&mut Tape<T>, Var) -> Result<Var>,
    {
        match self.role {
            Role::Check => grad_check_impl(&f, x, self.h, self.floor, self.flip),
            Role::Analytic => {
                let sign = if self.flip { -1.0 } else { 1.0 };
                let g = analytic_grad(&f, x)?;
                self.record.extend(g.data().iter().map(|v| sign * v.as_f64()));
                Ok(0.0)
            }
            Role::Numeric => {
                self.record.extend(numeric_grad(&f, x, self.h)?);
                Ok(0.0)
            }
        }
    }
}

/// `sum(y ⊙ w)` with a fixed random weighting, so no gradient entry is
/// structurally zero.
fn weighted_sum<T: Real>(tape: &mut Tape<T>, y: Var, w: &Tensor<T>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        channel_widths: vec![2],
        ..ModelConfig::default()
    }
}

/// Binds `params` as constants except `name`, which becomes `x`.
fn bind_with<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>, name: &str, x: Var) -> Bound {
    let mut b = params.bind(tape, false);
    b.replace(name, x);
    b
}

fn one_trial<T: Real>(name: &str, c: &mut Ctx<T>) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut acc = |e: f64| worst = worst.max(e);
    match name {
        "elementwise" => {
            let n = c.between(1, 12);
            let x = c.gauss(&[n], 1.0);
            let w = c.gauss(&[n], 1.0);
            acc(c.check(
                |t, x| {
                    let a = t.tanh(x)?;
                    let s = t.mul_scalar(x, T::lit(0.3))?;
                    let b = t.exp(s)?;
                    let ab = t.mul(a, b)?;
                    let sq = t.mul(x, x)?;
                    let d = t.add_scalar(sq, T::one())?;
                    let e = t.log(d)?;
                    let q = t.div(e, b)?;
                    let nq = t.neg(q)?;
                    let g = t.sub(nq, ab)?;
                    weighted_sum(t, g, &w)
                },
                &x,
            )?);
        }
        "matmul" => {
            let (m, k, n) = (c.between(1, 6), c.between(1, 6), c.between(1, 6));
            let a = c.gauss(&[m, k], 1.0);
            let b = c.gauss(&[k, n], 1.0);
            let w = c.gauss(&[m, n], 1.0);
            acc(c.check(|t, x| { let bv = t.constant(b.clone()); let y = t.matmul(x, bv)?; weighted_sum(t, y, &w) }, &a)?);
            acc(c.check(|t, x| { let av = t.constant(a.clone()); let y = t.matmul(av, x)?; weighted_sum(t, y, &w) }, &b)?);
        }
        "reduce" => {
            let shape = [c.between(1, 4), c.between(1, 4), c.between(1, 4)];
            // Max needs a unique winner with a margin wider than the step.
            let n: usize = shape.iter().product();
            let mut ranks: Vec<usize> = (0..n).collect();
            c.rng.shuffle(&mut ranks);
            let x = Tensor::new(shape, ranks.iter().map(|&r| T::lit(r as f64 * 0.1 - 0.05 * n as f64)).collect())?;
            let axes: Vec<usize> = (0..3).filter(|_| c.rng.uniform() < 0.5).collect();
            let out_shape: Vec<usize> = (0..3).filter(|a| !axes.contains(a)).map(|a| shape[a]).collect();
            let w = c.gauss(&out_shape, 1.0);
            for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
                acc(c.check(|t, x| { let y = t.reduce(op, x, &axes)?; weighted_sum(t, y, &w) }, &x)?);
            }
        }
        "dense" => {
            let (b, din, dout) = (c.between(1, 5), c.between(1, 6), c.between(1, 6));
            let mut params = ParamStore::new();
            let layer = Dense::register(&mut params, "fc", din, dout, true, &mut c.rng)?;
            params.set("fc.bias", c.gauss(&[dout], 1.0))?;
            let x = c.gauss(&[b, din], 1.0);
            let w = c.gauss(&[b, dout], 1.0);
            acc(c.check(|t, x| { let p = params.bind(t, false); let y = layer.forward(t, &p, x)?; weighted_sum(t, y, &w) }, &x)?);
            for name in ["fc.weight", "fc.bias"] {
                let xv = c.gauss(params.get(name)?.shape(), 1.0);
                acc(c.check(
                    |t, v| {
                        let p = bind_with(t, &params, name, v);
                        let xin = t.constant(x.clone());
                        let y = layer.forward(t, &p, xin)?;
                        weighted_sum(t, y, &w)
                    },
                    &xv,
                )?);
            }
        }
        "conv2d" => {
            let (k, stride, pad) = (c.between(1, 4), c.between(1, 3), c.between(0, 2));
            let (n, ch, f) = (c.between(1, 3), c.between(1, 3), c.between(1, 3));
            let side = c.between(k.saturating_sub(2 * pad).max(1), 7);
            let (Some(oh), Some(ow)) = (conv2d_output_size(side, k, stride, pad), conv2d_output_size(side + 1, k, stride, pad)) else {
                return Ok(0.0);
            };
            let x = c.gauss(&[n, ch, side, side + 1], 1.0);
            let kern = c.gauss(&[f, ch, k, k], 1.0);
            let w = c.gauss(&[n, f, oh, ow], 1.0);
            acc(c.check(|t, x| { let kv = t.constant(kern.clone()); let y = t.conv2d(x, kv, stride, pad)?; weighted_sum(t, y, &w) }, &x)?);
            acc(c.check(|t, kv| { let xv = t.constant(x.clone()); let y = t.conv2d(xv, kv, stride, pad)?; weighted_sum(t, y, &w) }, &kern)?);
        }
        "conv2d_transpose" => {
            let (k, stride) = (c.between(1, 4), c.between(1, 3));
            let pad = c.between(0, (k.saturating_sub(1)) / 2);
            let (n, f, ch) = (c.between(1, 3), c.between(1, 3), c.between(1, 3));
            let (h, wd) = (c.between(1, 4), c.between(1, 4));
            let (Some(oh), Some(ow)) = (
                conv2d_transpose_output_size(h, k, stride, pad),
                conv2d_transpose_output_size(wd, k, stride, pad),
            ) else {
                return Ok(0.0);
            };
            let x = c.gauss(&[n, f, h, wd], 1.0);
            let kern = c.gauss(&[f, ch, k, k], 1.0);
            let w = c.gauss(&[n, ch, oh, ow], 1.0);
            acc(c.check(|t, x| { let kv = t.constant(kern.clone()); let y = t.conv2d_transpose(x, kv, stride, pad)?; weighted_sum(t, y, &w) }, &x)?);
            acc(c.check(|t, kv| { let xv = t.constant(x.clone()); let y = t.conv2d_transpose(xv, kv, stride, pad)?; weighted_sum(t, y, &w) }, &kern)?);
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let mode = if name == "batchnorm_train" { Mode::Train } else { Mode::Eval };
            // Two values per channel leave only O(eps) gradients, far below
            // what central differences resolve; use at least three.
            let (b, ch) = (c.between(2, 5), c.between(1, 3));
            let sp = if b == 2 { c.between(2, 3) } else { c.between(1, 3) };
            let mut params = ParamStore::new();
            let mut buffers = ParamStore::new();
            let bn = BatchNorm::register(&mut params, &mut buffers, "bn", ch, 1e-5, 0.1)?;
            params.set("bn.gamma", c.gauss(&[ch], 1.0))?;
            params.set("bn.beta", c.gauss(&[ch], 1.0))?;
            buffers.set("bn.running_mean", c.gauss(&[ch], 1.0))?;
            buffers.set("bn.running_var", c.gauss(&[ch], 1.0).map(|v| v.abs() + T::lit(0.5)))?;
            let x = c.gauss(&[b, ch, sp, sp], 2.0);
            let w = c.gauss(&[b, ch, sp, sp], 1.0);
            acc(c.check(|t, x| { let p = params.bind(t, false); let (y, _) = bn.forward(t, &p, &buffers, x, mode)?; weighted_sum(t, y, &w) }, &x)?);
            for pname in ["bn.gamma", "bn.beta"] {
                let v0 = params.get(pname)?.clone();
                acc(c.check(
                    |t, v| {
                        let p = bind_with(t, &params, pname, v);
                        let xin = t.constant(x.clone());
                        let (y, _) = bn.forward(t, &p, &buffers, xin, mode)?;
                        weighted_sum(t, y, &w)
                    },
                    &v0,
                )?);
            }
        }
        "leaky_relu" => {
            let n = c.between(1, 16);
            let x = c.away_from_zero(&[n]);
            let w = c.gauss(&[n], 1.0);
            let slope = 0.2;
            acc(c.check(|t, x| { let y = t.leaky_relu(x, T::lit(slope)); weighted_sum(t, y, &w) }, &x)?);
        }
        "sigmoid" => {
            let n = c.between(1, 16);
            let x = c.gauss(&[n], 3.0);
            let w = c.gauss(&[n], 1.0);
            acc(c.check(|t, x| { let y = t.sigmoid(x); weighted_sum(t, y, &w) }, &x)?);
        }
        "softmax" => {
            let (b, k) = (c.between(1, 4), c.between(2, 6));
            let x = c.gauss(&[b, k], 2.0);
            let w = c.gauss(&[b, k], 1.0);
            acc(c.check(|t, x| { let y = t.softmax(x)?; weighted_sum(t, y, &w) }, &x)?);
            acc(c.check(|t, x| { let y = t.log_softmax(x)?; weighted_sum(t, y, &w) }, &x)?);
        }
        "noise_frozen" => {
            let n = c.between(1, 16);
            let x = c.gauss(&[n], 1.0);
            let noise = c.gauss(&[n], 0.5);
            let w = c.gauss(&[n], 1.0);
            acc(c.check(
                |t, x| {
                    let y = apply_noise(t, x, noise.clone())?;
                    let y = t.tanh(y)?;
                    weighted_sum(t, y, &w)
                },
                &x,
            )?);
        }
        "supervised_loss" => {
            let (b, k) = (c.between(1, 5), c.between(2, 6));
            let logits = c.gauss(&[b, k + 1], 1.0);
            let labels: Vec<usize> = (0..b).map(|_| c.rng.below(k)).collect();
            acc(c.check(|t, x| supervised_loss(t, x, &labels, None), &logits)?);
            acc(c.check(|t, x| supervised_loss(t, x, &labels, Some(0.9)), &logits)?);
        }
        "unsupervised_loss" => {
            let (br, bf, k) = (c.between(1, 5), c.between(1, 5), c.between(2, 6));
            let real = c.gauss(&[br, k + 1], 1.0);
            let fake = c.gauss(&[bf, k + 1], 1.0);
            acc(c.check(|t, x| { let f = t.constant(fake.clone()); unsupervised_loss(t, x, f) }, &real)?);
            acc(c.check(|t, x| { let r = t.constant(real.clone()); unsupervised_loss(t, r, x) }, &fake)?);
        }
        "total_loss" => {
            let (m, k) = (c.between(2, 5), c.between(2, 5));
            let both = c.gauss(&[2 * m, k + 1], 1.0);
            let rows: Vec<usize> = (0..m).filter(|_| c.rng.uniform() < 0.6).collect();
            let labels: Vec<usize> = rows.iter().map(|_| c.rng.below(k)).collect();
            let real_rows: Vec<usize> = (0..m).collect();
            let fake_rows: Vec<usize> = (m..2 * m).collect();
            acc(c.check(
                |t, x| {
                    let th = supervised_loss_on_rows(t, x, &rows, &labels, Some(0.9))?;
                    let r = t.select_rows(x, &real_rows)?;
                    let f = t.select_rows(x, &fake_rows)?;
                    let d = unsupervised_loss(t, r, f)?;
                    total_loss(t, th, d)
                },
                &both,
            )?);
        }
        "feature_matching" => {
            let (br, bf, f) = (c.between(1, 5), c.between(1, 5), c.between(1, 8));
            let real = c.gauss(&[br, f], 1.0);
            let fake = c.gauss(&[bf, f], 1.0);
            acc(c.check(|t, x| { let r = t.constant(real.clone()); feature_matching_loss(t, r, x) }, &fake)?);
            acc(c.check(|t, x| { let fv = t.constant(fake.clone()); feature_matching_loss(t, x, fv) }, &real)?);
        }
        "vanilla_d_objective" => {
            let b = c.between(1, 6);
            let lr = c.gauss(&[b], 1.5);
            let lf = c.gauss(&[b], 1.5);
            acc(c.check(|t, x| { let dr = t.sigmoid(x); let f = t.constant(lf.clone()); let df = t.sigmoid(f); vanilla_d_objective(t, dr, df) }, &lr)?);
            acc(c.check(|t, x| { let r = t.constant(lr.clone()); let dr = t.sigmoid(r); let df = t.sigmoid(x); vanilla_d_objective(t, dr, df) }, &lf)?);
        }
        "vanilla_g_objective" => {
            let b = c.between(1, 6);
            let lf = c.gauss(&[b], 1.5);
            acc(c.check(|t, x| { let df = t.sigmoid(x); vanilla_g_objective(t, df) }, &lf)?);
        }
        "generator_nonsaturating" => {
            let (b, k) = (c.between(1, 5), c.between(2, 5));
            let logits = c.gauss(&[b, k + 1], 1.0);
            acc(c.check(|t, x| { let f = t.constant(Tensor::zeros([b, 1])); generator_loss(t, GenLossMode::Nonsaturating, f, f, x) }, &logits)?);
        }
        "composite_classifier" => {
            // conv -> batchnorm -> leaky relu -> dense -> softmax cross-entropy
            let (b, ch, f, k) = (c.between(2, 4), c.between(1, 2), c.between(1, 3), c.between(2, 4));
            let side = 4;
            let x = c.gauss(&[b, ch, side, side], 1.0);
            let kern = c.gauss(&[f, ch, 3, 3], 0.5);
            let mut params = ParamStore::new();
            let mut buffers = ParamStore::new();
            let bn = BatchNorm::register(&mut params, &mut buffers, "bn", f, 1e-5, 0.1)?;
            let dense = Dense::register(&mut params, "fc", f * side * side, k + 1, true, &mut c.rng)?;
            params.set("fc.weight", c.gauss(&[f * side * side, k + 1], 0.5))?;
            params.insert("conv", kern)?;
            let labels: Vec<usize> = (0..b).map(|_| c.rng.below(k)).collect();
            let forward = |t: &mut Tape<T>, p: &Bound, xin: Var| -> Result<Var> {
                let y = t.conv2d(xin, p.get("conv")?, 1, 1)?;
                let (y, _) = bn.forward(t, p, &buffers, y, Mode::Train)?;
                let y = t.leaky_relu(y, T::lit(0.2));
                let y = t.flatten(y)?;
                let logits = dense.forward(t, p, y)?;
                supervised_loss(t, logits, &labels, None)
            };
            acc(c.check(|t, xv| { let p = params.bind(t, false); forward(t, &p, xv) }, &x)?);
            for pname in ["conv", "bn.gamma", "fc.weight", "fc.bias"] {
                let v0 = params.get(pname)?.clone();
                acc(c.check(|t, v| { let p = bind_with(t, &params, pname, v); let xin = t.constant(x.clone()); forward(t, &p, xin) }, &v0)?);
            }
        }
        "generator" => {
            let cfg = tiny_model_config();
            let seed = c.rng.next_u64();
            let mut g = build_generator::<T>(cfg.latent_dim, [1, 8, 8], &cfg, seed)?;
            c.rescale_weights(&mut g.params);
            let b = c.between(2, 3);
            let z = c.gauss(&[b, cfg.latent_dim], 1.0);
            let names: Vec<String> = g.params.names().map(String::from).collect();
            for pname in &names {
                let v0 = g.params.get(pname)?.clone();
                acc(c.check(
                    |t, v| {
                        let p = bind_with(t, &g.params, pname, v);
                        let zv = t.constant(z.clone());
                        let out = g.forward(t, &p, zv, Mode::Train)?;
                        t.mean(out.images)
                    },
                    &v0,
                )?);
            }
        }
        "gan_composite" => {
            let cfg = tiny_model_config();
            let seed = c.rng.next_u64();
            let mut g = build_generator::<T>(cfg.latent_dim, [1, 8, 8], &cfg, seed)?;
            let mut d = build_discriminator::<T>(2, [1, 8, 8], &cfg, seed ^ 1)?;
            // The 0.02 init makes batch-normalized activations so sensitive
            // to weights that ±h steps routinely cross leaky-ReLU kinks.
            c.rescale_weights(&mut g.params);
            c.rescale_weights(&mut d.params);
            let m = 2;
            let z = c.gauss(&[m, cfg.latent_dim], 1.0);
            let real = c.gauss(&[m, 1, 8, 8], 0.5);
            let noise_seed = c.rng.next_u64();
            let labels = vec![0usize, 1];
            // Loss touching every path: θ + δ for D, feature matching for G.
            let run = |t: &mut Tape<T>, gp: &Bound, dp: &Bound| -> Result<Var> {
                let mut noise = RandomSource::new(noise_seed);
                let zv = t.constant(z.clone());
                let fake = g.forward(t, gp, zv, Mode::Train)?.images;
                let rv = t.constant(real.clone());
                let both = t.concat_rows(&[rv, fake])?;
                let pass = d.forward(t, dp, both, Mode::Train, &mut noise)?;
                let r = t.select_rows(pass.logits, &[0, 1])?;
                let f = t.select_rows(pass.logits, &[2, 3])?;
                let th = supervised_loss(t, r, &labels, None)?;
                let de = unsupervised_loss(t, r, f)?;
                let l = total_loss(t, th, de)?;
                let fr = t.select_rows(pass.features, &[0, 1])?;
                let ff = t.select_rows(pass.features, &[2, 3])?;
                let fm = feature_matching_loss(t, fr, ff)?;
                t.add(l, fm)
            };
            for pname in g.params.names() {
                let v0 = g.params.get(pname)?.clone();
                acc(c.check(|t, v| { let gp = bind_with(t, &g.params, pname, v); let dp = d.params.bind(t, false); run(t, &gp, &dp) }, &v0)?);
            }
            for pname in d.params.names() {
                let v0 = d.params.get(pname)?.clone();
                acc(c.check(|t, v| { let gp = g.params.bind(t, false); let dp = bind_with(t, &d.params, pname, v); run(t, &gp, &dp) }, &v0)?);
            }
        }
        other => return Err(Error::invalid(format!("unknown gradient check `{other}`"))),
    }
    Ok(worst)
}

fn context<T: Real>(opts: &SuiteOptions, name: &str, role: Role) -> Ctx<T> {
    let (h, _, floor) = opts.tolerances();
    Ctx {
        rng: RandomSource::new(opts.seed).fork(name),
        h,
        floor,
        flip: opts.inject_fault.as_deref() == Some(name),
        role,
        record: Vec::new(),
        _t: std::marker::PhantomData,
    }
}

/// Worst error of `name` over `opts.trials` trials.
fn run_check(opts: &SuiteOptions, name: &str) -> Result<f64> {
    let mut worst = 0.0f64;
    match opts.precision {
        Precision::Double => {
            let mut ctx = context::<f64>(opts, name, Role::Check);
            for _ in 0..opts.trials {
                worst = worst.max(one_trial(name, &mut ctx)?);
            }
        }
        Precision::Single => {
            // Both contexts replay the same random stream, so trial i builds
            // the same graph in each precision.
            let mut single = context::<f32>(opts, name, Role::Analytic);
            let mut double = context::<f64>(opts, name, Role::Numeric);
            for _ in 0..opts.trials {
                one_trial(name, &mut single)?;
                one_trial(name, &mut double)?;
                if single.record.len() != double.record.len() {
                    return Err(Error::invalid(format!("check `{name}` diverged between precisions")));
                }
                for (&a, &n) in single.record.iter().zip(&double.record) {
                    worst = worst.max(relative_error_floored(a, n, single.floor));
                }
                single.record.clear();
                double.record.clear();
            }
        }
    }
    Ok(worst)
}

/// Runs every check (or `opts.only`) for `opts.trials` random trials each.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let (_, threshold, _) = opts.tolerances();
    for name in opts.only.iter().chain(&opts.inject_fault) {
        if !CHECK_NAMES.contains(&name.as_str()) {
            return Err(Error::invalid(format!("unknown gradient check `{name}`")));
        }
    }
    CHECK_NAMES
        .iter()
        .filter(|&&name| opts.only.is_empty() || opts.only.iter().any(|o| o == name))
        .map(|&name| {
            let max_error = run_check(opts, name)?;
            Ok(CheckResult { name, trials: opts.trials, max_error, threshold })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new([1], vec![3.0f64]).unwrap();
        let err = grad_check(|t, x| { let y = t.mul(x, x)?; t.sum(y) }, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        let x = Tensor::new([3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let w = Tensor::new([3], vec![1.5f64, 0.25, -2.0]).unwrap();
        for h in [1e-3, 1e-1, 1.0] {
            let err = grad_check(|t, x| weighted_sum(t, x, &w), &x, h).unwrap();
            assert!(err < 1e-9, "h={h}: {err}");
        }
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        let x = Tensor::new([1], vec![1.0f64]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
        let x = Tensor::new([1], vec![800.0f64]).unwrap();
        assert!(matches!(
            grad_check(|t, x| { let e = t.exp(x)?; t.sum(e) }, &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = SuiteOptions {
            trials: 2,
            only: vec!["sigmoid".into()],
            inject_fault: Some("sigmoid".into()),
            ..SuiteOptions::default()
        };
        let r = run_suite(&opts).unwrap();
        assert!(!r[0].passed());
    }
}
