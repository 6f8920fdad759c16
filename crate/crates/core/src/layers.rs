//! Layer zoo: dense, strided and fractionally-strided convolution, batch
//! norm, activations, and Gaussian noise.
//!
//! Layers do not own tensors. Parameters live in a model's [`ParamStore`]
//! and are bound onto a tape for each pass; a layer only records the names
//! and hyperparameters it needs.

use indexmap::IndexMap;

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{sample_gaussian, RandomSource};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named tensors, kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { tensors: IndexMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every tensor on `tape`, as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(Error::ParamMismatch {
                name: name.into(),
                msg: format!("shape {:?} vs {:?}", slot.shape(), t.shape()),
            });
        }
        *slot = t;
        Ok(())
    }

    /// FNV-1a over names and raw element bits. Used to assert that a model
    /// was left untouched by an optimizer step.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |b: u8| h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        let mut buf = Vec::new();
        for (k, v) in &self.tensors {
            k.bytes().for_each(&mut eat);
            buf.clear();
            v.data().iter().for_each(|x| x.write_le(&mut buf));
            buf.iter().copied().for_each(&mut eat);
        }
        h
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound tensor, by name (zeros where the loss did
    /// not depend on it).
    pub fn gradients<T: Real>(&self, grads: &mut Gradients<T>) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            out.insert(name.clone(), grads.take(v))?;
        }
        Ok(out)
    }

    /// Points `name` at another tape variable, e.g. to differentiate with
    /// respect to a single parameter while the rest stay constant.
    pub fn replace(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

fn normal_init<T: Real>(rng: &mut RandomSource, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    sample_gaussian(rng, shape, 0.0, std)
}

/// `x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: String,
    pub bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn register<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        params.insert(&weight, normal_init(rng, &[in_features, out_features], 0.02)?)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            params.insert(&b, Tensor::zeros([out_features]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != self.in_features {
            return Err(Error::shape("dense", &[xs.first().copied().unwrap_or(0), self.in_features], xs));
        }
        let y = tape.matmul(x, p.get(&self.weight)?)?;
        match &self.bias {
            Some(b) => tape.add_bias(y, p.get(b)?),
            None => Ok(y),
        }
    }
}

/// Strided convolution, kernel `out×in×k×k`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        params.insert(&weight, normal_init(rng, &[out_ch, in_ch, kernel, kernel], 0.02)?)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            params.insert(&b, Tensor::zeros([out_ch]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.get(&self.weight)?, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => tape.add_bias(y, p.get(b)?),
            None => Ok(y),
        }
    }
}

/// Fractionally-strided convolution, kernel `in×out×k×k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        params: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        params.insert(&weight, normal_init(rng, &[in_ch, out_ch, kernel, kernel], 0.02)?)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            params.insert(&b, Tensor::zeros([out_ch]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d_transpose(x, p.get(&self.weight)?, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => tape.add_bias(y, p.get(b)?),
            None => Ok(y),
        }
    }
}

/// Per-channel batch normalization. `gamma`/`beta` are trainable
/// parameters; running statistics are buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn register<T: Real>(
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
        momentum: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) || !(eps > 0.0) {
            return Err(Error::invalid(format!("batch norm momentum {momentum}, eps {eps}")));
        }
        let bn = Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
            channels,
            eps,
            momentum,
        };
        params.insert(&bn.gamma, Tensor::ones([channels]))?;
        params.insert(&bn.beta, Tensor::zeros([channels]))?;
        buffers.insert(&bn.running_mean, Tensor::zeros([channels]))?;
        buffers.insert(&bn.running_var, Tensor::ones([channels]))?;
        Ok(bn)
    }

    /// Train mode normalizes with batch statistics and returns them for
    /// [`BatchNorm::update_running`]; eval mode uses the running buffers.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        buffers: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let gamma = p.get(&self.gamma)?;
        let beta = p.get(&self.beta)?;
        let eps = T::lit(self.eps);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let mean = buffers.get(&self.running_mean)?.data().to_vec();
                let var = buffers.get(&self.running_var)?.data().to_vec();
                Ok((tape.batch_norm_fixed(x, gamma, beta, &mean, &var, eps)?, None))
            }
        }
    }

    /// `running ← (1 − m)·running + m·batch`
    pub fn update_running<T: Real>(&self, buffers: &mut ParamStore<T>, stats: &BatchStats<T>) -> Result<()> {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for (name, batch) in [(&self.running_mean, &stats.mean), (&self.running_var, &stats.var)] {
            let run = buffers.get_mut(name)?;
            if run.len() != batch.len() {
                return Err(Error::shape("batch_norm", run.shape(), &[batch.len()]));
            }
            for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
        Ok(())
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// `x` if `x ≥ 0`, else `slope·x`.
pub fn leaky_relu<T: Real>(tape: &mut Tape<T>, x: Var, slope: f64) -> Var {
    debug_assert!((0.0..1.0).contains(&slope));
    tape.leaky_relu(x, T::lit(slope))
}

pub fn sigmoid<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.sigmoid(x)
}

/// Row-wise softmax over class logits.
pub fn softmax<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    tape.softmax(logits)
}

/// Additive zero-centred Gaussian noise, active in train mode only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianNoise {
    pub std: f64,
}

impl GaussianNoise {
    pub fn new(std: f64) -> Result<Self> {
        if !(std >= 0.0) {
            return Err(Error::invalid(format!("noise std must be >= 0, got {std}")));
        }
        Ok(Self { std })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, mode: Mode, rng: &mut RandomSource) -> Result<Var> {
        if mode == Mode::Eval || self.std == 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let noise = sample_gaussian(rng, &shape, 0.0, self.std)?;
        apply_noise(tape, x, noise)
    }
}

/// Adds a fixed noise sample; the gradient passes straight through.
pub fn apply_noise<T: Real>(tape: &mut Tape<T>, x: Var, noise: Tensor<T>) -> Result<Var> {
    let n = tape.constant(noise);
    tape.add(x, n)
}

pub fn gaussian_noise_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    std: f64,
    mode: Mode,
    rng: &mut RandomSource,
) -> Result<Var> {
    GaussianNoise::new(std)?.forward(tape, x, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_bias() {
        let mut params = ParamStore::<f64>::new();
        let mut rng = RandomSource::new(0);
        let d = Dense::register(&mut params, "fc", 3, 3, true, &mut rng).unwrap();
        params.set("fc.weight", Tensor::identity(3)).unwrap();
        params.set("fc.bias", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 3]));
        let y = d.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        params.set("fc.bias", Tensor::zeros([3])).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let input = Tensor::from_fn([2, 3], |i| i as f64 - 2.5);
        let x = tape.constant(input.clone());
        let y = d.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &input);

        let bad = tape.constant(Tensor::zeros([2, 4]));
        assert!(d.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn leaky_relu_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3], vec![-1.0, 2.0, 0.0]).unwrap());
        let y = leaky_relu(&mut tape, x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.2, 2.0, 0.0]);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut rng = RandomSource::new(3);
        let mut tape = Tape::<f64>::new();
        let t: Tensor<f64> = sample_gaussian(&mut rng, &[50], 0.0, 5.0).unwrap();
        let x = tape.constant(t.clone());
        let nx = tape.constant(t.map(|v| -v));
        let s = sigmoid(&mut tape, x);
        let sn = sigmoid(&mut tape, nx);
        for (a, b) in tape.value(s).data().iter().zip(tape.value(sn).data()) {
            assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }

    fn bn_layer(channels: usize) -> (BatchNorm, ParamStore<f64>, ParamStore<f64>) {
        let mut p = ParamStore::new();
        let mut b = ParamStore::new();
        let bn = BatchNorm::register(&mut p, &mut b, "bn", channels, BN_EPS, BN_MOMENTUM).unwrap();
        (bn, p, b)
    }

    #[test]
    fn batchnorm_two_values() {
        let (mut bn, params, buffers) = bn_layer(1);
        bn.eps = 1e-12;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new([2, 1], vec![1.0, 3.0]).unwrap());
        let (y, _) = bn.forward(&mut tape, &p, &buffers, x, Mode::Train).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_constant_batch_gives_beta() {
        let (bn, mut params, buffers) = bn_layer(1);
        params.set("bn.beta", Tensor::full([1], 5.0)).unwrap();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::full([4, 1, 2, 2], 3.0));
        let (y, _) = bn.forward(&mut tape, &p, &buffers, x, Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_output_statistics() {
        let (bn, params, buffers) = bn_layer(3);
        let mut rng = RandomSource::new(11);
        for trial in 0..5 {
            let x: Tensor<f64> = sample_gaussian(&mut rng, &[8, 3, 4, 4], trial as f64, 3.0).unwrap();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false);
            let xv = tape.constant(x);
            let (y, _) = bn.forward(&mut tape, &p, &buffers, xv, Mode::Train).unwrap();
            let y = tape.value(y);
            for c in 0..3 {
                let vals: Vec<f64> = y
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (i / 16) % 3 == c)
                    .map(|(_, &v)| v)
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn batchnorm_rejects_single_sample_and_tracks_running_stats() {
        let (bn, params, mut buffers) = bn_layer(1);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let one = tape.constant(Tensor::ones([1, 1]));
        assert!(bn.forward(&mut tape, &p, &buffers, one, Mode::Train).is_err());
        // eval with a single sample is fine
        assert!(bn.forward(&mut tape, &p, &buffers, one, Mode::Eval).is_ok());

        let x = tape.constant(Tensor::new([2, 1], vec![1.0, 3.0]).unwrap());
        let (_, stats) = bn.forward(&mut tape, &p, &buffers, x, Mode::Train).unwrap();
        bn.update_running(&mut buffers, &stats.unwrap()).unwrap();
        assert!((buffers.get("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((buffers.get("bn.running_var").unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_modes() {
        let mut rng = RandomSource::new(8);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([100_000]));
        let e = gaussian_noise_forward(&mut tape, x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e, x);
        let z = gaussian_noise_forward(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(z, x);
        assert!(gaussian_noise_forward(&mut tape, x, -0.1, Mode::Train, &mut rng).is_err());
        let y = gaussian_noise_forward(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let v = tape.value(y).data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.49..=0.51).contains(&sd));
    }

    #[test]
    fn softmax_shift_invariance_and_uniform() {
        let mut tape = Tape::<f64>::new();
        let u = tape.constant(Tensor::full([1, 3], 0.7));
        let p = softmax(&mut tape, u).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut params = ParamStore::<f32>::new();
        params.insert("a", Tensor::zeros([1])).unwrap();
        assert!(params.insert("a", Tensor::zeros([1])).is_err());
    }
}
