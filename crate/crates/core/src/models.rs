//! DCGAN-style generator and the K+1-headed discriminator/classifier.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    leaky_relu, BatchNorm, Bound, Conv2d, ConvTranspose2d, Dense, GaussianNoise, Mode, ParamStore, BN_EPS,
    BN_MOMENTUM, LEAKY_SLOPE,
};
use crate::rng::RandomSource;
use crate::tensor::{Real, Tensor};

/// Spatial size every generator starts from and every discriminator ends at.
pub const BASE_SIDE: usize = 4;

/// Architecture hyperparameters shared by both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Conv widths from the image side inward; the generator mirrors them.
    /// Empty means "use the default for the image side".
    pub channel_widths: Vec<usize>,
    pub noise_std: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            channel_widths: Vec::new(),
            noise_std: 0.5,
            leaky_slope: LEAKY_SLOPE,
            bn_momentum: BN_MOMENTUM,
            bn_eps: BN_EPS,
        }
    }
}

/// Number of stride-2 stages between `side` and the 4×4 base.
pub fn stages_for_side(side: usize) -> Result<usize> {
    if side < 8 || !side.is_power_of_two() {
        return Err(Error::invalid(format!("image side must be a power of two >= 8, got {side}")));
    }
    Ok((side / BASE_SIDE).trailing_zeros() as usize)
}

/// Canonical DCGAN widths (64, 128, 256, 512), truncated to the stage count.
pub fn default_widths(side: usize) -> Result<Vec<usize>> {
    let n = stages_for_side(side)?;
    Ok((0..n).map(|i| 64usize << i.min(3)).collect())
}

fn resolve_widths(image_shape: [usize; 3], widths: &[usize]) -> Result<Vec<usize>> {
    let [c, h, w] = image_shape;
    if c == 0 || h != w {
        return Err(Error::invalid(format!("unsupported image shape {image_shape:?}")));
    }
    let n = stages_for_side(h)?;
    if widths.is_empty() {
        return default_widths(h);
    }
    if widths.len() != n || widths.contains(&0) {
        return Err(Error::invalid(format!(
            "image side {h} needs {n} nonzero channel widths, got {widths:?}"
        )));
    }
    Ok(widths.to_vec())
}

/// Forward result of the generator.
#[derive(Debug)]
pub struct GeneratorPass<T> {
    pub images: Var,
    pub stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    pub latent_dim: usize,
    pub image_shape: [usize; 3],
    pub widths: Vec<usize>,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    slope: f64,
    project: Dense,
    project_bn: BatchNorm,
    blocks: Vec<(ConvTranspose2d, BatchNorm)>,
    output: ConvTranspose2d,
}

pub fn build_generator<T: Real>(
    latent_dim: usize,
    image_shape: [usize; 3],
    config: &ModelConfig,
    seed: u64,
) -> Result<Generator<T>> {
    if latent_dim == 0 {
        return Err(Error::invalid("latent_dim must be >= 1"));
    }
    let widths = resolve_widths(image_shape, &config.channel_widths)?;
    let mut rng = RandomSource::new(seed).fork("init.generator");
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let top = *widths.last().expect("at least one stage");
    let base = BASE_SIDE * BASE_SIDE;
    let project = Dense::register(&mut params, "g.project", latent_dim, top * base, false, &mut rng)?;
    let project_bn = BatchNorm::register(&mut params, &mut buffers, "g.project_bn", top, config.bn_eps, config.bn_momentum)?;
    let mut blocks = Vec::new();
    for i in (1..widths.len()).rev() {
        let name = format!("g.up{}", widths.len() - i);
        let conv = ConvTranspose2d::register(&mut params, &name, widths[i], widths[i - 1], 4, 2, 1, false, &mut rng)?;
        let bn = BatchNorm::register(&mut params, &mut buffers, &format!("{name}_bn"), widths[i - 1], config.bn_eps, config.bn_momentum)?;
        blocks.push((conv, bn));
    }
    let output = ConvTranspose2d::register(&mut params, "g.out", widths[0], image_shape[0], 4, 2, 1, true, &mut rng)?;
    Ok(Generator {
        latent_dim,
        image_shape,
        widths,
        params,
        buffers,
        slope: config.leaky_slope,
        project,
        project_bn,
        blocks,
        output,
    })
}

impl<T: Real> Generator<T> {
    /// Maps `B×latent_dim` noise to `B×C×H×W` images in (−1, 1).
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, z: Var, mode: Mode) -> Result<GeneratorPass<T>> {
        let zs = tape.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return Err(Error::shape("generator", &[zs.first().copied().unwrap_or(0), self.latent_dim], &zs));
        }
        let b = zs[0];
        let mut stats = Vec::new();
        let h = self.project.forward(tape, p, z)?;
        let top = *self.widths.last().expect("stage");
        let h = tape.reshape(h, &[b, top, BASE_SIDE, BASE_SIDE])?;
        let (h, s) = self.project_bn.forward(tape, p, &self.buffers, h, mode)?;
        stats.extend(s);
        let mut h = leaky_relu(tape, h, self.slope);
        for (conv, bn) in &self.blocks {
            let y = conv.forward(tape, p, h)?;
            let (y, s) = bn.forward(tape, p, &self.buffers, y, mode)?;
            stats.extend(s);
            h = leaky_relu(tape, y, self.slope);
        }
        let y = self.output.forward(tape, p, h)?;
        let images = tape.tanh(y)?;
        Ok(GeneratorPass { images, stats })
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        std::iter::once(&self.project_bn).chain(self.blocks.iter().map(|(_, bn)| bn))
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let bns: Vec<BatchNorm> = self.batch_norms().cloned().collect();
        if stats.len() != bns.len() {
            return Err(Error::invalid("batch statistics do not match generator layers"));
        }
        for (bn, s) in bns.iter().zip(stats) {
            bn.update_running(&mut self.buffers, s)?;
        }
        Ok(())
    }

    /// Eval-mode sampling without gradients.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &p, zv, Mode::Eval)?;
        Ok(tape.value(out.images).clone())
    }
}

/// Output layer of the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// `k` real-class logits plus one fake logit.
    Softmax { num_classes: usize },
    /// One logit squashed by a sigmoid: the classic real/fake unit.
    Sigmoid,
}

impl Head {
    pub fn width(self) -> usize {
        match self {
            Head::Softmax { num_classes } => num_classes + 1,
            Head::Sigmoid => 1,
        }
    }
}

/// Discriminator forward result on a tape.
#[derive(Debug)]
pub struct DiscriminatorPass<T> {
    /// `B×(k+1)` for the softmax head, `B×1` for the sigmoid head.
    pub logits: Var,
    /// `B×F` flattened activations of the last hidden block.
    pub features: Var,
    pub stats: Vec<BatchStats<T>>,
}

/// Detached discriminator outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T: Real = f32> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub features: Tensor<T>,
}

impl<T: Real> DiscriminatorOutput<T> {
    pub fn from_logits(logits: Tensor<T>, features: Tensor<T>) -> Result<Self> {
        let probs = softmax_rows(&logits)?;
        Ok(Self { logits, probs, features })
    }

    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Number of real classes `k`.
    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1] - 1
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Real = f32> {
    pub head: Head,
    pub image_shape: [usize; 3],
    pub widths: Vec<usize>,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    slope: f64,
    noise: GaussianNoise,
    blocks: Vec<(Conv2d, BatchNorm)>,
    output: Dense,
}

/// K+1-way discriminator/classifier. `k` must be at least 2.
pub fn build_discriminator<T: Real>(
    k: usize,
    image_shape: [usize; 3],
    config: &ModelConfig,
    seed: u64,
) -> Result<Discriminator<T>> {
    if k < 2 {
        return Err(Error::invalid(format!("discriminator needs k >= 2 classes, got {k}")));
    }
    build_discriminator_with_head(Head::Softmax { num_classes: k }, image_shape, config, seed)
}

pub fn build_discriminator_with_head<T: Real>(
    head: Head,
    image_shape: [usize; 3],
    config: &ModelConfig,
    seed: u64,
) -> Result<Discriminator<T>> {
    let widths = resolve_widths(image_shape, &config.channel_widths)?;
    let mut rng = RandomSource::new(seed).fork("init.discriminator");
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut blocks = Vec::new();
    let mut in_ch = image_shape[0];
    for (i, &w) in widths.iter().enumerate() {
        let name = format!("d.down{}", i + 1);
        let conv = Conv2d::register(&mut params, &name, in_ch, w, 4, 2, 1, false, &mut rng)?;
        let bn = BatchNorm::register(&mut params, &mut buffers, &format!("{name}_bn"), w, config.bn_eps, config.bn_momentum)?;
        blocks.push((conv, bn));
        in_ch = w;
    }
    let features = in_ch * BASE_SIDE * BASE_SIDE;
    let output = Dense::register(&mut params, "d.head", features, head.width(), true, &mut rng)?;
    Ok(Discriminator {
        head,
        image_shape,
        widths,
        params,
        buffers,
        slope: config.leaky_slope,
        noise: GaussianNoise::new(config.noise_std)?,
        blocks,
        output,
    })
}

impl<T: Real> Discriminator<T> {
    pub fn num_classes(&self) -> Option<usize> {
        match self.head {
            Head::Softmax { num_classes } => Some(num_classes),
            Head::Sigmoid => None,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * BASE_SIDE * BASE_SIDE
    }

    /// Noise draws happen only in train mode; eval mode never touches `rng`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut RandomSource,
    ) -> Result<DiscriminatorPass<T>> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1..] != self.image_shape {
            let mut want = vec![xs.first().copied().unwrap_or(0)];
            want.extend(self.image_shape);
            return Err(Error::shape("discriminator", &want, &xs));
        }
        let mut stats = Vec::new();
        let mut h = self.noise.forward(tape, x, mode, rng)?;
        let mut tap = h;
        for (conv, bn) in &self.blocks {
            let y = conv.forward(tape, p, h)?;
            let (y, s) = bn.forward(tape, p, &self.buffers, y, mode)?;
            stats.extend(s);
            tap = leaky_relu(tape, y, self.slope);
            h = self.noise.forward(tape, tap, mode, rng)?;
        }
        let features = tape.flatten(tap)?;
        let flat = tape.flatten(h)?;
        let logits = self.output.forward(tape, p, flat)?;
        Ok(DiscriminatorPass { logits, features, stats })
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::invalid("batch statistics do not match discriminator layers"));
        }
        let bns: Vec<BatchNorm> = self.blocks.iter().map(|(_, bn)| bn.clone()).collect();
        for (bn, s) in bns.iter().zip(stats) {
            bn.update_running(&mut self.buffers, s)?;
        }
        Ok(())
    }

    /// Eval-mode forward pass returning detached logits, probabilities and features.
    pub fn classify(&self, x: &Tensor<T>) -> Result<DiscriminatorOutput<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        // eval mode never samples, the stream is a placeholder
        let mut unused = RandomSource::new(0);
        let pass = self.forward(&mut tape, &p, xv, Mode::Eval, &mut unused)?;
        DiscriminatorOutput::from_logits(tape.value(pass.logits).clone(), tape.value(pass.features).clone())
    }
}

/// Probability that each sample is real: `1 − p(fake | x)`.
pub fn real_score<T: Real>(out: &DiscriminatorOutput<T>) -> Tensor<T> {
    let w = out.probs.shape()[1];
    Tensor::from_fn([out.batch()], |r| T::one() - out.probs.data()[r * w + w - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_gaussian;

    fn small() -> ModelConfig {
        ModelConfig { latent_dim: 8, channel_widths: vec![4, 8], ..ModelConfig::default() }
    }

    #[test]
    fn generator_shape_and_range() {
        let cfg = ModelConfig { channel_widths: vec![8, 8, 8, 8], ..ModelConfig::default() };
        let g = build_generator::<f32>(100, [3, 64, 64], &cfg, 1).unwrap();
        let mut rng = RandomSource::new(2);
        let z = sample_gaussian(&mut rng, &[2, 100], 0.0, 1.0).unwrap();
        let imgs = g.generate(&z).unwrap();
        assert_eq!(imgs.shape(), &[2, 3, 64, 64]);
        assert!(imgs.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn default_widths_match_dcgan() {
        assert_eq!(default_widths(64).unwrap(), vec![64, 128, 256, 512]);
        assert_eq!(default_widths(16).unwrap(), vec![64, 128]);
        assert!(default_widths(12).is_err());
        assert!(default_widths(4).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_generator::<f32>(8, [1, 16, 16], &small(), 5).unwrap();
        let b = build_generator::<f32>(8, [1, 16, 16], &small(), 5).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_generator::<f32>(8, [1, 16, 16], &small(), 6).unwrap();
        assert_ne!(a.params, c.params);
        let d1 = build_discriminator::<f32>(4, [1, 16, 16], &small(), 5).unwrap();
        let d2 = build_discriminator::<f32>(4, [1, 16, 16], &small(), 5).unwrap();
        assert_eq!(d1.params, d2.params);
    }

    #[test]
    fn head_widths() {
        let cfg = ModelConfig { channel_widths: vec![2, 2, 2, 2], ..ModelConfig::default() };
        let d = build_discriminator::<f32>(101, [3, 64, 64], &cfg, 0).unwrap();
        assert_eq!(d.params.get("d.head.weight").unwrap().shape()[1], 102);
        let d = build_discriminator::<f32>(50, [3, 64, 64], &cfg, 0).unwrap();
        assert_eq!(d.params.get("d.head.bias").unwrap().shape(), &[51]);
        assert!(build_discriminator::<f32>(1, [3, 64, 64], &cfg, 0).is_err());
    }

    #[test]
    fn discriminator_smoke_and_determinism() {
        let d = build_discriminator::<f32>(4, [1, 16, 16], &small(), 3).unwrap();
        let mut rng = RandomSource::new(4);
        let x = sample_gaussian(&mut rng, &[8, 1, 16, 16], 0.0, 0.5).unwrap();
        let out = d.classify(&x).unwrap();
        assert_eq!(out.logits.shape(), &[8, 5]);
        assert_eq!(out.features.shape(), &[8, d.feature_width()]);
        for row in out.probs.data().chunks(5) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out, d.classify(&x).unwrap());

        let x2 = sample_gaussian(&mut rng, &[3, 1, 16, 16], 0.0, 0.5).unwrap();
        assert_eq!(d.classify(&x2).unwrap().features.shape()[1], d.feature_width());
        let bad = Tensor::<f32>::zeros([2, 1, 8, 8]);
        assert!(d.classify(&bad).is_err());
    }

    #[test]
    fn train_mode_batch_of_eight() {
        let mut d = build_discriminator::<f32>(4, [1, 16, 16], &small(), 3).unwrap();
        let mut rng = RandomSource::new(4);
        let mut tape = Tape::new();
        let p = d.params.bind(&mut tape, true);
        let x = tape.constant(sample_gaussian(&mut rng, &[8, 1, 16, 16], 0.0, 0.5).unwrap());
        let pass = d.forward(&mut tape, &p, x, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(pass.logits).shape(), &[8, 5]);
        d.update_running_stats(&pass.stats).unwrap();
    }

    #[test]
    fn real_score_identities() {
        let logits = Tensor::<f64>::zeros([1, 3]);
        let out = DiscriminatorOutput::from_logits(logits, Tensor::zeros([1, 1])).unwrap();
        assert!((real_score(&out).data()[0] - 2.0 / 3.0).abs() < 1e-12);

        let mut rng = RandomSource::new(6);
        let logits: Tensor<f64> = sample_gaussian(&mut rng, &[20, 6], 0.0, 3.0).unwrap();
        let out = DiscriminatorOutput::from_logits(logits, Tensor::zeros([20, 1])).unwrap();
        let score = real_score(&out);
        for r in 0..20 {
            let mass: f64 = out.probs.data()[r * 6..r * 6 + 5].iter().sum();
            assert!((score.data()[r] - mass).abs() < 1e-9);
            assert!((score.data()[r] + out.probs.data()[r * 6 + 5] - 1.0).abs() < 1e-9);
        }

        let sure_fake = Tensor::new([1, 3], vec![-1e3, -1e3, 0.0]).unwrap();
        let out = DiscriminatorOutput::from_logits(sure_fake, Tensor::zeros([1, 1])).unwrap();
        assert_eq!(real_score(&out).data()[0], 0.0);
    }
}
