//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator. Named substreams share the root
//! seed and differ in the ChaCha stream id, so `fork("init")` and
//! `fork("noise")` never overlap and reproduce bit-for-bit on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Serialized size of [`RandomSource::state_bytes`].
pub const RNG_STATE_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Debug)]
pub struct RandomSource {
    rng: ChaCha8Rng,
}

/// FNV-1a, used to turn substream names into ChaCha stream ids.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream derived from this source's seed and `name`.
    /// Does not advance `self`.
    pub fn fork(&self, name: &str) -> Self {
        let mut rng = ChaCha8Rng::from_seed(self.rng.get_seed());
        rng.set_stream(self.rng.get_stream() ^ stream_id(name));
        Self { rng }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// Generator state: seed, stream id and word position.
    pub fn state_bytes(&self) -> [u8; RNG_STATE_BYTES] {
        let mut out = [0u8; RNG_STATE_BYTES];
        out[..32].copy_from_slice(&self.rng.get_seed());
        out[32..40].copy_from_slice(&self.rng.get_stream().to_le_bytes());
        out[40..].copy_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn from_state_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != RNG_STATE_BYTES {
            return Err(Error::invalid(format!(
                "rng state must be {RNG_STATE_BYTES} bytes, got {}",
                bytes.len()
            )));
        }
        let mut rng = ChaCha8Rng::from_seed(bytes[..32].try_into().expect("32 bytes"));
        rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes")));
        rng.set_word_pos(u128::from_le_bytes(bytes[40..].try_into().expect("16 bytes")));
        Ok(Self { rng })
    }
}

impl PartialEq for RandomSource {
    fn eq(&self, other: &Self) -> bool {
        self.state_bytes() == other.state_bytes()
    }
}

/// I.i.d. `N(mean, std²)` samples. `std = 0` gives a constant tensor.
pub fn sample_gaussian<T: Real>(
    rng: &mut RandomSource,
    shape: &[usize],
    mean: f64,
    std: f64,
) -> Result<Tensor<T>> {
    if !(std >= 0.0) {
        return Err(Error::invalid(format!("gaussian std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(Tensor::full(shape.to_vec(), T::lit(mean)));
    }
    Ok(Tensor::from_fn(shape.to_vec(), |_| T::lit(mean + std * rng.normal())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let mut rng = RandomSource::new(1);
        let t: Tensor<f64> = sample_gaussian(&mut rng, &[4, 3], 0.0, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(sample_gaussian::<f64>(&mut rng, &[2], 0.0, -1.0).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RandomSource::new(42);
        let mut b = RandomSource::new(42);
        let x: Tensor<f32> = sample_gaussian(&mut a, &[64], 1.0, 2.0).unwrap();
        let y: Tensor<f32> = sample_gaussian(&mut b, &[64], 1.0, 2.0).unwrap();
        assert_eq!(x, y);
        let x2: Tensor<f32> = sample_gaussian(&mut a, &[64], 1.0, 2.0).unwrap();
        assert_ne!(x, x2);
    }

    #[test]
    fn forks_are_distinct_and_stable() {
        let root = RandomSource::new(9);
        let mut f1 = root.fork("init");
        let mut f2 = root.fork("noise");
        let mut f1b = RandomSource::new(9).fork("init");
        let v1 = f1.next_u64();
        assert_ne!(v1, f2.next_u64());
        assert_eq!(v1, f1b.next_u64());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RandomSource::new(2024);
        let t: Tensor<f64> = sample_gaussian(&mut rng, &[100_000], 0.0, 0.5).unwrap();
        let n = t.len() as f64;
        let mean = t.sum_all() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        let sd = var.sqrt();
        assert!((0.49..=0.51).contains(&sd), "std {sd}");
    }

    #[test]
    fn state_roundtrip() {
        let mut rng = RandomSource::new(5).fork("sampler");
        for _ in 0..17 {
            rng.normal();
        }
        let mut restored = RandomSource::from_state_bytes(&rng.state_bytes()).unwrap();
        assert_eq!(restored, rng);
        assert_eq!(restored.next_u64(), rng.next_u64());
    }
}
