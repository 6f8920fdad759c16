//! Fixtures shared by the benchmarks.

use ssgan_core::data::{make_synthetic, split_train_test, strip_labels, Dataset, Protocol};
use ssgan_core::models::ModelConfig;
use ssgan_core::rng::sample_gaussian;
use ssgan_core::training::{ExperimentConfig, Trainer, TrainingConfig};
use ssgan_core::{RandomSource, Tensor};

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor<f32> {
    sample_gaussian(&mut RandomSource::new(seed), shape, 0.0, 1.0).expect("valid std")
}

/// Four shape classes at 16×16, 128 train and 128 test images, with 90%
/// of the training labels withheld.
pub fn shapes_dataset() -> Dataset {
    let raw = make_synthetic(4, 64, 16, 1).expect("synthetic data");
    let split = split_train_test(&raw, Protocol::Fraction(0.5), 1).expect("valid split");
    strip_labels(&split, 0.9, 1).expect("valid fraction")
}

pub fn trainer(ds: &Dataset, widths: Vec<usize>, batch_size: usize) -> Trainer {
    let exp = ExperimentConfig {
        num_classes: ds.num_classes(),
        image_shape: ds.image_shape,
        training: TrainingConfig { batch_size, iterations: u64::MAX, eval_interval: u64::MAX, ..TrainingConfig::default() },
        model: ModelConfig { channel_widths: widths, ..ModelConfig::default() },
    };
    Trainer::new(exp, ds).expect("valid experiment")
}
