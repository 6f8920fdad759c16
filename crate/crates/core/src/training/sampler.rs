use crate::data::{stack_images, Dataset};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Epoch-style sampling without replacement from a fixed pool of train
/// indices; the permutation is redrawn from the sampler's own stream each
/// time it runs out.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: RandomSource,
}

/// Resumable position of a [`Sampler`] (its pool is rebuilt from the data).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerState {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub rng: RandomSource,
}

impl Sampler {
    pub fn new(pool: Vec<usize>, mut rng: RandomSource) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("cannot sample from an empty training pool"));
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        rng.shuffle(&mut order);
        Ok(Self { pool, order, cursor: 0, rng })
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// `m` pool members; a pool smaller than `m` wraps within the batch.
    pub fn draw(&mut self, m: usize) -> Vec<usize> {
        (0..m)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.rng.shuffle(&mut self.order);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.pool[self.order[self.cursor - 1]]
            })
            .collect()
    }

    pub fn state(&self) -> SamplerState {
        SamplerState { order: self.order.clone(), cursor: self.cursor, rng: self.rng.clone() }
    }

    pub fn restore(&mut self, state: SamplerState) -> Result<()> {
        let mut sorted = state.order.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &o)| i != o) || sorted.len() != self.pool.len() || state.cursor > sorted.len() {
            return Err(Error::Checkpoint {
                field: "sampler".into(),
                msg: format!("state does not fit a pool of {} samples", self.pool.len()),
            });
        }
        self.order = state.order;
        self.cursor = state.cursor;
        self.rng = state.rng;
        Ok(())
    }
}

/// Real part of one step, partitioned by label presence.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labeled rows first, then unlabeled.
    pub fn images(&self, ds: &Dataset) -> Result<Tensor<f32>> {
        stack_images(self.labeled.iter().chain(&self.unlabeled).map(|&i| &ds.train[i]), ds.image_shape)
    }

    pub fn labels(&self, ds: &Dataset) -> Vec<usize> {
        self.labeled.iter().map(|&i| ds.train[i].label.expect("labeled part")).collect()
    }
}

/// Draws `m` real samples from the pooled train split and splits them by
/// whether their label is visible.
pub fn compose_minibatch(ds: &Dataset, m: usize, sampler: &mut Sampler) -> Result<MiniBatch> {
    if ds.train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let (labeled, unlabeled) = sampler.draw(m).into_iter().partition(|&i| ds.train[i].label.is_some());
    Ok(MiniBatch { labeled, unlabeled })
}
