use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Seeded generator passed explicitly to every stochastic operation.
///
/// Backed by ChaCha8, a counter-mode stream cipher, so identical seeds give
/// bit-identical streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Splits off an independent child stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Tensor of independent Bernoulli draws: 1 with probability `p_keep`, else 0.
pub fn bernoulli_mask<T: Scalar>(rng: &mut Rng, shape: &[usize], p_keep: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(Error::Argument(format!("keep probability {p_keep} outside [0, 1]")));
    }
    Ok(Tensor::from_fn(shape, |_| {
        if rng.unit() < p_keep {
            T::one()
        } else {
            T::zero()
        }
    }))
}
