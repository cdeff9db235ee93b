use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Tensor};

/// Seeded parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
    std: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed), std: 0.02 }
    }

    pub fn with_std(seed: u64, std: f64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed), std }
    }

    /// Normal(0, std) resampled until within two standard deviations.
    pub fn trunc_normal(&mut self, name: impl Into<String>, shape: &[usize]) -> Param {
        let normal = Normal::new(0.0, self.std).unwrap();
        let bound = 2.0 * self.std;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= bound {
                break v;
            }
        });
        Param::new(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Param {
        Param::new(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Param {
        Param::new(name, Tensor::full(shape, 1.0))
    }
}
