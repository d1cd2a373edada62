//! Noisy class prototypes as a stand-in dataset.

use crate::error::{Error, Result};
use crate::model::VitConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    seed: u64,
    num_classes: usize,
    shape: [usize; 3],
    prototypes: Vec<Tensor>,
    noise: f64,
}

impl SyntheticTask {
    /// One standard-normal prototype image per class of `cfg`.
    pub fn new(cfg: &VitConfig, seed: u64, noise: f64) -> Result<Self> {
        let shape = [cfg.image, cfg.image, cfg.channels];
        let base = Rng::new(seed).fork(0x70726f746f);
        let prototypes = (0..cfg.num_classes)
            .map(|c| Tensor::randn(&shape, 1.0, &mut base.fork(c as u64)))
            .collect();
        Self::with_prototypes(seed, shape, prototypes, noise)
    }

    /// Two classes with prototypes `p` and `−p`: separable by a hyperplane
    /// through the origin.
    pub fn two_class(cfg: &VitConfig, seed: u64, noise: f64) -> Result<Self> {
        if cfg.num_classes != 2 {
            return Err(Error::Config(format!("two_class needs 2 classes, config has {}", cfg.num_classes)));
        }
        let shape = [cfg.image, cfg.image, cfg.channels];
        let p = Tensor::randn(&shape, 1.0, &mut Rng::new(seed).fork(0x70726f746f));
        let q = p.map(|v| -v);
        Self::with_prototypes(seed, shape, vec![p, q], noise)
    }

    fn with_prototypes(seed: u64, shape: [usize; 3], prototypes: Vec<Tensor>, noise: f64) -> Result<Self> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!("noise must be nonnegative, got {noise}")));
        }
        if prototypes.is_empty() {
            return Err(Error::Config("a task needs at least one class".into()));
        }
        Ok(SyntheticTask { seed, num_classes: prototypes.len(), shape, prototypes, noise })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Batch for `step`: images and one-hot labels `[size, classes]`. The
    /// stream is a pure function of `(seed, step)`.
    pub fn batch(&self, step: usize, size: usize) -> Result<(Vec<Tensor>, Tensor)> {
        let mut rng = Rng::new(self.seed).fork(1 + step as u64);
        let mut images = Vec::with_capacity(size);
        let mut labels = Tensor::zeros(&[size, self.num_classes]);
        for i in 0..size {
            let c = rng.below(self.num_classes as u64) as usize;
            labels.row_mut(i)[c] = 1.0;
            let mut img = Tensor::randn(&self.shape, self.noise, &mut rng);
            img.add_assign(&self.prototypes[c])?;
            images.push(img);
        }
        Ok((images, labels))
    }
}
