//! Fixtures shared by the benchmarks.

use gazeformer::rng::rng_from_seed;
use gazeformer::{EgSpikeFormer, ModelConfig, Tensor};

/// Standard-normal tensor from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng_from_seed(seed))
}

/// Default-sized model and a batch of `batch` images in `[0, 1)`.
pub fn model_and_images(batch: usize) -> (EgSpikeFormer, Tensor) {
    let cfg = ModelConfig::default();
    let s = cfg.image_size;
    let images = Tensor::uniform([batch, cfg.in_channels, s, s], 0.0, 1.0, &mut rng_from_seed(1));
    (EgSpikeFormer::new(cfg, 0).expect("default config is valid"), images)
}
