//! Fixtures shared by the benchmarks under `benches/`.

use catunet::rng::{Rng, Stream};
use catunet::{CatUNetConfig, CatUNetModel, Tensor};

/// Normal samples of the given shape from a fixed stream.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed, Stream::Custom(42));
    Tensor::from_fn(shape, |_| rng.normal())
}

/// The desk-scale model used by the end-to-end runs: depth 3, base 16,
/// 64x64 grayscale.
pub fn desk_model() -> CatUNetModel {
    let config = CatUNetConfig {
        input_size: 64,
        ..CatUNetConfig::default()
    };
    CatUNetModel::build(config, 0).expect("valid config")
}

/// A batch of `n` uniform images matching [`desk_model`].
pub fn desk_batch(n: usize) -> Tensor {
    let mut rng = Rng::new(1, Stream::Custom(43));
    Tensor::from_fn(&[n, 1, 64, 64], |_| rng.uniform())
}
