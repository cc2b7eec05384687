//! Seeded inputs shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_core::{EvalMeta, Model, ModelConfig};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Labels of a P x K batch in identity-major order.
pub fn pk_labels(p: usize, k: usize) -> Vec<u64> {
    (0..p * k).map(|i| (i / k) as u64).collect()
}

pub fn random_meta(n: usize, persons: u64, cameras: u32, seed: u64) -> Vec<EvalMeta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| EvalMeta {
            person_id: rng.random_range(0..persons),
            camera_id: rng.random_range(0..cameras),
        })
        .collect()
}

/// Model with the desk-scale widths.
pub fn desk_model(input_dim: usize) -> Model {
    let config = ModelConfig {
        input_dim,
        hidden_dim: 128,
        embedding_dim: 32,
        dropout_rate: 0.3,
        bn_momentum: 0.1,
    };
    Model::new(&config, 0).expect("valid model config")
}
