//! Fixtures shared by the benchmarks.

use medn_core::data_model::{generate_synthetic, Dataset, SynthConfig};
use medn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// The acceptance benchmark's dataset shape: 6 subjects, 300 samples,
/// 8 frames of 16 x 16 flow.
pub fn benchmark_dataset(seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig::default(), seed).expect("default synthetic config is feasible")
}

pub fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic(
        &SynthConfig {
            subjects: 2,
            samples_per_subject: 16,
            ..SynthConfig::default()
        },
        seed,
    )
    .expect("small synthetic config is feasible")
}
