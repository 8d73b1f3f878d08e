//! Shared fixtures for the criterion benches.

use pose2mesh::data::{generate_synthetic_dataset, MeshTemplate, PoseSample, TemplateSpec};
use pose2mesh::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tube-man template with `n` posed samples.
pub fn tube_man(n: usize) -> (MeshTemplate, Vec<PoseSample>) {
    generate_synthetic_dataset(&TemplateSpec::tube_man(), n, 0).expect("tube-man spec is valid")
}

/// Tensor with entries uniform in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("length matches shape")
}
