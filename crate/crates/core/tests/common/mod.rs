#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uot_core::fields::init_params;
use uot_core::trainer::{Problem, TrainConfig};
use uot_core::{FieldPair, FieldShape, GaussianMixture, Tensor};

pub fn shape(dim: usize, intervals: usize, width: usize, hidden: usize) -> FieldShape {
    FieldShape {
        dim,
        intervals,
        width,
        hidden,
    }
}

/// Seeded parameters, with the output layers scaled up so that the fields
/// are far from zero.
pub fn random_fields(shape: FieldShape, seed: u64, scale: f64) -> FieldPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = init_params(shape, &mut rng);
    for t in f.tensors_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    // nonzero biases
    let mut k = 0.0;
    for t in f.tensors_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                k += 1.0;
                *v = 0.05 * (k * 0.7f64).sin();
            }
        }
    }
    f
}

pub fn flatten(f: &FieldPair) -> Vec<f64> {
    f.named_tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

pub fn unflatten(f: &mut FieldPair, flat: &[f64]) {
    let mut k = 0;
    for t in f.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[k..k + n]);
        k += n;
    }
    assert_eq!(k, flat.len());
}

pub fn points(rho0: &GaussianMixture, r: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rho0.sample(r, &mut rng).points
}

pub fn gaussian_problem(d: usize, m1: f64, shift: f64) -> Problem {
    let mut mean = vec![0.0; d];
    mean[0] = shift;
    Problem {
        rho0: GaussianMixture::standard(d),
        rho1: GaussianMixture::gaussian(m1, mean, 1.0).unwrap(),
        obstacles: None,
    }
}

pub fn small_config(steps: usize, intervals: usize, width: usize, hidden: usize) -> TrainConfig {
    TrainConfig {
        steps,
        intervals,
        width,
        hidden,
        ..TrainConfig::default()
    }
}
