//! Shared fixtures for the benchmarks.

use ghaar::compressed::CompressedModel;
use ghaar::haar_space::{enumerate_space, select_top_filters, usage_counts};
use ghaar::nn::{ArchConfig, ModelParams, NetworkSpec, Tensor};
use ghaar::train::project_params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Detector of the given widths with random weights projected onto the
/// filters they use most.
pub fn random_model(trunk: [usize; 4], head: [usize; 3], nr: usize, seed: u64) -> CompressedModel {
    let spec = NetworkSpec::new(ArchConfig {
        trunk,
        head,
        ..ArchConfig::default()
    })
    .expect("valid architecture");
    let mut params = ModelParams::init(&spec, seed);
    let full = enumerate_space(3).expect("3x3 space");
    let kernels: Vec<Vec<f64>> = spec
        .convs()
        .into_iter()
        .zip(params.layers())
        .filter(|(c, _)| c.constrained())
        .flat_map(|(c, p)| p.weights.chunks(c.kernel_len()).map(<[f64]>::to_vec).collect::<Vec<_>>())
        .collect();
    let counts = usage_counts(kernels.iter().map(Vec::as_slice), &full).expect("usage census");
    let space = select_top_filters(3, &counts, nr).expect("reduced space");
    project_params(&spec, &mut params, &space).expect("projection");
    CompressedModel::from_params(&spec, &params, &space).expect("compressed model")
}

pub fn random_window(size: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(3, size, size, random_vec(&mut r, 3 * size * size)).expect("window tensor")
}
