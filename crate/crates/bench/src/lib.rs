//! Shared fixtures for the criterion benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scsd_core::config::RunConfig;
use scsd_core::pipeline::dataset::{generate_dataset, Sample};
use scsd_core::pipeline::train::{usable_samples, Trainer};
use scsd_core::pipeline::SegModel;

pub fn random_features(d: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((d, h, w), |_| rng.gen_range(-1.5..1.5))
}

pub fn default_samples(n_per_domain: usize) -> Vec<Sample> {
    let cfg = RunConfig::default();
    let domains = cfg.ordered_domains();
    usable_samples(
        generate_dataset(&domains[..2], n_per_domain, cfg.dataset.layout_seed, 64).unwrap(),
    )
}

pub fn default_trainer(n_per_domain: usize) -> Trainer {
    let cfg = RunConfig::default();
    let model = SegModel::new(&cfg).unwrap();
    Trainer::new(model, default_samples(n_per_domain)).unwrap()
}
