//! Deterministic inputs shared by the benchmarks.

use fedrecon_core::sites::{default_profiles, generate_site, MaskParams, SiteDataset};
use fedrecon_core::{seed, Tensor};
use rand::Rng;

pub fn random_tensor(shape: &[usize], stream: u64) -> Tensor {
    let mut rng = seed::rng(0, &[stream]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Site A with `n` training images of side `size`.
pub fn site(n: usize, size: usize) -> SiteDataset {
    generate_site(&default_profiles()[0], n, 1, size, MaskParams::default()).unwrap()
}
