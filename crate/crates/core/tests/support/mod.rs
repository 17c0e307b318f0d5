//! Helpers shared by the integration test targets.

#![allow(dead_code)]

pub mod grad;

use pcc_core::geometry::Frame;
use pcc_core::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    PointCloud::new(random_points(n, &mut rng(seed)), Frame::Canonical).unwrap()
}
