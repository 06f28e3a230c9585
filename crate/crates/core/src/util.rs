use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// A ChaCha stream keyed by `(seed, label)`; independent labels give
/// independent streams.
pub fn labeled_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn normal_vector(rng: &mut impl rand::Rng, dim: usize, sigma: f64) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

pub fn unit_vector(rng: &mut impl rand::Rng, dim: usize) -> Array1<f64> {
    let v = normal_vector(rng, dim, 1.0);
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
