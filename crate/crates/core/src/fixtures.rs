//! Seeded random fixtures shared by unit and integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionLayer, HeadWeights};
use crate::tensor::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_values(n: usize, seed: u64, bound: f64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-bound..bound)).collect()
}

pub fn random_tensor<T: Scalar>(shape: &[usize], seed: u64, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &random_values(n, seed, bound)).expect("valid shape")
}

pub fn random_param<T: Scalar>(shape: &[usize], seed: u64, bound: f64) -> Tensor<T> {
    random_tensor::<T>(shape, seed, bound).detach_param()
}

pub fn random_head<T: Scalar>(d_model: usize, d_head: usize, index: usize, seed: u64) -> HeadWeights<T> {
    let bound = 1.0 / (d_model as f64).sqrt();
    let base = seed.wrapping_mul(1_000_003).wrapping_add(index as u64 * 3);
    HeadWeights {
        wq: random_param(&[d_model, d_head], base, bound),
        wk: random_param(&[d_model, d_head], base + 1, bound),
        wv: random_param(&[d_model, d_head], base + 2, bound),
        head_index: index,
    }
}

pub fn random_layer<T: Scalar>(heads: usize, d_model: usize, seed: u64) -> AttentionLayer<T> {
    let d_head = d_model / heads;
    let hs = (0..heads).map(|i| random_head(d_model, d_head, i, seed)).collect();
    AttentionLayer::new(hs, true).expect("consistent layer")
}
