#![allow(dead_code)]

use protopart::data::{Dataset, Split};
use protopart::model::{ConvBlock, ModelConfig, DEFAULT_EPSILON};
use protopart::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// 8×8 RGB input and one pooled block: a 4×4×6 latent.
pub fn tiny_config(num_classes: usize, per_class: usize) -> ModelConfig {
    ModelConfig {
        input_height: 8,
        input_width: 8,
        input_channels: 3,
        blocks: vec![ConvBlock::new(6, 3, Some((2, 2)))],
        latent_depth: 6,
        proto_height: 1,
        proto_width: 1,
        num_classes,
        prototypes_per_class: vec![per_class; num_classes],
        epsilon: DEFAULT_EPSILON,
    }
}

pub fn random_dataset(rng: &mut impl Rng, n: usize, num_classes: usize, side: usize) -> Dataset {
    let images = (0..n)
        .map(|_| uniform(rng, &[side, side, 3], 0.0, 1.0))
        .collect();
    let labels = (0..n).map(|i| i % num_classes).collect();
    let names = (0..num_classes).map(|k| format!("c{k}")).collect();
    Dataset::new(images, labels, names, Split::Train).unwrap()
}

/// `Σ (a − b)²` over a window of `z` at `(r, c)` against `p`.
pub fn patch_distance(z: &Tensor, p: &Tensor, r: usize, c: usize) -> f64 {
    let (ph, pw, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let mut s = 0.0;
    for i in 0..ph {
        for j in 0..pw {
            for k in 0..d {
                let diff = z.at3(r + i, c + j, k) - p.at3(i, j, k);
                s += diff * diff;
            }
        }
    }
    s
}

/// 16×16 RGB input, two pooled blocks: a 4×4×16 latent.
pub fn small16_config(num_classes: usize, per_class: usize) -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 3,
        blocks: vec![
            ConvBlock::new(8, 3, Some((2, 2))),
            ConvBlock::new(16, 3, Some((2, 2))),
        ],
        latent_depth: 16,
        proto_height: 1,
        proto_width: 1,
        num_classes,
        prototypes_per_class: vec![per_class; num_classes],
        epsilon: DEFAULT_EPSILON,
    }
}
