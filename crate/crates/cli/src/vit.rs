//! Synthetic bundles with the tensor inventory of a ViT encoder.
//!
//! The fused qkv projection is stored as separate query/key/value tensors so
//! the planner sees each adapted weight; element counts are unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use srlora::bundle::{roles, Tensor, WeightBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VitShape {
    pub layers: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    /// Flattened patch size (`channels · patch²`).
    pub patch_dim: usize,
    /// Patches plus the class token.
    pub tokens: usize,
}

impl VitShape {
    /// ViT-B/16 at 224×224.
    pub const BASE: VitShape = VitShape {
        layers: 12,
        dim: 768,
        mlp_dim: 3072,
        patch_dim: 768,
        tokens: 197,
    };

    /// Element count of every tensor except the classification head.
    pub fn backbone_total(&self) -> u64 {
        let (d, m) = (self.dim as u64, self.mlp_dim as u64);
        let embed = self.patch_dim as u64 * d + d + d + self.tokens as u64 * d;
        let block = 3 * d * d + 3 * d + d * d + d + m * d + m + d * m + d + 4 * d;
        embed + self.layers as u64 * block + 2 * d
    }
}

pub const VIT_B_BACKBONE_TOTAL: u64 = 85_798_656;

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    (0..rows * cols).map(|_| n.sample(rng)).collect()
}

fn unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Noise plus a dominant rank-one spike, so the top singular value is well separated.
fn spiked(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = gaussian(d, d, 0.02, rng);
    let u = unit(d, rng);
    let v = unit(d, rng);
    let strength = 4.0 * 0.02 * (d as f64).sqrt();
    for i in 0..d {
        for j in 0..d {
            w[i * d + j] += strength * u[i] * v[j];
        }
    }
    w
}

/// Seeded bundle following `shape`; adapted projections carry a spectral spike.
pub fn vit_bundle(shape: VitShape, seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m) = (shape.dim, shape.mlp_dim);
    let mut b = WeightBundle::new();
    let mut push = |t: Tensor| b.push(t).expect("inventory keys are unique");
    push(Tensor::new(
        "patch_embed.weight",
        None,
        "patch_embed",
        vec![d, shape.patch_dim],
        gaussian(d, shape.patch_dim, 0.02, &mut rng),
    ));
    push(Tensor::new(
        "patch_embed.bias",
        None,
        "patch_embed_bias",
        vec![d],
        vec![0.0; d],
    ));
    push(Tensor::new(
        "cls_token",
        None,
        "cls_token",
        vec![1, d],
        gaussian(1, d, 0.02, &mut rng),
    ));
    push(Tensor::new(
        "pos_embed",
        None,
        "pos_embed",
        vec![shape.tokens, d],
        gaussian(shape.tokens, d, 0.02, &mut rng),
    ));
    for l in 1..=shape.layers {
        let name = |s: &str| format!("blocks.{l}.{s}");
        push(Tensor::new(
            name("query"),
            Some(l),
            roles::QUERY,
            vec![d, d],
            spiked(d, &mut rng),
        ));
        push(Tensor::new(
            name("key"),
            Some(l),
            roles::KEY,
            vec![d, d],
            gaussian(d, d, 0.02, &mut rng),
        ));
        push(Tensor::new(
            name("value"),
            Some(l),
            roles::VALUE,
            vec![d, d],
            spiked(d, &mut rng),
        ));
        push(Tensor::new(
            name("qkv_bias"),
            Some(l),
            "qkv_bias",
            vec![3, d],
            vec![0.0; 3 * d],
        ));
        push(Tensor::new(
            name("output"),
            Some(l),
            roles::OUTPUT,
            vec![d, d],
            spiked(d, &mut rng),
        ));
        push(Tensor::new(
            name("output_bias"),
            Some(l),
            "output_bias",
            vec![d],
            vec![0.0; d],
        ));
        push(Tensor::new(
            name("mlp_in"),
            Some(l),
            roles::MLP_IN,
            vec![m, d],
            gaussian(m, d, 0.02, &mut rng),
        ));
        push(Tensor::new(
            name("mlp_in_bias"),
            Some(l),
            "mlp_in_bias",
            vec![m],
            vec![0.0; m],
        ));
        push(Tensor::new(
            name("mlp_out"),
            Some(l),
            roles::MLP_OUT,
            vec![d, m],
            gaussian(d, m, 0.02, &mut rng),
        ));
        push(Tensor::new(
            name("mlp_out_bias"),
            Some(l),
            "mlp_out_bias",
            vec![d],
            vec![0.0; d],
        ));
        let norm: Vec<f64> = (0..4 * d).map(|i| if (i / d) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        push(Tensor::new(name("norm"), Some(l), roles::NORM, vec![4, d], norm));
    }
    let final_norm: Vec<f64> = (0..2 * d).map(|i| if i < d { 1.0 } else { 0.0 }).collect();
    push(Tensor::new("final_norm", None, roles::NORM, vec![2, d], final_norm));
    b
}
