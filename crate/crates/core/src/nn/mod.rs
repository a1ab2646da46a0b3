//! Neural building blocks: parameter init, linear layers, embeddings,
//! layer norm, dropout, the GRU scorer, and the transformer encoder.

mod gru;
mod transformer;

pub use gru::{Gru, GruConfig};
pub use transformer::{MlmHead, Transformer, TransformerConfig};

use rand::Rng as _;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable weight drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn init_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(data, shape)
}

/// Zero-initialized trainable tensor (biases, the MLM decoder).
pub fn init_zeros<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::param(vec![S::zero(); n], shape)
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [out]`.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: init_uniform(&[in_dim, out_dim], in_dim, rng),
            bias: init_zeros(&[out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        x.matmul(&self.weight).add(&self.bias)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Token embedding table `[vocab, dim]` usable with hard ids or soft
/// one-hot rows. The soft path is a plain matmul, so both paths agree
/// exactly on one-hot inputs.
pub struct Embedding<S: Scalar> {
    pub table: Tensor<S>,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        Embedding { table: init_uniform(&[vocab_size, dim], vocab_size, rng) }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Hard lookup by token id: `[rows, width]` ids to `[rows, width, dim]`.
    pub fn forward_ids(&self, ids: &[u32], rows: usize, width: usize) -> Tensor<S> {
        assert_eq!(ids.len(), rows * width, "id buffer does not match batch shape");
        let vocab = self.vocab_size();
        let idx: Vec<usize> = ids
            .iter()
            .map(|&i| {
                let i = i as usize;
                assert!(i < vocab, "token id {i} out of range for vocab {vocab}");
                i
            })
            .collect();
        self.table.index_select0(&idx).reshape(&[rows, width, self.dim()])
    }

    /// Soft lookup: `[.., vocab]` rows of mixture weights, each summing to 1.
    pub fn forward_soft(&self, x: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape();
        assert_eq!(
            *shape.last().expect("soft input must have a vocab dim"),
            self.vocab_size(),
            "soft input last dim must equal vocab size"
        );
        let vocab = self.vocab_size();
        {
            let xv = x.data();
            for (r, row) in xv.chunks_exact(vocab).enumerate() {
                let s: f64 = row.iter().map(|v| v.to_f64()).sum();
                assert!(
                    (s - 1.0).abs() <= 1e-4 + 1e-6,
                    "soft one-hot row {r} sums to {s}, expected 1±1e-4"
                );
            }
        }
        x.matmul(&self.table)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![S::one(); dim], &[dim]),
            beta: init_zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let d = *x.shape().last().expect("layer norm needs a last dim");
        let last = x.shape().len() - 1;
        let inv_d = S::one() / S::from_f64(d as f64);
        let mu = x.sum_axis(last, true).mul_scalar(inv_d);
        let centered = x.sub(&mu);
        let var = centered.mul(&centered).sum_axis(last, true).mul_scalar(inv_d);
        let std = var.add_scalar(S::from_f64(self.eps)).sqrt();
        centered.div(&std).mul(&self.gamma).add(&self.beta)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Inverted dropout with a constant keep mask; identity when `rate == 0`.
pub fn dropout<S: Scalar>(x: &Tensor<S>, rate: f64, rng: &mut Rng) -> Tensor<S> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return x.clone();
    }
    let scale = S::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { scale })
        .collect();
    x.mul(&Tensor::from_vec(mask, x.shape()))
}
