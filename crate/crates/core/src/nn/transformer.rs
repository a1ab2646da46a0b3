//! Pre-norm transformer encoder with masked self-attention, plus the MLM
//! output head.
//!
//! Attention masks keys at invalid positions with a large negative additive
//! term; after the stabilized softmax those weights underflow to exactly
//! zero, so padding content can never reach a valid position's output.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{dropout, init_zeros, LayerNorm, Linear};

const NEG_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 4,
            num_heads: 4,
            model_dim: 128,
            ff_dim: 512,
            max_seq_len: 256,
            dropout_rate: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) {
        assert!(self.num_layers > 0 && self.num_heads > 0, "layers/heads must be positive");
        assert!(
            self.model_dim.is_multiple_of(self.num_heads),
            "model_dim {} not divisible by num_heads {}",
            self.model_dim,
            self.num_heads
        );
        assert!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must be in [0, 1)"
        );
        assert!(self.max_seq_len > 0, "max_seq_len must be positive");
    }
}

struct Block<S: Scalar> {
    ln1: LayerNorm<S>,
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
    ln2: LayerNorm<S>,
    ff1: Linear<S>,
    ff2: Linear<S>,
}

impl<S: Scalar> Block<S> {
    fn new(cfg: &TransformerConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        Block {
            ln1: LayerNorm::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(d, cfg.ff_dim, rng),
            ff2: Linear::new(cfg.ff_dim, d, rng),
        }
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.wq.named_params(&format!("{prefix}.wq"), out);
        self.wk.named_params(&format!("{prefix}.wk"), out);
        self.wv.named_params(&format!("{prefix}.wv"), out);
        self.wo.named_params(&format!("{prefix}.wo"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.ff1.named_params(&format!("{prefix}.ff1"), out);
        self.ff2.named_params(&format!("{prefix}.ff2"), out);
    }

    fn forward(
        &self,
        x: &Tensor<S>,
        key_mask: &Tensor<S>,
        heads: usize,
        drop_rate: f64,
        mut rng: Option<&mut Rng>,
    ) -> Tensor<S> {
        let shape = x.shape().to_vec();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let split = |t: &Tensor<S>| t.reshape(&[b, s, heads, dh]).transpose(1, 2);

        let a = self.ln1.forward(x);
        let q = split(&self.wq.forward(&a));
        let k = split(&self.wk.forward(&a));
        let v = split(&self.wv.forward(&a));

        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let scores = q.matmul(&k.transpose(2, 3)).mul_scalar(scale).add(key_mask);
        let mut weights = scores.softmax(3);
        if let Some(r) = rng.as_mut() {
            if drop_rate > 0.0 {
                weights = dropout(&weights, drop_rate, r);
            }
        }

        let attended = weights.matmul(&v).transpose(1, 2).reshape(&[b, s, d]);
        let mut attn_out = self.wo.forward(&attended);
        if let Some(r) = rng.as_mut() {
            if drop_rate > 0.0 {
                attn_out = dropout(&attn_out, drop_rate, r);
            }
        }
        let x = x.add(&attn_out);

        let f = self.ln2.forward(&x);
        let mut f = self.ff2.forward(&self.ff1.forward(&f).gelu());
        if let Some(r) = rng.as_mut() {
            if drop_rate > 0.0 {
                f = dropout(&f, drop_rate, r);
            }
        }
        x.add(&f)
    }
}

/// Transformer encoder stack over already-embedded inputs.
pub struct Transformer<S: Scalar> {
    cfg: TransformerConfig,
    blocks: Vec<Block<S>>,
    final_ln: LayerNorm<S>,
    positional: Vec<S>,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(cfg: TransformerConfig, rng: &mut Rng) -> Self {
        cfg.validate();
        let blocks = (0..cfg.num_layers).map(|_| Block::new(&cfg, rng)).collect();
        let positional = sinusoidal_table(cfg.max_seq_len, cfg.model_dim);
        Transformer { final_ln: LayerNorm::new(cfg.model_dim), cfg, blocks, positional }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.named_params(&format!("{prefix}.block{i}"), out);
        }
        self.final_ln.named_params(&format!("{prefix}.final_ln"), out);
    }

    /// `x_embedded: [batch, seq, model_dim]`, `valid: [batch, seq]` 0/1.
    /// Dropout runs only when a rate/rng pair is supplied.
    pub fn forward(
        &self,
        x_embedded: &Tensor<S>,
        valid: &[u8],
        mut drop_rng: Option<&mut Rng>,
    ) -> Tensor<S> {
        let shape = x_embedded.shape().to_vec();
        assert_eq!(shape.len(), 3, "transformer input must be [batch, seq, dim]");
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.cfg.model_dim, "input dim does not match model_dim");
        assert!(
            s <= self.cfg.max_seq_len,
            "sequence length {s} exceeds max_seq_len {}",
            self.cfg.max_seq_len
        );
        assert_eq!(valid.len(), b * s, "validity mask does not match batch shape");

        // Additive key mask [b, 1, 1, s]: 0 on valid keys, -1e9 on invalid.
        let mask_vals: Vec<S> = valid
            .iter()
            .map(|&v| if v != 0 { S::zero() } else { S::from_f64(NEG_MASK) })
            .collect();
        let key_mask = Tensor::from_vec(mask_vals, &[b, 1, 1, s]);

        let pos = Tensor::from_vec(self.positional[..s * d].to_vec(), &[s, d]);
        let mut h = x_embedded.add(&pos);
        if let Some(rng) = drop_rng.as_mut() {
            if self.cfg.dropout_rate > 0.0 {
                h = dropout(&h, self.cfg.dropout_rate, rng);
            }
        }
        for blk in &self.blocks {
            let reborrow = drop_rng.as_deref_mut();
            h = blk.forward(&h, &key_mask, self.cfg.num_heads, self.cfg.dropout_rate, reborrow);
        }
        self.final_ln.forward(&h)
    }
}

/// Unnormalized logits over the full vocabulary. The decoder starts at zero
/// so an untrained encoder scores exactly uniform.
pub struct MlmHead<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> MlmHead<S> {
    pub fn new(model_dim: usize, vocab_size: usize) -> Self {
        MlmHead { weight: init_zeros(&[model_dim, vocab_size]), bias: init_zeros(&[vocab_size]) }
    }

    pub fn forward(&self, h: &Tensor<S>) -> Tensor<S> {
        h.matmul(&self.weight).add(&self.bias)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

fn sinusoidal_table<S: Scalar>(max_len: usize, dim: usize) -> Vec<S> {
    let mut out = vec![S::zero(); max_len * dim];
    for pos in 0..max_len {
        for i in 0..dim {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            out[pos * dim + i] =
                S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            num_layers: 1,
            num_heads: 1,
            model_dim: 4,
            ff_dim: 8,
            max_seq_len: 8,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn padding_permutation_invariance() {
        let cfg = TransformerConfig { num_layers: 2, num_heads: 2, ..tiny_cfg() };
        let mut rng = derive_rng(21, &[1]);
        let tf = Transformer::<f64>::new(cfg, &mut rng);
        let valid = [1u8, 1, 1, 0, 0, 0];

        let mut a = vec![0.25; 6 * 4];
        let mut b = a.clone();
        for (i, v) in a[12..].iter_mut().enumerate() {
            *v = i as f64;
        }
        for (i, v) in b[12..].iter_mut().enumerate() {
            *v = -(i as f64) * 2.0;
        }
        let ya = tf.forward(&Tensor::from_f64_slice(&a, &[1, 6, 4]), &valid, None);
        let yb = tf.forward(&Tensor::from_f64_slice(&b, &[1, 6, 4]), &valid, None);
        let (va, vb) = (ya.to_vec(), yb.to_vec());
        for i in 0..3 * 4 {
            assert!(
                (va[i] - vb[i]).abs() <= 1e-5,
                "valid output leaked padding content at {i}: {} vs {}",
                va[i],
                vb[i]
            );
        }
    }

    #[test]
    #[should_panic(expected = "exceeds max_seq_len")]
    fn over_length_sequence_panics() {
        let mut rng = derive_rng(22, &[1]);
        let tf = Transformer::<f64>::new(tiny_cfg(), &mut rng);
        let x = Tensor::zeros(&[1, 9, 4]);
        let _ = tf.forward(&x, &[1; 9], None);
    }

    /// Independent straight-line recomputation of a one-block, one-head
    /// forward pass on a two-token input, including positional encodings.
    #[test]
    fn single_head_attention_matches_hand_computation() {
        let cfg = tiny_cfg();
        let mut rng = derive_rng(23, &[1]);
        let tf = Transformer::<f64>::new(cfg, &mut rng);
        let d = 4usize;
        let s = 2usize;
        let x = [0.1, -0.2, 0.3, 0.05, -0.4, 0.2, 0.0, 0.15];
        let got = tf
            .forward(&Tensor::from_f64_slice(&x, &[1, s, d]), &[1, 1], None)
            .to_vec();

        // hand path, plain loops over f64
        let blk = &tf.blocks[0];
        let grab = |t: &Tensor<f64>| t.to_vec();
        let (wq, bq) = (grab(&blk.wq.weight), grab(&blk.wq.bias));
        let (wk, bk) = (grab(&blk.wk.weight), grab(&blk.wk.bias));
        let (wv, bv) = (grab(&blk.wv.weight), grab(&blk.wv.bias));
        let (wo, bo) = (grab(&blk.wo.weight), grab(&blk.wo.bias));
        let (g1, be1) = (grab(&blk.ln1.gamma), grab(&blk.ln1.beta));
        let (g2, be2) = (grab(&blk.ln2.gamma), grab(&blk.ln2.beta));
        let (w1, b1) = (grab(&blk.ff1.weight), grab(&blk.ff1.bias));
        let (w2, b2) = (grab(&blk.ff2.weight), grab(&blk.ff2.bias));
        let (gf, bf) = (grab(&tf.final_ln.gamma), grab(&tf.final_ln.beta));

        let ln = |row: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mu = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row.len() as f64;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
                .collect()
        };
        let matvec = |row: &[f64], w: &[f64], b: &[f64], out_dim: usize| -> Vec<f64> {
            (0..out_dim)
                .map(|j| row.iter().enumerate().map(|(i, v)| v * w[i * out_dim + j]).sum::<f64>() + b[j])
                .collect()
        };

        // embed + positional
        let mut h: Vec<Vec<f64>> = (0..s)
            .map(|t| {
                (0..d)
                    .map(|i| {
                        let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
                        let ang = t as f64 / rate;
                        x[t * d + i] + if i % 2 == 0 { ang.sin() } else { ang.cos() }
                    })
                    .collect()
            })
            .collect();

        // attention
        let a: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &g1, &be1)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &wq, &bq, d)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &wk, &bk, d)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| matvec(r, &wv, &bv, d)).collect();
        for t in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|u| {
                    q[t].iter().zip(&k[u]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|sc| (sc - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; d];
            for u in 0..s {
                for i in 0..d {
                    ctx[i] += exps[u] / z * v[u][i];
                }
            }
            let o = matvec(&ctx, &wo, &bo, d);
            for i in 0..d {
                h[t][i] += o[i];
            }
        }
        // feed-forward
        let gelu = |x: f64| {
            0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
        };
        for row in h.iter_mut() {
            let f = ln(row, &g2, &be2);
            let mid: Vec<f64> = matvec(&f, &w1, &b1, 8).into_iter().map(gelu).collect();
            let out = matvec(&mid, &w2, &b2, d);
            for i in 0..d {
                row[i] += out[i];
            }
        }
        let expect: Vec<f64> = h.iter().flat_map(|r| ln(r, &gf, &bf)).collect();

        for (i, (a, b)) in got.iter().zip(&expect).enumerate() {
            assert!((a - b).abs() < 1e-9, "mismatch at {i}: {a} vs {b}");
        }
    }

    #[test]
    fn mlm_head_shapes_and_uniform_start() {
        let head = MlmHead::<f64>::new(4, 30);
        let h = Tensor::from_f64_slice(&[0.5; 2 * 7 * 4], &[2, 7, 4]);
        let logits = head.forward(&h);
        assert_eq!(logits.shape(), &[2, 7, 30]);
        assert!(logits.to_vec().iter().all(|v| v.is_finite() && *v == 0.0));
        let p = logits.softmax(2).to_vec();
        for row in p.chunks(30) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
