//! Multi-layer (optionally bidirectional) GRU over padded batches.
//!
//! The recurrence skips invalid positions: the hidden state carries through
//! them unchanged, and the emitted output at an invalid position is zero.
//! With a bidirectional stack this keeps right-padding out of the backward
//! direction entirely.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::init_uniform;

/// Scorer network dimensions. Defaults are desk-scale stand-ins for the
/// full-size 3-layer / 1024-embedding / 512-hidden configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GruConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
}

impl Default for GruConfig {
    fn default() -> Self {
        GruConfig { num_layers: 3, embed_dim: 128, hidden_dim: 64, bidirectional: true }
    }
}

impl GruConfig {
    pub fn validate(&self) {
        assert!(self.num_layers > 0, "gru num_layers must be positive");
        assert!(self.embed_dim > 0, "gru embed_dim must be positive");
        assert!(self.hidden_dim > 0, "gru hidden_dim must be positive");
    }
}

struct DirectionParams<S: Scalar> {
    w_xr: Tensor<S>,
    w_xz: Tensor<S>,
    w_xn: Tensor<S>,
    w_hr: Tensor<S>,
    w_hz: Tensor<S>,
    w_hn: Tensor<S>,
    b_r: Tensor<S>,
    b_z: Tensor<S>,
    b_n: Tensor<S>,
}

impl<S: Scalar> DirectionParams<S> {
    fn new(in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        DirectionParams {
            w_xr: init_uniform(&[in_dim, hidden], in_dim, rng),
            w_xz: init_uniform(&[in_dim, hidden], in_dim, rng),
            w_xn: init_uniform(&[in_dim, hidden], in_dim, rng),
            w_hr: init_uniform(&[hidden, hidden], hidden, rng),
            w_hz: init_uniform(&[hidden, hidden], hidden, rng),
            w_hn: init_uniform(&[hidden, hidden], hidden, rng),
            b_r: super::init_zeros(&[hidden]),
            b_z: super::init_zeros(&[hidden]),
            b_n: super::init_zeros(&[hidden]),
        }
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w_xr"), self.w_xr.clone()));
        out.push((format!("{prefix}.w_xz"), self.w_xz.clone()));
        out.push((format!("{prefix}.w_xn"), self.w_xn.clone()));
        out.push((format!("{prefix}.w_hr"), self.w_hr.clone()));
        out.push((format!("{prefix}.w_hz"), self.w_hz.clone()));
        out.push((format!("{prefix}.w_hn"), self.w_hn.clone()));
        out.push((format!("{prefix}.b_r"), self.b_r.clone()));
        out.push((format!("{prefix}.b_z"), self.b_z.clone()));
        out.push((format!("{prefix}.b_n"), self.b_n.clone()));
    }

    /// One cell step: returns the new hidden state for a `[batch, in]` input.
    fn step(&self, x: &Tensor<S>, h: &Tensor<S>) -> Tensor<S> {
        let r = x
            .matmul(&self.w_xr)
            .add(&h.matmul(&self.w_hr))
            .add(&self.b_r)
            .sigmoid();
        let z = x
            .matmul(&self.w_xz)
            .add(&h.matmul(&self.w_hz))
            .add(&self.b_z)
            .sigmoid();
        let n = x
            .matmul(&self.w_xn)
            .add(&h.matmul(&self.w_hn).mul(&r))
            .add(&self.b_n)
            .tanh();
        // h' = (1 - z) * n + z * h
        z.neg().add_scalar(S::one()).mul(&n).add(&z.mul(h))
    }
}

struct GruLayer<S: Scalar> {
    fwd: DirectionParams<S>,
    bwd: Option<DirectionParams<S>>,
}

pub struct Gru<S: Scalar> {
    cfg: GruConfig,
    layers: Vec<GruLayer<S>>,
}

impl<S: Scalar> Gru<S> {
    pub fn new(cfg: GruConfig, rng: &mut Rng) -> Self {
        cfg.validate();
        let dir_out = cfg.hidden_dim * if cfg.bidirectional { 2 } else { 1 };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let in_dim = if l == 0 { cfg.embed_dim } else { dir_out };
            layers.push(GruLayer {
                fwd: DirectionParams::new(in_dim, cfg.hidden_dim, rng),
                bwd: cfg
                    .bidirectional
                    .then(|| DirectionParams::new(in_dim, cfg.hidden_dim, rng)),
            });
        }
        Gru { cfg, layers }
    }

    pub fn config(&self) -> &GruConfig {
        &self.cfg
    }

    /// Feature width of the output sequence.
    pub fn out_dim(&self) -> usize {
        self.cfg.hidden_dim * if self.cfg.bidirectional { 2 } else { 1 }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.fwd.named_params(&format!("{prefix}.l{l}.fwd"), out);
            if let Some(bwd) = &layer.bwd {
                bwd.named_params(&format!("{prefix}.l{l}.bwd"), out);
            }
        }
    }

    /// Run the stack over `[batch, seq, embed]` with a 0/1 validity mask of
    /// shape `[batch, seq]`. Output is `[batch, seq, out_dim]`, zero at
    /// invalid positions.
    pub fn forward(&self, x: &Tensor<S>, valid: &[u8]) -> Tensor<S> {
        let shape = x.shape().to_vec();
        assert_eq!(shape.len(), 3, "gru input must be [batch, seq, embed]");
        let (b, s) = (shape[0], shape[1]);
        assert_eq!(valid.len(), b * s, "validity mask does not match batch shape");

        // Per-step mask columns [b, 1], shared by every layer.
        let mask_cols: Vec<Tensor<S>> = (0..s)
            .map(|t| {
                let col: Vec<S> = (0..b)
                    .map(|r| if valid[r * s + t] != 0 { S::one() } else { S::zero() })
                    .collect();
                Tensor::from_vec(col, &[b, 1])
            })
            .collect();

        let mut layer_in = x.clone();
        for layer in &self.layers {
            let fwd = run_direction(&layer.fwd, &layer_in, &mask_cols, self.cfg.hidden_dim, false);
            layer_in = match &layer.bwd {
                Some(bwd) => {
                    let rev = run_direction(bwd, &layer_in, &mask_cols, self.cfg.hidden_dim, true);
                    Tensor::concat(&[fwd, rev], 2)
                }
                None => fwd,
            };
        }
        layer_in
    }
}

fn run_direction<S: Scalar>(
    p: &DirectionParams<S>,
    x: &Tensor<S>,
    mask_cols: &[Tensor<S>],
    hidden: usize,
    reverse: bool,
) -> Tensor<S> {
    let shape = x.shape();
    let (b, s, e) = (shape[0], shape[1], shape[2]);
    let mut h = Tensor::zeros(&[b, hidden]);
    let mut outs: Vec<Option<Tensor<S>>> = (0..s).map(|_| None).collect();
    let order: Vec<usize> = if reverse { (0..s).rev().collect() } else { (0..s).collect() };
    for t in order {
        let xt = x.narrow(1, t, 1).reshape(&[b, e]);
        let m = &mask_cols[t];
        let h_new = p.step(&xt, &h);
        // Carry the old state through invalid positions.
        h = m.mul(&h_new).add(&m.neg().add_scalar(S::one()).mul(&h));
        outs[t] = Some(h.mul(m).reshape(&[b, 1, hidden]));
    }
    let parts: Vec<Tensor<S>> = outs.into_iter().map(|o| o.unwrap()).collect();
    Tensor::concat(&parts, 1)
}
