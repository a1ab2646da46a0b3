//! Differentiable sampling stack for the adversarial masker.
//!
//! - [`gumbel_noise`]: standard Gumbel draws for the reparameterization trick
//! - [`gumbel_softmax`]: Concrete-distribution samples over score rows
//! - [`rss_sampler`]: relaxed subset selection with a per-row budget of
//!   `round(len * rho)` positions, run as repeated Gumbel-Softmax rounds
//! - [`straight_through`]: hard one-hot corruption of the input with the
//!   straight-through gradient identity `hard + p - detach(p)`

use rand::Rng as _;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sampler hyperparameters: masking fraction, Gumbel-Softmax temperature,
/// the mask-floor epsilon for suppressed entries, and the master seed the
/// per-step noise streams derive from.
#[derive(Debug, Clone)]
pub struct SamplerParams {
    pub rho: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl SamplerParams {
    pub fn new(rho: f64, temperature: f64, seed: u64) -> Self {
        assert!(rho > 0.0 && rho < 1.0, "masking fraction must lie in (0, 1)");
        assert!(temperature > 0.0, "sampling temperature must be positive");
        SamplerParams { rho, temperature, epsilon: 1e-18, seed }
    }
}

/// I.i.d. standard Gumbel samples, `-ln(-ln(U))` with the uniform draws
/// clamped away from {0, 1} before the logs.
pub fn gumbel_noise<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| {
            let u = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            S::from_f64(-(-u.ln()).ln())
        })
        .collect();
    Tensor::from_vec(data, shape)
}

/// Concrete-distribution sample along the last dim:
/// `softmax((scores + gumbel) / t)`. Gradients flow into `scores`.
pub fn gumbel_softmax<S: Scalar>(scores: &Tensor<S>, t: f64, rng: &mut Rng) -> Tensor<S> {
    let noise = gumbel_noise::<S>(scores.shape(), rng);
    let last = scores.shape().len() - 1;
    scores
        .add(&noise)
        .mul_scalar(S::from_f64(1.0 / t))
        .softmax(last)
}

/// Relaxed subset selection with a variable per-row budget.
///
/// Each row runs `round(valid_len * rho)` Gumbel-Softmax rounds; a round adds
/// one unit of softmax mass, with already-claimed and invalid positions
/// suppressed through the epsilon-floored `khot` mask. Rows whose budget is
/// exhausted leave the active set and receive no further mass. After the
/// loop, mass at invalid positions and sub-1e-6 residue are zeroed so row
/// sums match budgets exactly.
pub fn rss_sampler<S: Scalar>(
    scores: &Tensor<S>,
    valid: &Tensor<S>,
    rho: f64,
    t: f64,
    rng: &mut Rng,
) -> Tensor<S> {
    let noise = gumbel_noise::<S>(scores.shape(), rng);
    rss_sampler_with_noise(scores, valid, rho, t, &noise)
}

/// [`rss_sampler`] with caller-provided Gumbel noise (for oracle tests that
/// need to share the perturbation).
pub fn rss_sampler_with_noise<S: Scalar>(
    scores: &Tensor<S>,
    valid: &Tensor<S>,
    rho: f64,
    t: f64,
    noise: &Tensor<S>,
) -> Tensor<S> {
    let shape = scores.shape().to_vec();
    assert_eq!(shape.len(), 2, "rss scores must be [batch, seq]");
    assert_eq!(valid.shape(), &shape[..], "validity mask shape mismatch");
    assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
    assert!(t > 0.0, "temperature must be positive");
    scores.assert_finite("rss scores");
    let (b, s) = (shape[0], shape[1]);
    let eps = S::from_f64(1e-18);

    let subset_sizes = row_budgets(&valid.to_f64_vec(), b, s, rho);
    let k_max = subset_sizes.iter().copied().max().unwrap_or(0);
    if k_max == 0 {
        return Tensor::zeros(&shape);
    }

    let mut g = scores.add(noise);
    let mut y_soft = Tensor::<S>::zeros(&shape);
    for round in 0..k_max {
        // Rows still under budget this round, as [b, 1] for broadcasting.
        let active: Vec<S> = subset_sizes
            .iter()
            .map(|&k| if round < k { S::one() } else { S::zero() })
            .collect();
        let active = Tensor::from_vec(active, &[b, 1]);
        let working_mask = valid.mul(&active);

        let khot = y_soft
            .neg()
            .add_scalar(S::one())
            .mul(&working_mask)
            .maximum_scalar(eps);
        g = g.add(&khot.ln());
        let step = g.mul_scalar(S::from_f64(1.0 / t)).softmax(1);
        y_soft = y_soft.add(&step.mul(&active));
    }

    // Cleanup: no mass on invalid positions, and drop the epsilon-suppressed
    // residue so hard budget accounting is exact.
    let y_soft = y_soft.mul(valid);
    let keep = y_soft.gt_scalar(S::from_f64(1e-6));
    y_soft.mul(&keep)
}

/// Per-row subset sizes: `round(valid_len * rho)`.
fn row_budgets(valid: &[f64], b: usize, s: usize, rho: f64) -> Vec<usize> {
    (0..b)
        .map(|r| {
            let len: f64 = valid[r * s..(r + 1) * s].iter().sum();
            (len * rho).round() as usize
        })
        .collect()
}

/// Hard corruption emitted by [`straight_through`], with the per-position
/// decisions needed for provenance tracking.
pub struct StraightThroughOutput<S: Scalar> {
    /// `[batch, seq, vocab]` rows: exact one-hots at masked positions, the
    /// original input elsewhere.
    pub x_tilde: Tensor<S>,
    /// 1 where the position was masked in any mode (p > 0.5, strict).
    pub mask_any: Vec<u8>,
    /// Argmax mask-mode channel per position (0 = `[MASK]`, 1 = keep,
    /// `2 + j` = replace with content token `v_idx + j`); only meaningful
    /// where `mask_any` is set. Absent in simple-masking mode.
    pub mode_choice: Option<Vec<u32>>,
}

/// Straight-through sampler over the three masking modes.
///
/// The hard any-mask decision is `p_overall > 0.5`; both it and the
/// mask-mode argmax are composed as `hard + p - detach(p)`, so forward
/// values are exactly hard while gradients follow the soft probabilities on
/// both sampler paths.
pub fn straight_through<S: Scalar>(
    x: &Tensor<S>,
    p_overall: &Tensor<S>,
    p_mask_type: Option<&Tensor<S>>,
    mask_id: usize,
    v_idx: usize,
) -> StraightThroughOutput<S> {
    let xs = x.shape().to_vec();
    assert_eq!(xs.len(), 3, "input must be one-hot [batch, seq, vocab]");
    let (b, s, vocab) = (xs[0], xs[1], xs[2]);
    assert_eq!(p_overall.shape(), &[b, s], "p_overall shape mismatch");
    assert!(mask_id < vocab && v_idx <= vocab);

    let mask_any: Vec<u8> = p_overall
        .data()
        .iter()
        .map(|&p| u8::from(p.to_f64() > 0.5))
        .collect();
    let hard_any = Tensor::from_vec(
        mask_any.iter().map(|&m| S::from_f64(m as f64)).collect(),
        &[b, s],
    );
    // hard + (p - detach p): value stays exactly hard, gradient is dp
    let m_any = hard_any.add(&p_overall.sub(&p_overall.detach())).reshape(&[b, s, 1]);

    let mut onehot_mask = vec![S::zero(); vocab];
    onehot_mask[mask_id] = S::one();
    let onehot_mask = Tensor::from_vec(onehot_mask, &[vocab]);

    let (x_masked, mode_choice) = match p_mask_type {
        None => (m_any.mul(&onehot_mask), None),
        Some(pt) => {
            let channels = 2 + (vocab - v_idx);
            assert_eq!(
                pt.shape(),
                &[b, s, channels],
                "mask-type scores must carry [MASK]/keep plus one channel per \
                 content token (control tokens are not valid replacements)"
            );
            #[cfg(debug_assertions)]
            for (i, row) in pt.data().chunks_exact(channels).enumerate() {
                let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
                debug_assert!(
                    (sum - 1.0).abs() <= 1e-4 + 1e-6,
                    "p_mask_type row {i} sums to {sum}, expected 1±1e-4"
                );
            }
            let choice = argmax_rows(pt, channels);
            let mut hard = vec![S::zero(); b * s * channels];
            for (i, &c) in choice.iter().enumerate() {
                hard[i * channels + c as usize] = S::one();
            }
            let hard = Tensor::from_vec(hard, &[b, s, channels]);
            let modes = hard.add(&pt.sub(&pt.detach()));

            let m_mask = modes.narrow(2, 0, 1);
            let m_keep = modes.narrow(2, 1, 1);
            let m_replace = modes.narrow(2, 2, channels - 2);

            let mut x_masked = m_mask.mul(&onehot_mask).add(&m_keep.mul(x));
            let replace_full = if v_idx > 0 {
                Tensor::concat(&[Tensor::zeros(&[b, s, v_idx]), m_replace], 2)
            } else {
                m_replace
            };
            x_masked = x_masked.add(&replace_full);
            (x_masked.mul(&m_any), Some(choice))
        }
    };

    // x_tilde = (1 - mask) * x + mask * x_masked; the mask factor is already
    // folded into x_masked above.
    let x_tilde = m_any.neg().add_scalar(S::one()).mul(x).add(&x_masked);

    StraightThroughOutput { x_tilde, mask_any, mode_choice }
}

fn argmax_rows<S: Scalar>(t: &Tensor<S>, row_len: usize) -> Vec<u32> {
    t.data()
        .chunks_exact(row_len)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}
