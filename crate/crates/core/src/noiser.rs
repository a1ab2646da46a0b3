//! The adversarial masker: a GRU scorer whose per-token outputs split into
//! one any-mask score and `2 + V_content` mask-options scores, fed through
//! the budgeted subset sampler and the straight-through sampler to produce
//! the corrupted input.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Vocabulary};
use crate::nn::{Embedding, Gru, GruConfig, Linear};
use crate::rng::{derive_rng, stream, Rng};
use crate::sampling::{gumbel_softmax, rss_sampler, straight_through, SamplerParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-token unnormalized masking scores.
pub struct MaskScores<S: Scalar> {
    /// Channel 0: whether to mask the position at all, `[batch, seq]`.
    pub any_mask: Tensor<S>,
    /// Channels 1..: `[MASK]`, keep-original, and one replace channel per
    /// content token; `[batch, seq, 2 + V_content]`.
    pub mask_options: Tensor<S>,
}

/// How a position came to be scored by the MLM loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    None,
    AdvMask,
    AdvKeep,
    AdvReplace,
    RandMask,
    RandKeep,
    RandReplace,
}

/// Counts of loss positions by provenance tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHistogram {
    pub adv_mask: usize,
    pub adv_keep: usize,
    pub adv_replace: usize,
    pub rand_mask: usize,
    pub rand_keep: usize,
    pub rand_replace: usize,
}

impl MaskHistogram {
    pub fn add(&mut self, tag: Provenance) {
        match tag {
            Provenance::None => {}
            Provenance::AdvMask => self.adv_mask += 1,
            Provenance::AdvKeep => self.adv_keep += 1,
            Provenance::AdvReplace => self.adv_replace += 1,
            Provenance::RandMask => self.rand_mask += 1,
            Provenance::RandKeep => self.rand_keep += 1,
            Provenance::RandReplace => self.rand_replace += 1,
        }
    }

    pub fn merge(&mut self, other: &MaskHistogram) {
        self.adv_mask += other.adv_mask;
        self.adv_keep += other.adv_keep;
        self.adv_replace += other.adv_replace;
        self.rand_mask += other.rand_mask;
        self.rand_keep += other.rand_keep;
        self.rand_replace += other.rand_replace;
    }

    pub fn total(&self) -> usize {
        self.adv_mask
            + self.adv_keep
            + self.adv_replace
            + self.rand_mask
            + self.rand_keep
            + self.rand_replace
    }
}

/// Corrupted batch plus the bookkeeping the loss and metrics need.
#[derive(Clone)]
pub struct NoiseOutcome<S: Scalar> {
    /// `[rows, width, vocab]`; exact one-hot rows everywhere.
    pub x_tilde: Tensor<S>,
    /// 1 where the MLM loss scores the position (masked in any mode).
    pub loss_positions: Vec<u8>,
    /// Per-position tag aligned with `loss_positions`.
    pub provenance: Vec<Provenance>,
    pub rows: usize,
    pub width: usize,
}

impl<S: Scalar> NoiseOutcome<S> {
    /// Untouched input: the identity noising (no loss positions).
    pub fn pass_through(batch: &Batch, vocab: &Vocabulary) -> Self {
        NoiseOutcome {
            x_tilde: batch.one_hot(vocab.size()),
            loss_positions: vec![0; batch.rows * batch.width],
            provenance: vec![Provenance::None; batch.rows * batch.width],
            rows: batch.rows,
            width: batch.width,
        }
    }

    pub fn scored_count(&self) -> usize {
        self.loss_positions.iter().filter(|&&v| v != 0).count()
    }

    pub fn histogram(&self) -> MaskHistogram {
        let mut h = MaskHistogram::default();
        for (&m, &tag) in self.loss_positions.iter().zip(&self.provenance) {
            if m != 0 {
                h.add(tag);
            }
        }
        h
    }
}

/// Histogram over a collection of outcomes; counts sum to the total number
/// of loss positions.
pub fn mask_type_histogram<S: Scalar>(outcomes: &[NoiseOutcome<S>]) -> MaskHistogram {
    let mut h = MaskHistogram::default();
    for o in outcomes {
        h.merge(&o.histogram());
    }
    h
}

/// The noiser network: embedding + GRU + score head over
/// `1 + 2 + V_content` channels per token.
pub struct Noiser<S: Scalar> {
    pub embedding: Embedding<S>,
    pub gru: Gru<S>,
    pub head: Linear<S>,
    vocab_size: usize,
    v_idx: usize,
    mask_id: usize,
}

impl<S: Scalar> Noiser<S> {
    pub fn new(vocab: &Vocabulary, cfg: GruConfig, rng: &mut Rng) -> Self {
        let embedding = Embedding::new(vocab.size(), cfg.embed_dim, rng);
        let gru = Gru::new(cfg, rng);
        let channels = 1 + 2 + vocab.content_size();
        let head = Linear::new(gru.out_dim(), channels, rng);
        Noiser {
            embedding,
            gru,
            head,
            vocab_size: vocab.size(),
            v_idx: vocab.v_idx() as usize,
            mask_id: vocab.mask_id() as usize,
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.embedding.named_params("noiser.embedding", &mut out);
        self.gru.named_params("noiser.gru", &mut out);
        self.head.named_params("noiser.head", &mut out);
        out
    }

    /// Score a batch: run the GRU over the unmasked tokens and split the
    /// head output into any-mask and mask-options channels.
    pub fn scores(&self, batch: &Batch) -> MaskScores<S> {
        let (b, s) = (batch.rows, batch.width);
        let embedded = self.embedding.forward_ids(&batch.tokens, b, s);
        let hidden = self.gru.forward(&embedded, &batch.valid);
        let raw = self.head.forward(&hidden); // [b, s, 1 + 2 + Vc]
        let channels = 1 + 2 + (self.vocab_size - self.v_idx);
        assert_eq!(raw.shape()[2], channels);
        MaskScores {
            any_mask: raw.narrow(2, 0, 1).reshape(&[b, s]),
            mask_options: raw.narrow(2, 1, channels - 1),
        }
    }
}

/// The full noising pass: score, sample the masked subset under the budget,
/// sample mask modes, and corrupt the input. Gradients reach the noiser
/// parameters through both sampler paths.
pub fn run_noiser<S: Scalar>(
    noiser: &Noiser<S>,
    batch: &Batch,
    params: &SamplerParams,
    step: u64,
) -> NoiseOutcome<S> {
    run_noiser_with_probs(noiser, batch, params, step).0
}

/// [`run_noiser`] that also returns the soft any-mask probabilities from
/// the same draw (the mask-inspection surface).
pub fn run_noiser_with_probs<S: Scalar>(
    noiser: &Noiser<S>,
    batch: &Batch,
    params: &SamplerParams,
    step: u64,
) -> (NoiseOutcome<S>, Vec<f64>) {
    let scores = noiser.scores(batch);
    noise_from_scores_with_probs(
        &scores,
        batch,
        noiser.vocab_size,
        noiser.mask_id,
        noiser.v_idx,
        params,
        step,
    )
}

/// [`run_noiser`] below the scorer: useful when tests need to force scores.
pub fn noise_from_scores<S: Scalar>(
    scores: &MaskScores<S>,
    batch: &Batch,
    vocab_size: usize,
    mask_id: usize,
    v_idx: usize,
    params: &SamplerParams,
    step: u64,
) -> NoiseOutcome<S> {
    noise_from_scores_with_probs(scores, batch, vocab_size, mask_id, v_idx, params, step).0
}

fn noise_from_scores_with_probs<S: Scalar>(
    scores: &MaskScores<S>,
    batch: &Batch,
    vocab_size: usize,
    mask_id: usize,
    v_idx: usize,
    params: &SamplerParams,
    step: u64,
) -> (NoiseOutcome<S>, Vec<f64>) {
    let mut rng_any: Rng = derive_rng(params.seed, &[stream::ADV_ANY, step]);
    let mut rng_type: Rng = derive_rng(params.seed, &[stream::ADV_TYPE, step]);

    let valid = batch.valid_tensor::<S>();
    let p_overall = rss_sampler(
        &scores.any_mask,
        &valid,
        params.rho,
        params.temperature,
        &mut rng_any,
    );
    let p_type = gumbel_softmax(&scores.mask_options, params.temperature, &mut rng_type);

    let x = batch.one_hot::<S>(vocab_size);
    let p_any_values = p_overall.to_f64_vec();
    let st = straight_through(&x, &p_overall, Some(&p_type), mask_id, v_idx);

    let modes = st.mode_choice.expect("typed masking always yields mode choices");
    let mut provenance = vec![Provenance::None; batch.rows * batch.width];
    for (i, (&m, &c)) in st.mask_any.iter().zip(&modes).enumerate() {
        if m != 0 {
            debug_assert!(batch.valid[i] != 0, "adversary masked an invalid position");
            provenance[i] = match c {
                0 => Provenance::AdvMask,
                1 => Provenance::AdvKeep,
                _ => Provenance::AdvReplace,
            };
        }
    }
    let outcome = NoiseOutcome {
        x_tilde: st.x_tilde,
        loss_positions: st.mask_any,
        provenance,
        rows: batch.rows,
        width: batch.width,
    };
    (outcome, p_any_values)
}
