//! Masked-language-model objective: classical random masking with the
//! 80-10-10 mode split, the reconstruction loss over scored positions, and
//! the encoder forward glue.

use rand::Rng as _;

use crate::data::{Batch, Vocabulary};
use crate::nn::{Embedding, MlmHead, Transformer, TransformerConfig};
use crate::noiser::{run_noiser, NoiseOutcome, Noiser, Provenance};
use crate::rng::{derive_rng, stream};
use crate::sampling::SamplerParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The pre-trained model: soft-input embedding, transformer stack, MLM head.
pub struct Encoder<S: Scalar> {
    pub embedding: Embedding<S>,
    pub transformer: Transformer<S>,
    pub head: MlmHead<S>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(vocab: &Vocabulary, cfg: TransformerConfig, rng: &mut crate::rng::Rng) -> Self {
        let embedding = Embedding::new(vocab.size(), cfg.model_dim, rng);
        let head = MlmHead::new(cfg.model_dim, vocab.size());
        let transformer = Transformer::new(cfg, rng);
        Encoder { embedding, transformer, head }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.embedding.named_params("encoder.embedding", &mut out);
        self.transformer.named_params("encoder.transformer", &mut out);
        self.head.named_params("encoder.head", &mut out);
        out
    }

    /// Logits `[rows, width, vocab]` from a soft one-hot input.
    pub fn forward_soft(
        &self,
        x_tilde: &Tensor<S>,
        valid: &[u8],
        drop_rng: Option<&mut crate::rng::Rng>,
    ) -> Tensor<S> {
        let embedded = self.embedding.forward_soft(x_tilde);
        let hidden = self.transformer.forward(&embedded, valid, drop_rng);
        self.head.forward(&hidden)
    }
}

/// Loss summary for one batch.
#[derive(Debug, Clone)]
pub struct LossReport {
    /// Mean cross-entropy over loss positions (0.0 when none were scored).
    pub total_loss: f64,
    /// Per-position NLL, zero outside loss positions; `[rows * width]`.
    pub per_position_nll: Vec<f64>,
    /// Fraction of loss positions where argmax(logits) recovers the token.
    pub masked_accuracy: f64,
    pub scored_count: usize,
    /// Set when the batch had zero scored positions.
    pub degenerate: bool,
}

/// Mean token-level cross-entropy between `logits` and the original tokens,
/// restricted to `loss_mask` positions. Positions outside the mask
/// contribute exactly zero.
pub fn masked_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[u32],
    loss_mask: &[u8],
) -> (Tensor<S>, LossReport) {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 3, "logits must be [rows, width, vocab]");
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    assert_eq!(targets.len(), b * s);
    assert_eq!(loss_mask.len(), b * s);

    let scored_count = loss_mask.iter().filter(|&&m| m != 0).count();

    let mut onehot = vec![S::zero(); b * s * v];
    for (i, &t) in targets.iter().enumerate() {
        assert!((t as usize) < v, "target id {t} out of range");
        onehot[i * v + t as usize] = S::one();
    }
    let onehot = Tensor::from_vec(onehot, &[b, s, v]);
    let mask = Tensor::from_vec(
        loss_mask
            .iter()
            .map(|&m| if m != 0 { S::one() } else { S::zero() })
            .collect(),
        &[b, s],
    );

    let logp = logits.log_softmax(2);
    let nll = logp.mul(&onehot).sum_axis(2, false).neg(); // [b, s]
    let masked_nll = nll.mul(&mask);
    let loss = if scored_count > 0 {
        masked_nll
            .sum_all()
            .mul_scalar(S::one() / S::from_f64(scored_count as f64))
    } else {
        Tensor::zeros(&[])
    };

    // report values
    let per_position_nll = masked_nll.to_f64_vec();
    let mut correct = 0usize;
    {
        let lv = logits.data();
        for i in 0..b * s {
            if loss_mask[i] == 0 {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let mut best = 0usize;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            if best == targets[i] as usize {
                correct += 1;
            }
        }
    }
    let report = LossReport {
        total_loss: loss.item().to_f64(),
        per_position_nll,
        masked_accuracy: if scored_count > 0 { correct as f64 / scored_count as f64 } else { 0.0 },
        scored_count,
        degenerate: scored_count == 0,
    };
    (loss, report)
}

/// Mean NLL split by adversarial vs random provenance.
pub fn loss_split(report: &LossReport, provenance: &[Provenance]) -> (Option<f64>, Option<f64>) {
    let mut adv = (0.0, 0usize);
    let mut rand = (0.0, 0usize);
    for (&nll, &tag) in report.per_position_nll.iter().zip(provenance) {
        match tag {
            Provenance::AdvMask | Provenance::AdvKeep | Provenance::AdvReplace => {
                adv = (adv.0 + nll, adv.1 + 1);
            }
            Provenance::RandMask | Provenance::RandKeep | Provenance::RandReplace => {
                rand = (rand.0 + nll, rand.1 + 1);
            }
            Provenance::None => {}
        }
    }
    (
        (adv.1 > 0).then(|| adv.0 / adv.1 as f64),
        (rand.1 > 0).then(|| rand.0 / rand.1 as f64),
    )
}

/// Classical random masking: each valid token is masked independently with
/// probability `rate`, split 80-10-10 into `[MASK]`/keep/replace; replace
/// draws uniformly from content tokens.
pub fn random_mask<S: Scalar>(
    batch: &Batch,
    vocab: &Vocabulary,
    rate: f64,
    seed: u64,
    step: u64,
) -> NoiseOutcome<S> {
    apply_random_masking(NoiseOutcome::pass_through(batch, vocab), batch, vocab, rate, seed, step)
}

/// Overlay random masking (at `rate`) onto an existing outcome, restricted
/// to valid positions it has not already claimed. Collisions with the base
/// outcome are impossible by construction.
pub fn apply_random_masking<S: Scalar>(
    base: NoiseOutcome<S>,
    batch: &Batch,
    vocab: &Vocabulary,
    rate: f64,
    seed: u64,
    step: u64,
) -> NoiseOutcome<S> {
    assert!((0.0..1.0).contains(&rate), "random masking rate must lie in [0, 1)");
    let (b, s) = (batch.rows, batch.width);
    let v = vocab.size();
    let v_idx = vocab.v_idx() as usize;
    let content = vocab.content_size();

    let mut loss_positions = base.loss_positions.clone();
    let mut provenance = base.provenance.clone();
    let mut rand_any = vec![S::zero(); b * s];
    let mut overlay = vec![S::zero(); b * s * v];
    let mut any_hit = false;

    for row in 0..b {
        let mut rng = derive_rng(seed, &[stream::RAND_MASK, step, row as u64]);
        for col in 0..s {
            let i = row * s + col;
            if batch.valid[i] == 0 || base.loss_positions[i] != 0 {
                continue;
            }
            if rng.gen::<f64>() >= rate {
                continue;
            }
            let mode = rng.gen::<f64>();
            let (tag, token) = if mode < 0.8 {
                (Provenance::RandMask, vocab.mask_id())
            } else if mode < 0.9 {
                (Provenance::RandKeep, batch.tokens[i])
            } else {
                let repl = v_idx as u32 + rng.gen_range(0..content) as u32;
                (Provenance::RandReplace, repl)
            };
            loss_positions[i] = 1;
            provenance[i] = tag;
            rand_any[i] = S::one();
            overlay[i * v + token as usize] = S::one();
            any_hit = true;
        }
    }

    let x_tilde = if any_hit {
        let rand_mask = Tensor::from_vec(rand_any, &[b, s, 1]);
        let overlay = Tensor::from_vec(overlay, &[b, s, v]);
        base.x_tilde
            .mul(&rand_mask.neg().add_scalar(S::one()))
            .add(&overlay)
    } else {
        base.x_tilde
    };

    NoiseOutcome { x_tilde, loss_positions, provenance, rows: b, width: s }
}

/// Which corruption feeds the encoder.
pub enum NoisingSource<'a, S: Scalar> {
    /// Adversarial masking at `params.rho` plus random masking at
    /// `rho_rand` of all valid tokens (drawn over the positions the
    /// adversary left untouched). With `track_noiser` unset, the corrupted
    /// input is detached so no gradient reaches the noiser.
    Adversarial {
        noiser: &'a Noiser<S>,
        params: &'a SamplerParams,
        rho_rand: f64,
        track_noiser: bool,
    },
    /// Baseline: random masking only, at `rate`.
    RandomOnly { rate: f64 },
    /// Evaluate a pre-built outcome.
    Provided(&'a NoiseOutcome<S>),
}

pub struct EncoderRun<S: Scalar> {
    pub loss: Tensor<S>,
    pub report: LossReport,
    pub outcome: NoiseOutcome<S>,
}

/// Corrupt a batch per `source`, run the encoder, and score reconstruction
/// at the loss positions.
pub fn run_encoder<S: Scalar>(
    source: NoisingSource<'_, S>,
    encoder: &Encoder<S>,
    batch: &Batch,
    vocab: &Vocabulary,
    seed: u64,
    step: u64,
    dropout_active: bool,
) -> EncoderRun<S> {
    let outcome = match source {
        NoisingSource::Adversarial { noiser, params, rho_rand, track_noiser } => {
            let adv = run_noiser(noiser, batch, params, step);
            let adv = if track_noiser {
                adv
            } else {
                NoiseOutcome { x_tilde: adv.x_tilde.detach(), ..adv }
            };
            // Spread the nominal random share over the tokens the adversary
            // left untouched so the realized total stays rho + rho_rand.
            let rate_eff = rho_rand / (1.0 - params.rho);
            apply_random_masking(adv, batch, vocab, rate_eff, seed, step)
        }
        NoisingSource::RandomOnly { rate } => random_mask(batch, vocab, rate, seed, step),
        NoisingSource::Provided(outcome) => outcome.clone(),
    };

    let mut drop_rng;
    let drop = if dropout_active {
        drop_rng = derive_rng(seed, &[stream::DROPOUT, step]);
        Some(&mut drop_rng)
    } else {
        None
    };
    let logits = encoder.forward_soft(&outcome.x_tilde, &batch.valid, drop);
    let (loss, report) = masked_cross_entropy(&logits, &batch.tokens, &outcome.loss_positions);
    EncoderRun { loss, report, outcome }
}
