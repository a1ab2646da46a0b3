//! The adversarial optimization engine: AdamW with decoupled weight decay,
//! the alternating noiser/encoder schedule, deterministic batching, metrics
//! emission, and checkpointing.

pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Batch, Vocabulary};
use crate::error::TrainError;
use crate::mlm::{loss_split, random_mask, run_encoder, Encoder, NoisingSource};
use crate::nn::{GruConfig, TransformerConfig};
use crate::noiser::{MaskHistogram, Noiser};
use crate::rng::{derive_rng, mix, stream};
use crate::sampling::SamplerParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moment buffers aligned with a parameter
/// list, plus the step counter driving bias correction.
pub struct AdamWState<S: Scalar> {
    pub cfg: OptimConfig,
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(params: &[(String, Tensor<S>)], cfg: OptimConfig) -> Self {
        let m = params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect();
        AdamWState { cfg, step: 0, m, v }
    }

    pub(crate) fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// One AdamW update over `params`, consuming and zeroing their accumulated
/// gradients. Decay is decoupled: applied directly to the weights, never
/// through the moments. A missing gradient counts as zero (decay still
/// applies). Any non-finite gradient aborts the whole step untouched.
pub fn adamw_step<S: Scalar>(
    state: &mut AdamWState<S>,
    params: &[(String, Tensor<S>)],
    global_step: u64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match param list");
    let grads: Vec<Option<Vec<S>>> = params.iter().map(|(_, p)| p.grad()).collect();
    for ((name, _), g) in params.iter().zip(&grads) {
        if let Some(g) = g {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    name: name.clone(),
                    step: global_step,
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let lr = S::from_f64(state.cfg.lr);
    let wd = S::from_f64(state.cfg.weight_decay);
    let b1 = S::from_f64(state.cfg.beta1);
    let b2 = S::from_f64(state.cfg.beta2);
    let eps = S::from_f64(state.cfg.eps);
    let bc1 = S::from_f64(1.0 - state.cfg.beta1.powf(t));
    let bc2 = S::from_f64(1.0 - state.cfg.beta2.powf(t));
    let one = S::one();

    for (((_, p), g), (m, v)) in params
        .iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let mut data = p.to_vec();
        let zero_grad;
        let g: &[S] = match g {
            Some(g) => {
                zero_grad = false;
                g
            }
            None => {
                zero_grad = true;
                &[]
            }
        };
        for i in 0..data.len() {
            let gi = if zero_grad { S::zero() } else { g[i] };
            data[i] = data[i] * (one - lr * wd);
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(data);
        p.zero_grad();
    }
    Ok(())
}

/// Which player the next update step trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    PreTrainingNoising,
    PreTrainingEncoding,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::PreTrainingNoising => "noiser",
            Phase::PreTrainingEncoding => "encoder",
        }
    }
}

/// Engine-level training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub gru: GruConfig,
    pub transformer: TransformerConfig,
    pub rho_adv: f64,
    pub rho_rand: f64,
    pub temperature: f64,
    /// Linear anneal target for the temperature over the run; fixed when
    /// absent.
    pub anneal_to: Option<f64>,
    pub optim: OptimConfig,
    pub n_noiser: u64,
    pub n_encoder: u64,
    pub batch_size: usize,
    pub max_len: usize,
    pub max_steps: u64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Steps between held-out probe evaluations; 0 disables probing.
    pub probe_interval: u64,
    /// Sequences held out from the training stream for the probe.
    pub probe_count: usize,
    /// Probes without improvement before stopping early; 0 disables.
    pub early_stop_patience: u64,
    /// Optional encoder-only steps before the alternation starts.
    pub warmup_encoder_steps: u64,
    /// Disable the noiser and mask randomly at `rho_adv + rho_rand`.
    pub baseline: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gru: GruConfig::default(),
            transformer: TransformerConfig::default(),
            rho_adv: 0.10,
            rho_rand: 0.10,
            // Low enough that each selection round concentrates its unit of
            // softmax mass, so thresholded hard masks realize the 10% budget
            // even for flat (untrained) scores.
            temperature: 0.2,
            anneal_to: None,
            optim: OptimConfig::default(),
            n_noiser: 10,
            n_encoder: 10,
            batch_size: 32,
            max_len: 64,
            max_steps: 1000,
            checkpoint_interval: 0,
            probe_interval: 0,
            probe_count: 0,
            early_stop_patience: 0,
            warmup_encoder_steps: 0,
            baseline: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn total_mask_rate(&self) -> f64 {
        self.rho_adv + self.rho_rand
    }

    /// Temperature at step `i` (1-based) under the optional linear anneal.
    pub fn temperature_at(&self, i: u64) -> f64 {
        match self.anneal_to {
            None => self.temperature,
            Some(t_end) => {
                if self.max_steps <= 1 {
                    return t_end;
                }
                let frac = (i.saturating_sub(1)) as f64 / (self.max_steps - 1) as f64;
                self.temperature + (t_end - self.temperature) * frac
            }
        }
    }

    fn sampler_params(&self, step: u64) -> SamplerParams {
        SamplerParams::new(self.rho_adv, self.temperature_at(step), self.seed)
    }
}

/// Everything the run mutates: both players, their optimizer states, the
/// step counter, the phase flag, and the master seed (which, together with
/// the step counter, fully determines every random stream).
pub struct TrainState<S: Scalar> {
    pub noiser: Noiser<S>,
    pub encoder: Encoder<S>,
    pub opt_noiser: AdamWState<S>,
    pub opt_encoder: AdamWState<S>,
    /// Completed update steps.
    pub step: u64,
    pub phase: Phase,
    pub seed: u64,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: &TrainConfig, vocab: &Vocabulary) -> Self {
        let mut noiser_rng = derive_rng(cfg.seed, &[stream::INIT_NOISER]);
        let mut encoder_rng = derive_rng(cfg.seed, &[stream::INIT_ENCODER]);
        let noiser = Noiser::new(vocab, cfg.gru.clone(), &mut noiser_rng);
        let encoder = Encoder::new(vocab, cfg.transformer.clone(), &mut encoder_rng);
        let opt_noiser = AdamWState::new(&noiser.named_params(), cfg.optim.clone());
        let opt_encoder = AdamWState::new(&encoder.named_params(), cfg.optim.clone());
        let phase = if cfg.baseline || cfg.warmup_encoder_steps > 0 {
            Phase::PreTrainingEncoding
        } else {
            Phase::PreTrainingNoising
        };
        TrainState {
            noiser,
            encoder,
            opt_noiser,
            opt_encoder,
            step: 0,
            phase,
            seed: cfg.seed,
        }
    }

    fn zero_all_grads(&self) {
        for (_, p) in self.noiser.named_params() {
            p.zero_grad();
        }
        for (_, p) in self.encoder.named_params() {
            p.zero_grad();
        }
    }
}

/// Per-step metrics record (one NDJSON object per step).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub mode: String,
    pub mlm_loss: f64,
    pub masked_accuracy: f64,
    pub scored: usize,
    pub adv_loss: Option<f64>,
    pub rand_loss: Option<f64>,
    pub hist: MaskHistogram,
    pub probe_loss: Option<f64>,
    pub wall_clock_ms: f64,
}

impl StepRecord {
    /// Equality over everything except wall-clock timing; used by the
    /// determinism checks, since timing is the one legitimately
    /// non-reproducible field.
    pub fn same_modulo_timing(&self, other: &StepRecord) -> bool {
        self.step == other.step
            && self.mode == other.mode
            && self.mlm_loss == other.mlm_loss
            && self.masked_accuracy == other.masked_accuracy
            && self.scored == other.scored
            && self.adv_loss == other.adv_loss
            && self.rand_loss == other.rand_loss
            && self.hist == other.hist
            && self.probe_loss == other.probe_loss
    }
}

pub trait MetricsSink {
    fn record(&mut self, rec: &StepRecord) -> std::io::Result<()>;
}

/// NDJSON metrics stream: one UTF-8 JSON object per line.
pub struct NdjsonSink<W: Write> {
    out: W,
}

impl<W: Write> NdjsonSink<W> {
    pub fn new(out: W) -> Self {
        NdjsonSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for NdjsonSink<W> {
    fn record(&mut self, rec: &StepRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// In-memory sink for tests and programmatic runs.
#[derive(Default)]
pub struct VecSink(pub Vec<StepRecord>);

impl MetricsSink for VecSink {
    fn record(&mut self, rec: &StepRecord) -> std::io::Result<()> {
        self.0.push(rec.clone());
        Ok(())
    }
}

/// One noiser ascent step: gradient step on the
/// negated reconstruction loss, touching only the noiser parameters.
pub fn update_noiser<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    batch: &Batch,
    vocab: &Vocabulary,
    step: u64,
) -> Result<StepRecord, TrainError> {
    assert_eq!(
        state.phase,
        Phase::PreTrainingNoising,
        "update_noiser called outside the noising phase"
    );
    let started = Instant::now();
    state.zero_all_grads();
    let params = cfg.sampler_params(step);
    let run = run_encoder(
        NoisingSource::Adversarial {
            noiser: &state.noiser,
            params: &params,
            rho_rand: cfg.rho_rand,
            track_noiser: true,
        },
        &state.encoder,
        batch,
        vocab,
        cfg.seed,
        step,
        false,
    );
    if !run.report.degenerate {
        run.loss.neg().backward();
        adamw_step(&mut state.opt_noiser, &state.noiser.named_params(), step)?;
    }
    state.step = step;
    Ok(make_record(state.phase, step, &run, started))
}

/// One encoder descent step. The noiser samples
/// with Gumbel noise active but its output is detached, so no gradient is
/// retained for it.
pub fn update_encoder<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    batch: &Batch,
    vocab: &Vocabulary,
    step: u64,
) -> Result<StepRecord, TrainError> {
    assert_eq!(
        state.phase,
        Phase::PreTrainingEncoding,
        "update_encoder called outside the encoding phase"
    );
    let started = Instant::now();
    state.zero_all_grads();
    let params = cfg.sampler_params(step);
    let source = if cfg.baseline {
        NoisingSource::RandomOnly { rate: cfg.total_mask_rate() }
    } else {
        NoisingSource::Adversarial {
            noiser: &state.noiser,
            params: &params,
            rho_rand: cfg.rho_rand,
            track_noiser: false,
        }
    };
    let dropout_active = cfg.transformer.dropout_rate > 0.0;
    let run = run_encoder(source, &state.encoder, batch, vocab, cfg.seed, step, dropout_active);
    if !run.report.degenerate {
        run.loss.backward();
        adamw_step(&mut state.opt_encoder, &state.encoder.named_params(), step)?;
    }
    state.step = step;
    Ok(make_record(state.phase, step, &run, started))
}

fn make_record<S: Scalar>(
    phase: Phase,
    step: u64,
    run: &crate::mlm::EncoderRun<S>,
    started: Instant,
) -> StepRecord {
    let (adv_loss, rand_loss) = loss_split(&run.report, &run.outcome.provenance);
    StepRecord {
        step,
        mode: phase.as_str().to_string(),
        mlm_loss: run.report.total_loss,
        masked_accuracy: run.report.masked_accuracy,
        scored: run.report.scored_count,
        adv_loss,
        rand_loss,
        hist: run.outcome.histogram(),
        probe_loss: None,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Deterministic batch stream: sequential epochs over a seed-shuffled
/// corpus, reshuffled per epoch. Step indices are 1-based.
pub struct BatchStream<'a> {
    corpus: &'a [String],
    vocab: &'a Vocabulary,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    batches_per_epoch: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        corpus: &'a [String],
        vocab: &'a Vocabulary,
        batch_size: usize,
        max_len: usize,
        seed: u64,
    ) -> Self {
        assert!(!corpus.is_empty());
        let bpe = corpus.len().div_ceil(batch_size) as u64;
        BatchStream {
            corpus,
            vocab,
            batch_size,
            max_len,
            seed,
            batches_per_epoch: bpe,
            cached_epoch: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        let stale = !matches!(&self.cached_epoch, Some((e, _)) if *e == epoch);
        if stale {
            let mut perm: Vec<usize> = (0..self.corpus.len()).collect();
            let mut rng = derive_rng(self.seed, &[stream::SHUFFLE, epoch]);
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            self.cached_epoch = Some((epoch, perm));
        }
        &self.cached_epoch.as_ref().unwrap().1
    }

    /// The batch for (1-based) step `i`.
    pub fn get_batch(&mut self, i: u64) -> Batch {
        let epoch = (i - 1) / self.batches_per_epoch;
        let idx = ((i - 1) % self.batches_per_epoch) as usize;
        let corpus = self.corpus;
        let vocab = self.vocab;
        let (batch_size, max_len) = (self.batch_size, self.max_len);
        let perm = self.permutation(epoch);
        let lo = idx * batch_size;
        let hi = (lo + batch_size).min(perm.len());
        let seqs: Vec<String> = perm[lo..hi].iter().map(|&j| corpus[j].clone()).collect();
        let (batch, _) = make_batch(&seqs, vocab, max_len);
        batch
    }
}

pub struct TrainOutput {
    pub state: TrainState<f32>,
    pub steps_run: u64,
    pub stopped_early: bool,
    pub final_probe_loss: Option<f64>,
}

/// The full training loop: draw a batch per step, update the player the
/// phase selects, flip the phase on cycle boundaries, emit one metrics
/// record per step, checkpoint periodically, stop at `max_steps` (or on a
/// probe-loss plateau when early stopping is enabled).
pub fn train(
    cfg: &TrainConfig,
    corpus: &[String],
    vocab: &Vocabulary,
    sink: &mut dyn MetricsSink,
    checkpoint_dir: Option<&Path>,
    resume: Option<TrainState<f32>>,
    fingerprint: [u8; 32],
) -> Result<TrainOutput, TrainError> {
    train_capped(cfg, corpus, vocab, sink, checkpoint_dir, resume, fingerprint, None)
}

/// [`train`] with an invocation-level step cap: run at most `stop_after`
/// update steps this call, checkpoint, and return (a controlled stand-in
/// for interrupting a long run; the config, and thus the fingerprint, is
/// untouched).
#[allow(clippy::too_many_arguments)]
pub fn train_capped(
    cfg: &TrainConfig,
    corpus: &[String],
    vocab: &Vocabulary,
    sink: &mut dyn MetricsSink,
    checkpoint_dir: Option<&Path>,
    resume: Option<TrainState<f32>>,
    fingerprint: [u8; 32],
    stop_after: Option<u64>,
) -> Result<TrainOutput, TrainError> {
    if corpus.is_empty() || corpus.len() <= cfg.probe_count {
        return Err(TrainError::EmptyCorpus);
    }
    let (train_seqs, probe_seqs) = corpus.split_at(corpus.len() - cfg.probe_count);
    let probe_batches: Vec<Batch> = if cfg.probe_count > 0 {
        crate::data::make_batches(probe_seqs, vocab, cfg.max_len, cfg.batch_size)
    } else {
        Vec::new()
    };

    let mut state = resume.unwrap_or_else(|| TrainState::new(cfg, vocab));
    let mut stream = BatchStream::new(train_seqs, vocab, cfg.batch_size, cfg.max_len, cfg.seed);

    let mut best_probe = f64::INFINITY;
    let mut patience_used = 0u64;
    let mut stopped_early = false;
    let mut final_probe = None;
    let mut steps_run = 0u64;

    let start_step = state.step;
    let mut i = start_step;
    while i < cfg.max_steps {
        if let Some(cap) = stop_after {
            if steps_run >= cap {
                break;
            }
        }
        i += 1;
        let batch = stream.get_batch(i);
        let in_warmup = i <= cfg.warmup_encoder_steps;
        let mut rec = match state.phase {
            Phase::PreTrainingNoising => update_noiser(&mut state, cfg, &batch, vocab, i)?,
            Phase::PreTrainingEncoding => update_encoder(&mut state, cfg, &batch, vocab, i)?,
        };
        steps_run += 1;

        // Phase flips per the alternation schedule (warmup steps and the
        // baseline never alternate).
        if !cfg.baseline {
            if in_warmup {
                if i == cfg.warmup_encoder_steps {
                    state.phase = Phase::PreTrainingNoising;
                }
            } else {
                let i_eff = i - cfg.warmup_encoder_steps;
                state.phase = match state.phase {
                    Phase::PreTrainingNoising if i_eff.is_multiple_of(cfg.n_noiser) => {
                        Phase::PreTrainingEncoding
                    }
                    Phase::PreTrainingEncoding if i_eff.is_multiple_of(cfg.n_encoder) => {
                        Phase::PreTrainingNoising
                    }
                    phase => phase,
                };
            }
        }

        if cfg.probe_interval > 0 && !probe_batches.is_empty() && i.is_multiple_of(cfg.probe_interval) {
            let p = probe_loss(&state, cfg, &probe_batches, vocab);
            rec.probe_loss = Some(p);
            final_probe = Some(p);
            if cfg.early_stop_patience > 0 {
                if p < best_probe {
                    best_probe = p;
                    patience_used = 0;
                } else {
                    patience_used += 1;
                }
            }
        }
        sink.record(&rec)?;

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_interval > 0 && i.is_multiple_of(cfg.checkpoint_interval) {
                checkpoint::save_checkpoint(&state, &checkpoint_path(dir, i), fingerprint)?;
            }
        }

        if cfg.early_stop_patience > 0 && patience_used >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    if let Some(dir) = checkpoint_dir {
        if state.step > start_step || state.step == 0 {
            checkpoint::save_checkpoint(&state, &checkpoint_path(dir, state.step), fingerprint)?;
        }
    }

    Ok(TrainOutput { state, steps_run, stopped_early, final_probe_loss: final_probe })
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Mean encoder loss on the held-out probe under fixed random masking
/// (same masks on every evaluation).
pub fn probe_loss<S: Scalar>(
    state: &TrainState<S>,
    cfg: &TrainConfig,
    probe_batches: &[Batch],
    vocab: &Vocabulary,
) -> f64 {
    let probe_seed = mix(cfg.seed, stream::PROBE);
    let mut total = 0.0;
    let mut count = 0usize;
    for (pi, batch) in probe_batches.iter().enumerate() {
        let outcome =
            random_mask::<S>(batch, vocab, cfg.total_mask_rate(), probe_seed, pi as u64);
        let run = run_encoder(
            NoisingSource::Provided(&outcome),
            &state.encoder,
            batch,
            vocab,
            probe_seed,
            pi as u64,
            false,
        );
        total += run.report.total_loss * run.report.scored_count as f64;
        count += run.report.scored_count;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            gru: GruConfig { num_layers: 1, embed_dim: 6, hidden_dim: 4, bidirectional: true },
            transformer: TransformerConfig {
                num_layers: 1,
                num_heads: 2,
                model_dim: 12,
                ff_dim: 24,
                max_seq_len: 16,
                dropout_rate: 0.0,
            },
            batch_size: 4,
            max_len: 12,
            max_steps: 40,
            optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() },
            seed,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(seed: u64, count: usize) -> (Vocabulary, Vec<String>) {
        let vocab = Vocabulary::amino();
        let mut rng = derive_rng(seed, &[stream::SYNTH]);
        let corpus =
            synth_corpus(&SynthSpec::Uniform { count, len: 8 }, &vocab, &mut rng).unwrap();
        (vocab, corpus)
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let p = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]);
        let params = vec![("p".to_string(), p.clone())];
        let mut st = AdamWState::new(
            &params,
            OptimConfig { lr: 0.1, weight_decay: 0.0, ..OptimConfig::default() },
        );
        adamw_step(&mut st, &params, 1).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_decay_with_zero_grad_shrinks_weights() {
        let p = Tensor::<f64>::param(vec![2.0], &[1]);
        let params = vec![("p".to_string(), p.clone())];
        let mut st = AdamWState::new(
            &params,
            OptimConfig { lr: 0.5, weight_decay: 0.1, ..OptimConfig::default() },
        );
        adamw_step(&mut st, &params, 1).unwrap();
        assert!((p.to_vec()[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn adamw_optimizes_quadratic() {
        // minimize (x - 3)^2 from 0: 500 steps at lr 0.1 reach 3 within 1e-3
        let p = Tensor::<f64>::param(vec![0.0], &[1]);
        let params = vec![("x".to_string(), p.clone())];
        let mut st = AdamWState::new(
            &params,
            OptimConfig { lr: 0.1, weight_decay: 0.0, ..OptimConfig::default() },
        );
        for step in 0..500 {
            p.zero_grad();
            let diff = p.add_scalar(-3.0);
            diff.mul(&diff).sum_all().backward();
            adamw_step(&mut st, &params, step).unwrap();
        }
        assert!((p.to_vec()[0] - 3.0).abs() < 1e-3, "got {}", p.to_vec()[0]);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let p = Tensor::<f64>::param(vec![1.0], &[1]);
        let before = p.to_vec();
        let params = vec![("p".to_string(), p.clone())];
        let mut st = AdamWState::new(&params, OptimConfig::default());
        // poison the gradient
        let bad = p.mul_scalar(f64::INFINITY);
        bad.sum_all().backward();
        let err = adamw_step(&mut st, &params, 7);
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { .. })));
        assert_eq!(p.to_vec(), before, "aborted step must not touch params");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn mode_sequence_is_ten_ten_alternation() {
        let (vocab, corpus) = tiny_corpus(1, 16);
        let cfg = tiny_cfg(1);
        let mut sink = VecSink::default();
        let out = train(&cfg, &corpus, &vocab, &mut sink, None, None, [0; 32]).unwrap();
        assert_eq!(out.steps_run, 40);
        let modes: Vec<&str> = sink.0.iter().map(|r| r.mode.as_str()).collect();
        let mut expect = Vec::new();
        for cycle in 0..2 {
            let _ = cycle;
            expect.extend(std::iter::repeat_n("noiser", 10));
            expect.extend(std::iter::repeat_n("encoder", 10));
        }
        assert_eq!(modes, expect);
    }

    #[test]
    fn max_steps_zero_returns_initial_state() {
        let (vocab, corpus) = tiny_corpus(2, 8);
        let cfg = TrainConfig { max_steps: 0, ..tiny_cfg(2) };
        let fresh = TrainState::<f32>::new(&cfg, &vocab);
        let before: Vec<Vec<f32>> = fresh
            .noiser
            .named_params()
            .iter()
            .chain(fresh.encoder.named_params().iter())
            .map(|(_, p)| p.to_vec())
            .collect();
        let mut sink = VecSink::default();
        let out = train(&cfg, &corpus, &vocab, &mut sink, None, Some(fresh), [0; 32]).unwrap();
        assert_eq!(out.steps_run, 0);
        assert!(sink.0.is_empty());
        let after: Vec<Vec<f32>> = out
            .state
            .noiser
            .named_params()
            .iter()
            .chain(out.state.encoder.named_params().iter())
            .map(|(_, p)| p.to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn update_noiser_leaves_encoder_bitwise_identical() {
        let (vocab, corpus) = tiny_corpus(3, 8);
        let cfg = tiny_cfg(3);
        let mut state = TrainState::<f32>::new(&cfg, &vocab);
        let mut stream = BatchStream::new(&corpus, &vocab, 4, 12, 3);
        let batch = stream.get_batch(1);
        let phi_before: Vec<Vec<f32>> =
            state.encoder.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        let theta_before: Vec<Vec<f32>> =
            state.noiser.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        update_noiser(&mut state, &cfg, &batch, &vocab, 1).unwrap();
        let phi_after: Vec<Vec<f32>> =
            state.encoder.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        let theta_after: Vec<Vec<f32>> =
            state.noiser.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(phi_before, phi_after, "encoder moved during a noiser step");
        assert_ne!(theta_before, theta_after, "noiser did not move");
    }

    #[test]
    fn update_encoder_leaves_noiser_bitwise_identical() {
        let (vocab, corpus) = tiny_corpus(4, 8);
        let mut cfg = tiny_cfg(4);
        cfg.warmup_encoder_steps = 1; // start in the encoding phase
        let mut state = TrainState::<f32>::new(&cfg, &vocab);
        let mut stream = BatchStream::new(&corpus, &vocab, 4, 12, 4);
        let batch = stream.get_batch(1);
        let theta_before: Vec<Vec<f32>> =
            state.noiser.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        update_encoder(&mut state, &cfg, &batch, &vocab, 1).unwrap();
        let theta_after: Vec<Vec<f32>> =
            state.noiser.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(theta_before, theta_after, "noiser moved during an encoder step");
    }

    #[test]
    #[should_panic(expected = "outside the noising phase")]
    fn update_noiser_in_wrong_phase_is_a_contract_violation() {
        let (vocab, corpus) = tiny_corpus(5, 8);
        let cfg = TrainConfig { baseline: true, ..tiny_cfg(5) };
        let mut state = TrainState::<f32>::new(&cfg, &vocab);
        let mut stream = BatchStream::new(&corpus, &vocab, 4, 12, 5);
        let batch = stream.get_batch(1);
        let _ = update_noiser(&mut state, &cfg, &batch, &vocab, 1);
    }

    #[test]
    fn same_seed_runs_are_identical_modulo_timing() {
        let (vocab, corpus) = tiny_corpus(6, 12);
        let cfg = TrainConfig { max_steps: 25, ..tiny_cfg(6) };
        let mut a = VecSink::default();
        let mut b = VecSink::default();
        train(&cfg, &corpus, &vocab, &mut a, None, None, [0; 32]).unwrap();
        train(&cfg, &corpus, &vocab, &mut b, None, None, [0; 32]).unwrap();
        assert_eq!(a.0.len(), b.0.len());
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!(x.same_modulo_timing(y), "step {} diverged", x.step);
        }
    }

    #[test]
    fn noiser_first_step_moves_with_loss_gradient_sign() {
        // With fresh (zero) moments and no decay, the first AdamW step moves
        // each coordinate along +sign(dLoss/dtheta) (ascent via -loss).
        let (vocab, corpus) = tiny_corpus(7, 8);
        let mut cfg = tiny_cfg(7);
        cfg.optim.weight_decay = 0.0;
        // give the encoder a trained-ish head so the loss is not flat
        let mut state = TrainState::<f32>::new(&cfg, &vocab);
        {
            let head = state.encoder.head.weight.to_vec();
            let mut rng = derive_rng(7, &[123]);
            let noisy: Vec<f32> =
                head.iter().map(|&w| w + 0.5 * (rng.gen::<f32>() - 0.5)).collect();
            state.encoder.head.weight.set_data(noisy);
        }
        let mut stream = BatchStream::new(&corpus, &vocab, 4, 12, 7);
        let batch = stream.get_batch(1);

        // capture gradient of the (positive) loss at theta
        state.zero_all_grads();
        let params = cfg.sampler_params(1);
        let run = run_encoder(
            NoisingSource::Adversarial {
                noiser: &state.noiser,
                params: &params,
                rho_rand: cfg.rho_rand,
                track_noiser: true,
            },
            &state.encoder,
            &batch,
            &vocab,
            cfg.seed,
            1,
            false,
        );
        run.loss.backward();
        let loss_grads: Vec<Option<Vec<f32>>> =
            state.noiser.named_params().iter().map(|(_, p)| p.grad()).collect();
        let theta_before: Vec<Vec<f32>> =
            state.noiser.named_params().iter().map(|(_, p)| p.to_vec()).collect();

        update_noiser(&mut state, &cfg, &batch, &vocab, 1).unwrap();

        let theta_after: Vec<Vec<f32>> =
            state.noiser.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        let mut checked = 0usize;
        for ((g, before), after) in loss_grads.iter().zip(&theta_before).zip(&theta_after) {
            let Some(g) = g else { continue };
            for i in 0..g.len() {
                if g[i].abs() > 1e-6 {
                    let moved = after[i] - before[i];
                    assert!(
                        moved * g[i] > 0.0,
                        "coordinate moved against the ascent direction"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 5, "too few active coordinates to trust the check");
    }

    #[test]
    fn encoder_steps_descend_on_the_same_batch() {
        let (vocab, corpus) = tiny_corpus(8, 8);
        let mut successes = 0;
        for trial in 0..50 {
            let mut cfg = tiny_cfg(1000 + trial);
            cfg.baseline = true;
            cfg.optim.lr = 1e-3;
            let mut state = TrainState::<f32>::new(&cfg, &vocab);
            let mut stream = BatchStream::new(&corpus, &vocab, 4, 12, cfg.seed);
            let batch = stream.get_batch(1);
            let before = run_encoder(
                NoisingSource::RandomOnly { rate: 0.2 },
                &state.encoder,
                &batch,
                &vocab,
                cfg.seed,
                1,
                false,
            )
            .report
            .total_loss;
            update_encoder(&mut state, &cfg, &batch, &vocab, 1).unwrap();
            let after = run_encoder(
                NoisingSource::RandomOnly { rate: 0.2 },
                &state.encoder,
                &batch,
                &vocab,
                cfg.seed,
                1,
                false,
            )
            .report
            .total_loss;
            if after < before {
                successes += 1;
            }
        }
        assert!(successes >= 45, "loss decreased in only {successes}/50 trials");
    }
}
