//! `eval`: frozen-parameter evaluation of a checkpoint under random and/or
//! adversarial masking at a common budget, reporting mean loss, masked
//! accuracy, and the mask-type histogram as a JSON report on stdout.

use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use advmlm::data::{load_corpus, make_batches, CorpusFormat, Vocabulary};
use advmlm::mlm::{random_mask, run_encoder, NoisingSource};
use advmlm::noiser::{run_noiser, MaskHistogram, NoiseOutcome};
use advmlm::rng::{mix, stream};
use advmlm::sampling::SamplerParams;
use advmlm::train::checkpoint::load_checkpoint;
use advmlm::train::TrainState;

use crate::rundir::RunDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Masking {
    Random,
    Adversarial,
    Both,
}

pub struct EvalOpts {
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub masking: Masking,
    pub rate: Option<f64>,
    pub corpus: Option<PathBuf>,
    pub corpus_format: Option<String>,
    pub max_batches: Option<usize>,
}

#[derive(Serialize)]
struct ModeReport {
    mean_loss: f64,
    masked_accuracy: f64,
    scored: usize,
    hist: MaskHistogram,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    step: u64,
    masking: String,
    rate: f64,
    batches: usize,
    sequences: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    random: Option<ModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adversarial: Option<ModeReport>,
    /// adversarial - random mean loss, present with `--masking both`.
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_gap: Option<f64>,
}

pub fn run(opts: EvalOpts) -> Result<()> {
    let dir = RunDir::new(opts.run_dir);
    let cfg = dir.read_config_snapshot()?;
    let vocab = cfg.build_vocab();
    let ckpt_path = match &opts.checkpoint {
        Some(p) => p.clone(),
        None => dir.latest_checkpoint()?,
    };
    let state = load_checkpoint(&ckpt_path, &cfg.to_train_config(), &vocab, Some(cfg.fingerprint()))
        .with_context(|| format!("cannot load {}", ckpt_path.display()))?;

    let sequences = match (&opts.corpus, &opts.corpus_format) {
        (Some(path), fmt) => {
            let format = match fmt.as_deref() {
                Some("fasta") | None => CorpusFormat::Fasta,
                Some("lines") => CorpusFormat::Lines,
                Some(other) => anyhow::bail!("--format {other}: expected fasta or lines"),
            };
            load_corpus(path, format)?.sequences
        }
        (None, _) => cfg.load_corpus_sequences(&vocab)?,
    };
    let mut batches = make_batches(&sequences, &vocab, cfg.max_len, cfg.batch_size);
    if let Some(cap) = opts.max_batches {
        batches.truncate(cap);
    }

    let rate = opts.rate.unwrap_or(cfg.rho_adv);
    let eval_seed = mix(cfg.seed, stream::PROBE);

    let want_random = matches!(opts.masking, Masking::Random | Masking::Both);
    let want_adv = matches!(opts.masking, Masking::Adversarial | Masking::Both);

    let random = want_random.then(|| {
        evaluate(&state, &vocab, &batches, |batch, bi| {
            random_mask::<f32>(batch, &vocab, rate, eval_seed, bi)
        })
    });
    let adversarial = want_adv.then(|| {
        let params = SamplerParams::new(rate, cfg.temperature, eval_seed);
        evaluate(&state, &vocab, &batches, |batch, bi| {
            run_noiser(&state.noiser, batch, &params, bi)
        })
    });

    let loss_gap = match (&adversarial, &random) {
        (Some(a), Some(r)) => Some(a.mean_loss - r.mean_loss),
        _ => None,
    };
    let relative_gap = match (&adversarial, &random) {
        (Some(a), Some(r)) if r.mean_loss > 0.0 => {
            Some((a.mean_loss - r.mean_loss) / r.mean_loss)
        }
        _ => None,
    };

    let report = EvalReport {
        checkpoint: ckpt_path.display().to_string(),
        step: state.step,
        masking: format!("{:?}", opts.masking).to_lowercase(),
        rate,
        batches: batches.len(),
        sequences: sequences.len(),
        random,
        adversarial,
        loss_gap,
        relative_gap,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn evaluate(
    state: &TrainState<f32>,
    vocab: &Vocabulary,
    batches: &[advmlm::data::Batch],
    mut noise: impl FnMut(&advmlm::data::Batch, u64) -> NoiseOutcome<f32>,
) -> ModeReport {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut scored = 0usize;
    let mut hist = MaskHistogram::default();
    for (bi, batch) in batches.iter().enumerate() {
        let outcome = noise(batch, bi as u64);
        let run = run_encoder(
            NoisingSource::Provided(&outcome),
            &state.encoder,
            batch,
            vocab,
            state.seed,
            bi as u64,
            false,
        );
        let n = run.report.scored_count;
        loss_sum += run.report.total_loss * n as f64;
        acc_sum += run.report.masked_accuracy * n as f64;
        scored += n;
        hist.merge(&run.outcome.histogram());
    }
    let denom = scored.max(1) as f64;
    ModeReport {
        mean_loss: loss_sum / denom,
        masked_accuracy: acc_sum / denom,
        scored,
        hist,
    }
}
