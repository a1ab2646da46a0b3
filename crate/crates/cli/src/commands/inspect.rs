//! `inspect-masks`: per-position any-mask probabilities and sampled mask
//! decisions for given sequences, as aligned text on stdout plus an
//! optional NDJSON record stream.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use advmlm::data::make_batch;
use advmlm::noiser::{run_noiser_with_probs, Provenance};
use advmlm::rng::{mix, stream};
use advmlm::sampling::SamplerParams;
use advmlm::train::checkpoint::load_checkpoint;

use crate::rundir::RunDir;

pub struct InspectOpts {
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub seqs: Vec<String>,
    pub seqs_file: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct MaskRecord {
    index: usize,
    sequence: String,
    p_any: Vec<f64>,
    decisions: Vec<String>,
}

pub fn run(opts: InspectOpts) -> Result<()> {
    let dir = RunDir::new(opts.run_dir);
    let cfg = dir.read_config_snapshot()?;
    let vocab = cfg.build_vocab();
    let ckpt_path = match &opts.checkpoint {
        Some(p) => p.clone(),
        None => dir.latest_checkpoint()?,
    };
    let state = load_checkpoint(&ckpt_path, &cfg.to_train_config(), &vocab, Some(cfg.fingerprint()))
        .with_context(|| format!("cannot load {}", ckpt_path.display()))?;

    let mut sequences = opts.seqs.clone();
    if let Some(path) = &opts.seqs_file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        sequences.extend(text.lines().map(|l| l.trim().to_uppercase()).filter(|l| !l.is_empty()));
    }
    if sequences.is_empty() {
        bail!("no sequences given; pass --seq or --seqs-file");
    }

    let seed = opts.seed.unwrap_or_else(|| mix(cfg.seed, stream::PROBE));
    let params = SamplerParams::new(cfg.rho_adv, cfg.temperature, seed);

    let mut records = Vec::with_capacity(sequences.len());
    for (index, seq) in sequences.iter().enumerate() {
        let seq = seq.to_uppercase();
        let (batch, truncated) = make_batch(std::slice::from_ref(&seq), &vocab, cfg.max_len);
        if truncated > 0 {
            eprintln!("note: sequence {index} truncated to {} tokens", cfg.max_len - 2);
        }
        let (outcome, p_any) = run_noiser_with_probs(&state.noiser, &batch, &params, index as u64);

        let width = batch.width;
        let x_tilde = outcome.x_tilde.to_vec();
        let v = vocab.size();
        let mut toks = Vec::new();
        let mut probs = Vec::new();
        let mut actions = Vec::new();
        for c in 0..width {
            if !batch.is_valid(0, c) {
                continue;
            }
            toks.push(vocab.token(batch.token(0, c)).to_string());
            probs.push(p_any[c]);
            let action = match outcome.provenance[c] {
                Provenance::None => ".".to_string(),
                Provenance::AdvMask => "[MASK]".to_string(),
                Provenance::AdvKeep => "keep".to_string(),
                Provenance::AdvReplace => {
                    let row = &x_tilde[c * v..(c + 1) * v];
                    let tok = row.iter().position(|&p| p == 1.0).unwrap_or(0);
                    format!(">{}", vocab.token(tok as u32))
                }
                other => format!("{other:?}"),
            };
            actions.push(action);
        }

        println!("# seq {index} ({} tokens)", toks.len());
        let w = 7usize;
        let line = |label: &str, cells: &[String]| {
            let mut s = format!("{label:<8}");
            for c in cells {
                s.push_str(&format!("{c:<w$}"));
            }
            s
        };
        println!("{}", line("tok", &toks));
        let prob_cells: Vec<String> = probs.iter().map(|p| format!("{p:.2}")).collect();
        println!("{}", line("p_any", &prob_cells));
        println!("{}", line("action", &actions));
        println!();

        records.push(MaskRecord {
            index,
            sequence: seq,
            p_any: probs,
            decisions: actions
                .iter()
                .map(|a| match a.as_str() {
                    "." => "none".to_string(),
                    "[MASK]" => "mask".to_string(),
                    "keep" => "keep".to_string(),
                    other => format!("replace:{}", other.trim_start_matches('>')),
                })
                .collect(),
        });
    }

    if let Some(path) = &opts.records {
        let mut f = std::fs::File::create(path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        for rec in &records {
            serde_json::to_writer(&mut f, rec)?;
            f.write_all(b"\n")?;
        }
        eprintln!("wrote {} records to {}", records.len(), path.display());
    }
    Ok(())
}
