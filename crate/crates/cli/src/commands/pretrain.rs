//! `pretrain` and `baseline`: launch or resume a training run, writing the
//! config snapshot, NDJSON metrics stream, periodic checkpoints, and a
//! MANIFEST of artifact hashes into the output directory.

use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};

use advmlm::train::checkpoint::load_checkpoint;
use advmlm::train::{train_capped, NdjsonSink, TrainState};

use crate::config::{ConfigErrors, RunConfig};
use crate::rundir::RunDir;

pub struct PretrainOpts {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub resume: bool,
    pub force: bool,
    pub baseline: bool,
    pub stop_after: Option<u64>,
}

pub fn run(opts: PretrainOpts) -> Result<()> {
    let mut cfg = RunConfig::load(&opts.config, &opts.overrides)?;
    if opts.baseline {
        cfg.run_mode = "baseline".into();
    }
    let dir = RunDir::new(opts.out);

    let resume_state: Option<TrainState<f32>> = if opts.resume {
        let snapshot = dir.read_config_snapshot()?;
        if snapshot != cfg {
            return Err(ConfigErrors(vec![format!(
                "--resume: config does not match the snapshot in {} (fingerprint {} vs {})",
                dir.root.display(),
                cfg.fingerprint_hex(),
                snapshot.fingerprint_hex()
            )])
            .into());
        }
        let ckpt = dir.latest_checkpoint()?;
        let vocab = cfg.build_vocab();
        let state = load_checkpoint(&ckpt, &cfg.to_train_config(), &vocab, Some(cfg.fingerprint()))
            .with_context(|| format!("cannot load {}", ckpt.display()))?;
        eprintln!("resuming from {} at step {}", ckpt.display(), state.step);
        dir.truncate_metrics_after(state.step)?;
        Some(state)
    } else {
        dir.prepare_fresh(opts.force)?;
        dir.write_config_snapshot(&cfg)?;
        None
    };

    let vocab = cfg.build_vocab();
    let corpus = cfg.load_corpus_sequences(&vocab)?;
    let train_cfg = cfg.to_train_config();

    let metrics_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.metrics_path())
        .with_context(|| format!("cannot open {}", dir.metrics_path().display()))?;
    let mut sink = NdjsonSink::new(BufWriter::new(metrics_file));

    let out = train_capped(
        &train_cfg,
        &corpus,
        &vocab,
        &mut sink,
        Some(&dir.checkpoints()),
        resume_state,
        cfg.fingerprint(),
        opts.stop_after,
    )?;

    dir.write_manifest()?;
    println!(
        "{} run complete: {} steps this invocation (global step {}), {}fingerprint {}",
        cfg.run_mode,
        out.steps_run,
        out.state.step,
        if out.stopped_early { "stopped early on probe plateau, " } else { "" },
        cfg.fingerprint_hex()
    );
    println!("artifacts in {}", dir.root.display());
    Ok(())
}
