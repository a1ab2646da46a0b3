//! Run configuration: a flat JSON object of scalar values with a fixed key
//! set, `--set key=value` overrides, validation with key-precise
//! diagnostics, and a canonical resolved snapshot whose SHA-256 is the run
//! fingerprint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use advmlm::data::{
    load_corpus, synth_corpus, CorpusFormat, SynthSpec, Vocabulary, AMINO_ALPHABET,
};
use advmlm::nn::{GruConfig, TransformerConfig};
use advmlm::rng::{derive_rng, stream};
use advmlm::train::checkpoint::fingerprint_of;
use advmlm::train::{OptimConfig, TrainConfig};

/// All run settings. Serialized field order is the canonical key order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// "adversarial" or "baseline" (the latter disables the noiser and
    /// masks randomly at rho_adv + rho_rand).
    pub run_mode: String,

    /// Corpus source: "fasta" or "lines" read `corpus_path`; "synth"
    /// generates from `synth_spec`.
    pub corpus_format: String,
    pub corpus_path: Option<String>,
    pub synth_spec: String,
    pub synth_count: usize,
    pub synth_len: usize,
    pub vocab_alphabet: String,

    pub noiser_layers: usize,
    pub noiser_embed_dim: usize,
    pub noiser_hidden_dim: usize,
    pub noiser_bidirectional: bool,

    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_model_dim: usize,
    pub encoder_ff_dim: usize,
    pub encoder_max_seq_len: usize,
    pub encoder_dropout: f64,

    pub rho_adv: f64,
    pub rho_rand: f64,
    pub temperature: f64,
    pub anneal_to: Option<f64>,

    pub lr: f64,
    pub weight_decay: f64,

    pub n_noiser: u64,
    pub n_encoder: u64,
    pub batch_size: usize,
    pub max_len: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    pub probe_interval: u64,
    pub probe_count: usize,
    pub early_stop_patience: u64,
    pub warmup_encoder_steps: u64,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_mode: "adversarial".into(),
            corpus_format: "synth".into(),
            corpus_path: None,
            synth_spec: "markov".into(),
            synth_count: 2000,
            synth_len: 24,
            vocab_alphabet: AMINO_ALPHABET.into(),
            noiser_layers: 3,
            noiser_embed_dim: 128,
            noiser_hidden_dim: 64,
            noiser_bidirectional: true,
            encoder_layers: 4,
            encoder_heads: 4,
            encoder_model_dim: 128,
            encoder_ff_dim: 512,
            encoder_max_seq_len: 256,
            encoder_dropout: 0.1,
            rho_adv: 0.10,
            rho_rand: 0.10,
            temperature: 0.2,
            anneal_to: None,
            lr: 1e-4,
            weight_decay: 1e-2,
            n_noiser: 10,
            n_encoder: 10,
            batch_size: 32,
            max_len: 64,
            max_steps: 1000,
            checkpoint_interval: 500,
            probe_interval: 0,
            probe_count: 0,
            early_stop_patience: 0,
            warmup_encoder_steps: 0,
            seed: 42,
        }
    }
}

/// Validation problems, each naming the offending key.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl RunConfig {
    /// Parse a config file (flat JSON object of scalars) and apply
    /// `--set key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| ConfigErrors(vec!["config root must be a JSON object".into()]))?;
        for (k, v) in obj.iter() {
            if v.is_object() || v.is_array() {
                return Err(ConfigErrors(vec![format!(
                    "{k}: values must be scalars (flat key-value grammar)"
                )]));
            }
        }
        for kv in overrides {
            let (k, raw) = kv.split_once('=').ok_or_else(|| {
                ConfigErrors(vec![format!("--set {kv}: expected key=value")])
            })?;
            let parsed = serde_json::from_str::<serde_json::Value>(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            if parsed.is_object() || parsed.is_array() {
                return Err(ConfigErrors(vec![format!("--set {k}: value must be a scalar")]));
            }
            obj.insert(k.to_string(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        let mut check = |cond: bool, msg: String| {
            if !cond {
                errs.push(msg);
            }
        };

        check(
            matches!(self.run_mode.as_str(), "adversarial" | "baseline"),
            format!("run_mode: {:?} is not adversarial|baseline", self.run_mode),
        );
        check(
            matches!(self.corpus_format.as_str(), "fasta" | "lines" | "synth"),
            format!("corpus_format: {:?} is not fasta|lines|synth", self.corpus_format),
        );
        if self.corpus_format != "synth" {
            match &self.corpus_path {
                None => check(false, "corpus_path: required unless corpus_format is synth".into()),
                Some(p) => check(
                    Path::new(p).is_file(),
                    format!("corpus_path: {p} does not exist"),
                ),
            }
        } else {
            check(
                SynthSpec::parse(&self.synth_spec, self.synth_count.max(1), self.synth_len.max(1))
                    .is_ok(),
                format!("synth_spec: {:?} is not uniform|markov|template", self.synth_spec),
            );
            check(self.synth_count > 0, "synth_count: must be positive".into());
            check(self.synth_len > 0, "synth_len: must be positive".into());
        }
        check(
            Vocabulary::from_alphabet(&self.vocab_alphabet).is_ok(),
            format!(
                "vocab_alphabet: must be non-empty with unique characters, got {:?}",
                self.vocab_alphabet
            ),
        );

        check(self.noiser_layers > 0, "noiser_layers: must be positive".into());
        check(self.noiser_embed_dim > 0, "noiser_embed_dim: must be positive".into());
        check(self.noiser_hidden_dim > 0, "noiser_hidden_dim: must be positive".into());
        check(self.encoder_layers > 0, "encoder_layers: must be positive".into());
        check(self.encoder_heads > 0, "encoder_heads: must be positive".into());
        check(
            self.encoder_heads > 0 && self.encoder_model_dim.is_multiple_of(self.encoder_heads.max(1)),
            format!(
                "encoder_model_dim: {} not divisible by encoder_heads {}",
                self.encoder_model_dim, self.encoder_heads
            ),
        );
        check(self.encoder_ff_dim > 0, "encoder_ff_dim: must be positive".into());
        check(
            (0.0..1.0).contains(&self.encoder_dropout),
            "encoder_dropout: must lie in [0, 1)".into(),
        );

        check(
            self.rho_adv > 0.0 && self.rho_adv < 1.0,
            "rho_adv: must lie in (0, 1)".into(),
        );
        check(self.rho_rand >= 0.0, "rho_rand: must be non-negative".into());
        check(
            self.rho_adv + self.rho_rand <= 0.5,
            format!("rho_adv + rho_rand = {} exceeds 0.5", self.rho_adv + self.rho_rand),
        );
        check(self.temperature > 0.0, "temperature: must be positive".into());
        if let Some(t) = self.anneal_to {
            check(t > 0.0, "anneal_to: must be positive".into());
        }
        check(self.lr > 0.0, "lr: must be positive".into());
        check(self.weight_decay >= 0.0, "weight_decay: must be non-negative".into());
        check(self.n_noiser > 0, "n_noiser: must be positive".into());
        check(self.n_encoder > 0, "n_encoder: must be positive".into());
        check(self.batch_size > 0, "batch_size: must be positive".into());
        check(self.max_len >= 3, "max_len: must be at least 3 ([CLS] token [SEP])".into());
        check(
            self.max_len <= self.encoder_max_seq_len,
            format!(
                "max_len: {} exceeds encoder_max_seq_len {}",
                self.max_len, self.encoder_max_seq_len
            ),
        );
        if self.early_stop_patience > 0 {
            check(
                self.probe_interval > 0 && self.probe_count > 0,
                "early_stop_patience: needs probe_interval and probe_count".into(),
            );
        }
        if self.probe_interval > 0 {
            check(
                self.probe_count > 0,
                "probe_interval: set but probe_count is zero".into(),
            );
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }

    /// Canonical resolved snapshot: every key present, fixed order, pretty
    /// printed. The SHA-256 of this exact text is the run fingerprint.
    pub fn canonical_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint_of(&self.canonical_text())
    }

    pub fn fingerprint_hex(&self) -> String {
        let mut out = String::new();
        for b in self.fingerprint() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    pub fn is_baseline(&self) -> bool {
        self.run_mode == "baseline"
    }

    pub fn build_vocab(&self) -> Vocabulary {
        Vocabulary::from_alphabet(&self.vocab_alphabet).expect("validated alphabet")
    }

    /// Load or synthesize the corpus this config names.
    pub fn load_corpus_sequences(&self, vocab: &Vocabulary) -> anyhow::Result<Vec<String>> {
        match self.corpus_format.as_str() {
            "synth" => {
                let spec = SynthSpec::parse(&self.synth_spec, self.synth_count, self.synth_len)?;
                let mut rng = derive_rng(self.seed, &[stream::SYNTH]);
                Ok(synth_corpus(&spec, vocab, &mut rng)?)
            }
            fmt => {
                let format = match fmt {
                    "fasta" => CorpusFormat::Fasta,
                    _ => CorpusFormat::Lines,
                };
                let path = PathBuf::from(self.corpus_path.as_ref().expect("validated"));
                let load = load_corpus(&path, format)?;
                if load.dropped_empty > 0 {
                    eprintln!("note: dropped {} empty sequences from corpus", load.dropped_empty);
                }
                Ok(load.sequences)
            }
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            gru: GruConfig {
                num_layers: self.noiser_layers,
                embed_dim: self.noiser_embed_dim,
                hidden_dim: self.noiser_hidden_dim,
                bidirectional: self.noiser_bidirectional,
            },
            transformer: TransformerConfig {
                num_layers: self.encoder_layers,
                num_heads: self.encoder_heads,
                model_dim: self.encoder_model_dim,
                ff_dim: self.encoder_ff_dim,
                max_seq_len: self.encoder_max_seq_len,
                dropout_rate: self.encoder_dropout,
            },
            rho_adv: self.rho_adv,
            rho_rand: self.rho_rand,
            temperature: self.temperature,
            anneal_to: self.anneal_to,
            optim: OptimConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..OptimConfig::default()
            },
            n_noiser: self.n_noiser,
            n_encoder: self.n_encoder,
            batch_size: self.batch_size,
            max_len: self.max_len,
            max_steps: self.max_steps,
            checkpoint_interval: self.checkpoint_interval,
            probe_interval: self.probe_interval,
            probe_count: self.probe_count,
            early_stop_patience: self.early_stop_patience,
            warmup_encoder_steps: self.warmup_encoder_steps,
            baseline: self.is_baseline(),
            seed: self.seed,
        }
    }
}
