//! Vocabulary management, corpus ingestion (FASTA and line-oriented text),
//! synthetic corpora for controlled experiments, and batch assembly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::DataError;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The 25-letter amino-acid alphabet (20 standard plus B, Z, X, U, O).
pub const AMINO_ALPHABET: &str = "ACDEFGHIKLMNPQRSTVWYBZXUO";

const CONTROL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

/// Token <-> id map: control tokens at ids 0..5, content tokens from
/// `v_idx = 5` upward.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    content_chars: Vec<char>,
    lookup: HashMap<char, u32>,
}

impl Vocabulary {
    /// Default vocabulary over the 25-letter amino-acid alphabet.
    pub fn amino() -> Self {
        Self::from_alphabet(AMINO_ALPHABET).expect("builtin alphabet is valid")
    }

    /// Vocabulary over an arbitrary single-character alphabet.
    pub fn from_alphabet(alphabet: &str) -> Result<Self, DataError> {
        if alphabet.is_empty() {
            return Err(DataError::EmptyAlphabet);
        }
        let mut tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut lookup = HashMap::new();
        let mut content_chars = Vec::new();
        for c in alphabet.chars() {
            if lookup.insert(c, (tokens.len()) as u32).is_some() {
                return Err(DataError::DuplicateToken(c));
            }
            content_chars.push(c);
            tokens.push(c.to_string());
        }
        Ok(Vocabulary { tokens, content_chars, lookup })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// First content-token id (== number of control tokens).
    pub fn v_idx(&self) -> u32 {
        CONTROL_TOKENS.len() as u32
    }

    pub fn content_size(&self) -> usize {
        self.content_chars.len()
    }

    pub fn mask_id(&self) -> u32 {
        MASK_ID
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn alphabet(&self) -> String {
        self.content_chars.iter().collect()
    }

    /// Content id for a character; unknown characters map to `[UNK]`.
    pub fn encode_char(&self, c: char) -> u32 {
        self.lookup.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        s.chars().map(|c| self.encode_char(c)).collect()
    }

    /// Inverse of [`Vocabulary::encode`] for content ids; control ids render
    /// as their bracketed names.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join("")
    }

    /// Content token id `v_idx + offset`, cyclic successor helper for the
    /// template generator.
    pub fn succ_char(&self, c: char) -> char {
        let i = self
            .content_chars
            .iter()
            .position(|&x| x == c)
            .expect("succ_char on non-content char");
        self.content_chars[(i + 1) % self.content_chars.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Fasta,
    Lines,
}

/// Loaded corpus plus ingestion statistics.
#[derive(Debug)]
pub struct CorpusLoad {
    pub sequences: Vec<String>,
    pub dropped_empty: usize,
}

/// Read a corpus file. Sequences are uppercased; empty records are dropped
/// and counted. Characters outside the vocabulary alphabet survive here and
/// map to `[UNK]` at encode time.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusLoad, DataError> {
    let raw = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut sequences = Vec::new();
    let mut dropped = 0usize;
    let mut push = |s: String| {
        if s.is_empty() {
            dropped += 1;
        } else {
            sequences.push(s);
        }
    };
    match format {
        CorpusFormat::Lines => {
            for line in raw.lines() {
                push(line.trim().to_uppercase());
            }
        }
        CorpusFormat::Fasta => {
            let mut current: Option<String> = None;
            for line in raw.lines() {
                let line = line.trim();
                if let Some(rest) = line.strip_prefix('>') {
                    let _header = rest;
                    if let Some(seq) = current.take() {
                        push(seq);
                    }
                    current = Some(String::new());
                } else if let Some(seq) = current.as_mut() {
                    seq.push_str(&line.to_uppercase());
                }
                // content before any header is ignored
            }
            if let Some(seq) = current.take() {
                push(seq);
            }
        }
    }
    if sequences.is_empty() {
        return Err(DataError::EmptyCorpus { path: path.to_path_buf(), dropped });
    }
    Ok(CorpusLoad { sequences, dropped_empty: dropped })
}

/// Synthetic corpus generators for controlled experiments.
#[derive(Debug, Clone)]
pub enum SynthSpec {
    /// Tokens drawn uniformly from the content alphabet.
    Uniform { count: usize, len: usize },
    /// First-order Markov chain; each token transitions to its cyclic
    /// successor with probability `succ_prob`, otherwise uniformly.
    Markov { count: usize, len: usize, succ_prob: f64 },
    /// Period-3 structure `[anchor, succ(anchor), noise]`: positions at
    /// i % 3 == 1 are the deterministic successor of their left neighbor
    /// (perfectly predictable), positions at i % 3 == 2 are uniform draws
    /// nothing else references (unpredictable from any context).
    Template { count: usize, len: usize },
}

impl SynthSpec {
    pub fn parse(name: &str, count: usize, len: usize) -> Result<Self, DataError> {
        match name {
            "uniform" => Ok(SynthSpec::Uniform { count, len }),
            "markov" => Ok(SynthSpec::Markov { count, len, succ_prob: 0.8 }),
            "template" => Ok(SynthSpec::Template { count, len }),
            other => Err(DataError::InvalidSpec(format!(
                "unknown generator {other:?} (expected uniform, markov, or template)"
            ))),
        }
    }

    fn check(&self) -> Result<(), DataError> {
        let (count, len) = match *self {
            SynthSpec::Uniform { count, len } => (count, len),
            SynthSpec::Markov { count, len, succ_prob } => {
                if !(0.0..=1.0).contains(&succ_prob) {
                    return Err(DataError::InvalidSpec(format!(
                        "markov succ_prob {succ_prob} outside [0, 1]"
                    )));
                }
                (count, len)
            }
            SynthSpec::Template { count, len } => (count, len),
        };
        if count == 0 || len == 0 {
            return Err(DataError::InvalidSpec(
                "count and len must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Row-stochastic transition matrix of the Markov generator, indexed by
/// content-token offset. Exposed so tests can compare empirical transitions.
pub fn markov_transition_matrix(content_size: usize, succ_prob: f64) -> Vec<Vec<f64>> {
    let uniform = (1.0 - succ_prob) / content_size as f64;
    (0..content_size)
        .map(|i| {
            let mut row = vec![uniform; content_size];
            row[(i + 1) % content_size] += succ_prob;
            row
        })
        .collect()
}

/// Generate a synthetic corpus.
pub fn synth_corpus(
    spec: &SynthSpec,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<Vec<String>, DataError> {
    spec.check()?;
    let chars = &vocab.content_chars;
    let n = chars.len();
    let uniform = |rng: &mut Rng| chars[rng.gen_range(0..n)];
    let out = match *spec {
        SynthSpec::Uniform { count, len } => (0..count)
            .map(|_| (0..len).map(|_| uniform(rng)).collect())
            .collect(),
        SynthSpec::Markov { count, len, succ_prob } => (0..count)
            .map(|_| {
                let mut s = String::with_capacity(len);
                let mut cur = uniform(rng);
                s.push(cur);
                for _ in 1..len {
                    cur = if rng.gen::<f64>() < succ_prob {
                        vocab.succ_char(cur)
                    } else {
                        uniform(rng)
                    };
                    s.push(cur);
                }
                s
            })
            .collect(),
        SynthSpec::Template { count, len } => (0..count)
            .map(|_| {
                let mut s = String::with_capacity(len);
                for i in 0..len {
                    let c = if i % 3 == 1 {
                        vocab.succ_char(s.chars().last().unwrap())
                    } else {
                        uniform(rng)
                    };
                    s.push(c);
                }
                s
            })
            .collect(),
    };
    Ok(out)
}

/// Padded token matrix with its validity mask. Rows are framed as
/// `[CLS] seq [SEP]` and right-padded with `[PAD]` to exactly `width`
/// columns; only content positions count as valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub rows: usize,
    pub width: usize,
    pub valid: Vec<u8>,
    pub seq_lens: Vec<usize>,
}

impl Batch {
    pub fn token(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col] != 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v != 0).count()
    }

    /// Validity mask as a 0/1 tensor `[rows, width]`.
    pub fn valid_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data: Vec<S> = self
            .valid
            .iter()
            .map(|&v| if v != 0 { S::one() } else { S::zero() })
            .collect();
        Tensor::from_vec(data, &[self.rows, self.width])
    }

    /// Exact one-hot encoding `[rows, width, vocab]`.
    pub fn one_hot<S: Scalar>(&self, vocab_size: usize) -> Tensor<S> {
        let mut data = vec![S::zero(); self.rows * self.width * vocab_size];
        for (i, &t) in self.tokens.iter().enumerate() {
            data[i * vocab_size + t as usize] = S::one();
        }
        Tensor::from_vec(data, &[self.rows, self.width, vocab_size])
    }
}

/// Frame and pad a chunk of sequences into one batch of width `max_len`.
/// Returns the batch and the number of truncated sequences.
pub fn make_batch(seqs: &[String], vocab: &Vocabulary, max_len: usize) -> (Batch, usize) {
    assert!(max_len >= 3, "max_len must fit [CLS] token [SEP]");
    assert!(!seqs.is_empty(), "make_batch on empty slice");
    let rows = seqs.len();
    let width = max_len;
    let content_cap = max_len - 2;

    let mut tokens = vec![PAD_ID; rows * width];
    let mut valid = vec![0u8; rows * width];
    let mut seq_lens = vec![0usize; rows];
    let mut truncated = 0usize;

    for (r, seq) in seqs.iter().enumerate() {
        let ids = vocab.encode(seq);
        let take = ids.len().min(content_cap);
        if ids.len() > content_cap {
            truncated += 1;
        }
        let row = &mut tokens[r * width..(r + 1) * width];
        row[0] = CLS_ID;
        row[1..1 + take].copy_from_slice(&ids[..take]);
        row[1 + take] = SEP_ID;
        for c in 0..take {
            valid[r * width + 1 + c] = 1;
        }
        seq_lens[r] = take;
    }
    (Batch { tokens, rows, width, valid, seq_lens }, truncated)
}

/// Split a corpus into fixed-size batches (the final one may be short).
pub fn make_batches(
    seqs: &[String],
    vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    seqs.chunks(batch_size)
        .map(|chunk| make_batch(chunk, vocab, max_len).0)
        .collect()
}
