//! Versioned binary checkpoints.
//!
//! Layout: magic, format version, config fingerprint, run state (seed,
//! step, phase), length-prefixed named parameter blobs as little-endian
//! f32, optimizer moment blobs for both players, and a trailing SHA-256 of
//! everything before it. Writes go through a temp file and rename, so a
//! partial file can never sit at the final path.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::CheckpointError;
use crate::tensor::Tensor;

use super::{AdamWState, Phase, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"ADVMLMCK";
const VERSION: u32 = 1;

/// SHA-256 of a canonical config text, the fingerprint stored in
/// checkpoints and verified on load.
pub fn fingerprint_of(canonical_config: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(canonical_config.as_bytes());
    h.finalize().into()
}

pub fn save_checkpoint(
    state: &TrainState<f32>,
    path: &Path,
    fingerprint: [u8; 32],
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint);
    buf.extend_from_slice(&state.seed.to_le_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.push(match state.phase {
        Phase::PreTrainingNoising => 0,
        Phase::PreTrainingEncoding => 1,
    });

    let mut params = state.noiser.named_params();
    params.extend(state.encoder.named_params());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        write_name(&mut buf, name);
        buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        write_f32s(&mut buf, &p.to_vec());
    }

    write_optimizer(&mut buf, &state.opt_noiser);
    write_optimizer(&mut buf, &state.opt_encoder);

    let digest: [u8; 32] = Sha256::digest(&buf).into();
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("ckpt.tmp");
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

/// Rebuild a [`TrainState`] from disk. The models are constructed from
/// `cfg` and then overwritten parameter by parameter, so the config must
/// match the checkpointed run; when `expected_fingerprint` is given, the
/// stored fingerprint must equal it.
pub fn load_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    expected_fingerprint: Option<[u8; 32]>,
) -> Result<TrainState<f32>, CheckpointError> {
    let bytes = fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Corrupt("file shorter than header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let body = &bytes[..bytes.len() - 32];
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != bytes[bytes.len() - 32..] {
        return Err(CheckpointError::Corrupt(
            "checksum mismatch (truncated or corrupted file)".into(),
        ));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut fingerprint = [0u8; 32];
    fingerprint.copy_from_slice(r.bytes(32)?);
    if let Some(expected) = expected_fingerprint {
        if fingerprint != expected {
            return Err(CheckpointError::FingerprintMismatch);
        }
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let phase = match r.u8()? {
        0 => Phase::PreTrainingNoising,
        1 => Phase::PreTrainingEncoding,
        other => return Err(CheckpointError::Corrupt(format!("unknown phase tag {other}"))),
    };

    let mut state = TrainState::<f32>::new(cfg, vocab);
    let mut expected_params = state.noiser.named_params();
    expected_params.extend(state.encoder.named_params());

    let count = r.u32()? as usize;
    if count != expected_params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} parameters stored, config defines {}",
            expected_params.len()
        )));
    }
    for (name, p) in &expected_params {
        let stored_name = r.name()?;
        if &stored_name != name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter order mismatch: stored {stored_name}, expected {name}"
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "shape mismatch for {name}: stored {shape:?}, expected {:?}",
                p.shape()
            )));
        }
        let data = r.f32s()?;
        if data.len() != p.numel() {
            return Err(CheckpointError::Corrupt(format!("blob length mismatch for {name}")));
        }
        p.set_data(data);
    }

    let n_theta = state.noiser.named_params().len();
    read_optimizer(&mut r, &mut state.opt_noiser, &expected_params[..n_theta])?;
    read_optimizer(&mut r, &mut state.opt_encoder, &expected_params[n_theta..])?;
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after optimizer state".into()));
    }

    state.seed = seed;
    state.step = step;
    state.phase = phase;
    Ok(state)
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn write_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_optimizer(buf: &mut Vec<u8>, opt: &AdamWState<f32>) {
    buf.extend_from_slice(&opt.step.to_le_bytes());
    let (m, v) = opt.moments();
    buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for (mi, vi) in m.iter().zip(v) {
        write_f32s(buf, mi);
        write_f32s(buf, vi);
    }
}

fn read_optimizer(
    r: &mut Reader<'_>,
    opt: &mut AdamWState<f32>,
    params: &[(String, Tensor<f32>)],
) -> Result<(), CheckpointError> {
    let step = r.u64()?;
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(CheckpointError::Corrupt("optimizer moment count mismatch".into()));
    }
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for (name, p) in params {
        let mi = r.f32s()?;
        let vi = r.f32s()?;
        if mi.len() != p.numel() || vi.len() != p.numel() {
            return Err(CheckpointError::Corrupt(format!("moment length mismatch for {name}")));
        }
        m.push(mi);
        v.push(vi);
    }
    opt.restore(step, m, v);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.bytes(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name".into()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>, CheckpointError> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
