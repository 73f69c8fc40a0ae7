//! Checkpoint files: magic, JSON manifest, little-endian f64 blob.
//!
//! Layout: `SDMPCKPT` | u32 version | u64 manifest length | manifest JSON |
//! blob. The manifest records the config hash and text, step, epoch, RNG
//! state, a tensor table (name, shape, element offset), the blob length in
//! bytes and the blob's sha256.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::{EncoderParams, TeacherState};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"SDMPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: checkpoint config hash {found} does not match run config {expected}")]
    ConfigMismatch { path: PathBuf, expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, String> {
        if self.seed.len() != 64 {
            return Err(format!("rng seed has {} hex digits", self.seed.len()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|e| e.to_string())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: String,
    pub step: u64,
    pub epoch: usize,
    pub rng: RngState,
    /// Teacher momentum as IEEE-754 bits.
    pub momentum_bits: u64,
    pub tensors: Vec<TensorEntry>,
    pub blob_len: usize,
    pub blob_sha256: String,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix/`, prefix stripped.
    pub fn group(&self, prefix: &str) -> EncoderParams {
        let p = format!("{prefix}/");
        let (names, tensors) = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .unzip();
        EncoderParams::new(names, tensors).expect("paired")
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode(manifest_base: Manifest, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        tensors: entries,
        blob_len: blob.len(),
        blob_sha256: sha_hex(&blob),
        ..manifest_base
    };
    let json = serde_json::to_vec(&manifest).expect("manifest json");
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |msg: String| CheckpointError::Corrupt { path: path.to_path_buf(), msg };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if mlen > body.len() {
        return Err(corrupt(format!("manifest length {mlen} exceeds file")));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let blob = &body[mlen..];
    if blob.len() != manifest.blob_len {
        return Err(corrupt(format!("blob is {} bytes, manifest says {}", blob.len(), manifest.blob_len)));
    }
    if sha_hex(blob) != manifest.blob_sha256 {
        return Err(corrupt("blob sha256 mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = (e.offset + n) * 8;
        if end > blob.len() {
            return Err(corrupt(format!("tensor {} runs past the blob", e.name)));
        }
        let data = blob[e.offset * 8..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
        tensors.push((e.name.clone(), t));
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(path, &bytes)
}

/// Serialise a training state.
pub fn state_bytes(state: &TrainState, cfg: &RunConfig) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let names = state.student.names();
    for (prefix, set) in [
        ("student", state.student.tensors()),
        ("teacher", state.teacher.params.tensors()),
        ("adam_m", &state.adam_m[..]),
        ("adam_v", &state.adam_v[..]),
    ] {
        for (n, t) in names.iter().zip(set) {
            tensors.push((format!("{prefix}/{n}"), t));
        }
    }
    let center = state.teacher.center.as_ref().map(|c| Tensor::new(vec![c.len()], c.clone()).expect("center"));
    if let Some(c) = &center {
        tensors.push(("teacher_center".into(), c));
    }
    let history = Tensor::new(vec![state.loss_history.len()], state.loss_history.clone()).expect("history");
    tensors.push(("loss_history".into(), &history));
    let base = Manifest {
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        step: state.step,
        epoch: state.epoch,
        rng: RngState::capture(&state.rng),
        momentum_bits: state.teacher.momentum.to_bits(),
        tensors: vec![],
        blob_len: 0,
        blob_sha256: String::new(),
    };
    encode(base, &tensors)
}

/// Write atomically (temp file then rename).
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Save `state` tagged with the hash and canonical text of `cfg`.
pub fn save_state(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    write_bytes(path, &state_bytes(state, cfg))
}

/// Rebuild a training state from a decoded checkpoint.
pub fn state_from_checkpoint(path: &Path, ck: &Checkpoint) -> Result<TrainState> {
    let corrupt = |msg: String| CheckpointError::Corrupt { path: path.to_path_buf(), msg };
    let student = ck.group("student");
    let teacher = ck.group("teacher");
    let m = ck.group("adam_m");
    let v = ck.group("adam_v");
    if student.is_empty() || teacher.names() != student.names() || m.names() != student.names() || v.names() != student.names() {
        return Err(corrupt("parameter groups do not line up".into()));
    }
    let rng = ck.manifest.rng.restore().map_err(corrupt)?;
    let loss_history = ck
        .get("loss_history")
        .ok_or_else(|| corrupt("missing loss_history".into()))?
        .data()
        .to_vec();
    Ok(TrainState {
        student,
        teacher: TeacherState {
            params: teacher,
            momentum: f64::from_bits(ck.manifest.momentum_bits),
            center: ck.get("teacher_center").map(|t| t.data().to_vec()),
        },
        adam_m: m.tensors().to_vec(),
        adam_v: v.tensors().to_vec(),
        step: ck.manifest.step,
        epoch: ck.manifest.epoch,
        rng,
        loss_history,
    })
}

/// Load a state, requiring the manifest hash to equal `expected_hash`.
pub fn load_state(path: &Path, expected_hash: &str) -> Result<TrainState> {
    let ck = read_checkpoint(path)?;
    if ck.manifest.config_hash != expected_hash {
        return Err(CheckpointError::ConfigMismatch {
            path: path.to_path_buf(),
            expected: expected_hash.to_string(),
            found: ck.manifest.config_hash.clone(),
        });
    }
    state_from_checkpoint(path, &ck)
}
