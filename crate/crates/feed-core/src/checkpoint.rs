//! Bit-exact checkpoint persistence.
//!
//! File layout: the line `FEEDPK 1\n`, then for each tensor a text header
//! `name rank dim...\n` followed by the row-major little-endian 8-byte
//! IEEE-754 payload, and a final `END\n` line. Metadata (dims record, config
//! fingerprint, optional rng state) rides along as reserved `__meta.*`
//! tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamStore;
use crate::tensor::TensorBase;

type Tensor = TensorBase<f64>;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "FEEDPK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt magic: expected `{MAGIC}`")]
    BadMagic,
    #[error("unsupported checkpoint version `{found}`; supported: {CHECKPOINT_VERSION}")]
    UnsupportedVersion { found: String },
    #[error("malformed tensor header `{line}`")]
    BadHeader { line: String },
    #[error("tensor `{name}`: payload truncated, wanted {expected} bytes, got {got}")]
    Truncated {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("missing END marker")]
    MissingEnd,
    #[error("duplicate tensor `{name}`")]
    DuplicateTensor { name: String },
    #[error("tensor name `{name}` may not contain whitespace")]
    BadName { name: String },
}

/// Named tensors plus the metadata the format reserves.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: BTreeMap<String, Tensor>,
    /// Free-form dimension record, e.g. latent dims for stage-1 models.
    pub dims: Vec<usize>,
    /// Fingerprint of the configuration that produced the checkpoint.
    pub fingerprint: u64,
    pub rng_state: Option<Vec<u8>>,
}

impl Checkpoint {
    pub fn new(dims: Vec<usize>, fingerprint: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            tensors: BTreeMap::new(),
            dims,
            fingerprint,
            rng_state: None,
        }
    }

    /// Add every tensor of a store under its own name.
    pub fn insert_store(&mut self, store: &ParamStore<f64>) {
        for (name, t) in store.iter() {
            self.tensors.insert(name.clone(), t.detached());
        }
    }

    /// Extract the tensors whose names start with any of the given prefixes.
    pub fn store_with_prefixes(&self, prefixes: &[&str]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                store.insert(name.clone(), t.detached());
            }
        }
        store
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    checkpoint: &Checkpoint,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(format!("{MAGIC} {}\n", checkpoint.version).as_bytes());

    let write_tensor = |buf: &mut Vec<u8>, name: &str, t: &Tensor| -> Result<(), CheckpointError> {
        if name.chars().any(char::is_whitespace) {
            return Err(CheckpointError::BadName {
                name: name.to_string(),
            });
        }
        let mut header = format!("{name} {}", t.shape().len());
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        buf.extend_from_slice(header.as_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    };

    let dims_tensor = Tensor::from_vec(
        vec![checkpoint.dims.len()],
        checkpoint.dims.iter().map(|d| *d as f64).collect(),
    )
    .expect("dims tensor");
    write_tensor(&mut buf, "__meta.dims", &dims_tensor)?;
    let fp_tensor = Tensor::from_vec(vec![1], vec![f64::from_bits(checkpoint.fingerprint)])
        .expect("fingerprint tensor");
    write_tensor(&mut buf, "__meta.fingerprint", &fp_tensor)?;
    if let Some(state) = &checkpoint.rng_state {
        let rng_tensor = Tensor::from_vec(
            vec![state.len()],
            state.iter().map(|b| *b as f64).collect(),
        )
        .expect("rng tensor");
        write_tensor(&mut buf, "__meta.rng", &rng_tensor)?;
    }
    for (name, t) in &checkpoint.tensors {
        write_tensor(&mut buf, name, t)?;
    }
    buf.extend_from_slice(b"END\n");
    fs::write(path, buf).map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;

    let mut pos = 0usize;
    let read_line = |bytes: &[u8], pos: &mut usize| -> Option<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return None;
        }
        let line = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        *pos += 1;
        Some(line)
    };

    let magic_line = read_line(&bytes, &mut pos).ok_or(CheckpointError::BadMagic)?;
    let mut parts = magic_line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let version_str = parts.next().unwrap_or("").to_string();
    if version_str != CHECKPOINT_VERSION.to_string() {
        return Err(CheckpointError::UnsupportedVersion { found: version_str });
    }

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    loop {
        let line = read_line(&bytes, &mut pos).ok_or(CheckpointError::MissingEnd)?;
        if line == "END" {
            break;
        }
        let mut fields = line.split_whitespace();
        let name = fields
            .next()
            .ok_or_else(|| CheckpointError::BadHeader { line: line.clone() })?
            .to_string();
        let rank: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CheckpointError::BadHeader { line: line.clone() })?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CheckpointError::BadHeader { line: line.clone() })?;
            shape.push(d);
        }
        if fields.next().is_some() {
            return Err(CheckpointError::BadHeader { line });
        }
        let count: usize = shape.iter().product();
        let expected = count * 8;
        if pos + expected > bytes.len() {
            return Err(CheckpointError::Truncated {
                name,
                expected,
                got: bytes.len().saturating_sub(pos),
            });
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let mut raw = [0u8; 8];
            raw.copy_from_slice(&bytes[pos + i * 8..pos + i * 8 + 8]);
            data.push(f64::from_le_bytes(raw));
        }
        pos += expected;
        if tensors
            .insert(name.clone(), Tensor::from_vec(shape, data).map_err(|_| {
                CheckpointError::BadHeader { line: line.clone() }
            })?)
            .is_some()
        {
            return Err(CheckpointError::DuplicateTensor { name });
        }
    }

    let dims = tensors
        .remove("__meta.dims")
        .map(|t| t.data().iter().map(|v| *v as usize).collect())
        .unwrap_or_default();
    let fingerprint = tensors
        .remove("__meta.fingerprint")
        .map(|t| t.data()[0].to_bits())
        .unwrap_or(0);
    let rng_state = tensors
        .remove("__meta.rng")
        .map(|t| t.data().iter().map(|v| *v as u8).collect());

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        tensors,
        dims,
        fingerprint,
        rng_state,
    })
}
