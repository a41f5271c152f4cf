//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `PHNCKPT\0`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header, then every parameter
//! buffer in store order followed by each batch-norm running mean and variance,
//! all as little-endian `f64` bit patterns.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FeatureVocab, Schema};
use crate::error::{PhnError, Result};
use crate::model::{ModelConfig, PhnModel};
use crate::scalar::Scalar;
use crate::tensor::Parameterized;

pub const MAGIC: &[u8; 8] = b"PHNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub scalar: String,
    pub config: ModelConfig,
    pub schema: Option<Schema>,
    pub vocab: Option<FeatureVocab>,
    pub tensors: Vec<TensorEntry>,
    pub bn_widths: Vec<usize>,
}

/// A loaded model plus the data preprocessing it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: PhnModel<T>,
    pub schema: Option<Schema>,
    pub vocab: Option<FeatureVocab>,
}

pub fn to_bytes<T: Scalar>(
    model: &PhnModel<T>,
    schema: Option<&Schema>,
    vocab: Option<&FeatureVocab>,
) -> Result<Vec<u8>> {
    let store = model.params();
    let header = CheckpointHeader {
        scalar: T::NAME.to_string(),
        config: model.config().clone(),
        schema: schema.cloned(),
        vocab: vocab.cloned(),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        bn_widths: model.bn_states().iter().map(|s| s.running_mean.len()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| PhnError::Checkpoint(format!("encoding header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |values: &[T]| {
        for v in values {
            out.extend_from_slice(&v.as_f64().to_bits().to_le_bytes());
        }
    };
    for (_, t) in store.iter() {
        put(t.values());
    }
    for s in model.bn_states() {
        put(&s.running_mean);
        put(&s.running_var);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PhnError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes")))))
            .collect())
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PhnError::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PhnError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| PhnError::Checkpoint(format!("decoding header: {e}")))?;
    if header.scalar != T::NAME {
        return Err(PhnError::Checkpoint(format!(
            "checkpoint holds {} parameters, loader expects {}",
            header.scalar,
            T::NAME
        )));
    }
    let mut model = PhnModel::<T>::build(&header.config)?;
    let expected: Vec<TensorEntry> = model
        .params()
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.tensors {
        return Err(PhnError::Checkpoint(
            "tensor table does not match the stored config".into(),
        ));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let n = model.params().get(id).len();
        let values = r.values::<T>(n)?;
        model.params_mut().get_mut(id).values_mut().copy_from_slice(&values);
    }
    let widths: Vec<usize> = model.bn_states().iter().map(|s| s.running_mean.len()).collect();
    if widths != header.bn_widths {
        return Err(PhnError::Checkpoint("batch-norm layout mismatch".into()));
    }
    for state in model.bn_states_mut() {
        let n = state.running_mean.len();
        state.running_mean = r.values(n)?;
        state.running_var = r.values(n)?;
    }
    if r.pos != bytes.len() {
        return Err(PhnError::Checkpoint("trailing bytes after parameters".into()));
    }
    let mut vocab = header.vocab;
    if let Some(v) = vocab.as_mut() {
        v.rebuild_maps();
    }
    Ok(Checkpoint {
        model,
        schema: header.schema,
        vocab,
    })
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &PhnModel<T>,
    schema: Option<&Schema>,
    vocab: Option<&FeatureVocab>,
) -> Result<()> {
    let bytes = to_bytes(model, schema, vocab)?;
    fs::write(path, bytes).map_err(|e| PhnError::io(format!("writing {}", path.display()), e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| PhnError::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PhnError::io(format!("reading {}", path.display()), e))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
