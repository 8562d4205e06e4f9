//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "LGDL" | u32 version | u64 meta_len | meta (JSON) | u32 tensor_count |
//!   tensor_count × { u32 name_len | name | u32 rows | u32 cols | rows·cols × f64 }
//! ```
//!
//! The JSON block carries the hyperparameters, the model shape and the
//! vocabulary. Any short read or trailing data is reported as corruption.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierHead, DenseLayer};
use crate::contextual::{BiLstm, LstmParams};
use crate::embedding::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::label_attention::LabelEmbeddingSpace;
use crate::model::{ContextualSource, Model, ModelConfig, ParamGroup};
use crate::numerics::Matrix;
use crate::training::HyperParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGDL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub hyperparams: HyperParams,
    pub config: ModelConfig,
    pub embeddings_trainable: bool,
    /// Non-reserved vocabulary tokens in index order.
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, hyperparams: &HyperParams) -> Self {
        let tensors = model
            .param_layout()
            .into_iter()
            .zip(model.param_slices())
            .map(|(info, data)| NamedTensor {
                name: info.name,
                rows: info.rows,
                cols: info.cols,
                data: data.to_vec(),
            })
            .collect();
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            meta: CheckpointMeta {
                hyperparams: hyperparams.clone(),
                config: model.config.clone(),
                embeddings_trainable: model.embedding.as_ref().is_some_and(|e| e.trainable),
                vocab: model.vocab.tokens().to_vec(),
            },
            tensors,
        }
    }

    /// Rebuilds the model, checking every tensor against the expected layout.
    pub fn to_model(&self) -> Result<Model> {
        let config = self.meta.config.clone();
        config.validate().map_err(|e| Error::Corruption(format!("checkpoint config: {e}")))?;
        let vocab = Vocabulary::from_tokens(self.meta.vocab.clone())?;
        let l = config.label_count();
        let (embedding, encoder) = match config.contextual {
            ContextualSource::Bilstm => (
                Some(EmbeddingTable {
                    table: Matrix::zeros(vocab.len(), config.embedding_dim),
                    trainable: self.meta.embeddings_trainable,
                }),
                Some(BiLstm {
                    forward_cell: LstmParams::zeros(config.embedding_dim, config.hidden),
                    backward_cell: LstmParams::zeros(config.embedding_dim, config.hidden),
                }),
            ),
            ContextualSource::Precomputed { .. } => (None, None),
        };
        let spaces = if config.label_layer {
            (0..config.contextual.layer_count())
                .map(|_| {
                    LabelEmbeddingSpace::new(
                        config.labels.clone(),
                        (0..l).map(|_| Matrix::zeros(config.label_dim, config.prototypes)).collect(),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let head = ClassifierHead {
            compress: DenseLayer::zeros(config.head_input_dim(), config.compressed_dim),
            output: DenseLayer::zeros(config.compressed_dim, l),
        };
        let mut model = Model {
            config,
            vocab,
            embedding,
            encoder,
            spaces,
            head,
        };
        let layout = model.param_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Corruption(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for ((info, slot), t) in layout.iter().zip(model.param_slices_mut()).zip(&self.tensors) {
            if info.name != t.name || (info.rows, info.cols) != (t.rows, t.cols) {
                return Err(Error::Corruption(format!(
                    "tensor {} ({}x{}) where {} ({}x{}) was expected",
                    t.name, t.rows, t.cols, info.name, info.rows, info.cols
                )));
            }
            slot.copy_from_slice(&t.data);
        }
        if model.param_layout().iter().any(|p| p.group == ParamGroup::Embedding) {
            let pad_zero = model
                .embedding
                .as_ref()
                .is_some_and(|e| e.table.row(crate::embedding::PAD).iter().all(|&v| v == 0.0));
            if !pad_zero {
                return Err(Error::Corruption("PAD embedding row is not zero".into()));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Usage(format!("cannot encode checkpoint metadata: {e}")))?;
        let payload: usize = self.tensors.iter().map(|t| 12 + t.name.len() + 8 * t.data.len()).sum();
        let mut out = Vec::with_capacity(20 + meta.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Shape(format!("tensor {} data does not fill {}x{}", t.name, t.rows, t.cols)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Corruption("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = usize::try_from(r.u64()?).map_err(|_| Error::Corruption("metadata length overflow".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Corruption(format!("tensor {name} size overflow")))?;
            let data = r
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ModelCheckpoint { version, meta, tensors })
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &Model, hyperparams: &HyperParams, path: &Path) -> Result<()> {
    let bytes = ModelCheckpoint::from_model(model, hyperparams).to_bytes()?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("truncated at byte {} (needed {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
