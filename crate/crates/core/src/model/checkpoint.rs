//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "PHVCKPT\0"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of JSON (CheckpointHeader)
//! data     every parameter in header order as f32 LE, row-major
//! ```
//!
//! The header carries the model kind, the stage tag, the seed, the model and
//! run configuration, the name/group/shape of every parameter and the SHA-256
//! of the data section, so the stage can be read without touching weights.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FlatModel, HierModel, Model, ModelConfig, Scale};
use crate::engine::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelKind {
    Flat { scale: Scale },
    Hier,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Flat { scale } => write!(f, "flat {scale}"),
            ModelKind::Hier => write!(f, "hierarchical"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub stage: String,
    pub seed: u64,
    pub model: ModelConfig,
    /// Snapshot of the run configuration that produced the weights.
    pub config: serde_json::Value,
    pub params: Vec<ParamMeta>,
    pub data_sha256: String,
}

/// A loaded model of either kind.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Flat(FlatModel),
    Hier(HierModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Flat(m) => m.kind(),
            AnyModel::Hier(m) => m.kind(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Flat(m) => &m.store,
            AnyModel::Hier(m) => &m.store,
        }
    }

    pub fn into_flat(self) -> Result<FlatModel> {
        match self {
            AnyModel::Flat(m) => Ok(m),
            AnyModel::Hier(_) => Err(Error::InvalidArgument("expected a flat model checkpoint".into())),
        }
    }

    pub fn into_hier(self) -> Result<HierModel> {
        match self {
            AnyModel::Hier(m) => Ok(m),
            AnyModel::Flat(_) => Err(Error::InvalidArgument("expected a hierarchical model checkpoint".into())),
        }
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint<M: Model>(
    model: &M,
    path: &Path,
    stage: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<()> {
    let store = model.store();
    let mut data = Vec::with_capacity(store.total_elements() * 4);
    let mut params = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        params.push(ParamMeta {
            name: p.name.clone(),
            group: p.group.clone(),
            rows: p.value.rows,
            cols: p.value.cols,
        });
        for v in &p.value.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        kind: model.kind(),
        stage: stage.to_string(),
        seed,
        model: model.config().clone(),
        config,
        params,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(&tmp, e));
        write(CHECKPOINT_MAGIC)?;
        write(&CHECKPOINT_VERSION.to_le_bytes())?;
        write(&(json.len() as u64).to_le_bytes())?;
        write(&json)?;
        write(&data)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn parse_preamble(path: &Path, pre: &[u8]) -> Result<usize> {
    if pre.len() < PREAMBLE || &pre[..8] != CHECKPOINT_MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(pre[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    Ok(u64::from_le_bytes(pre[12..20].try_into().unwrap()) as usize)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pre = [0u8; PREAMBLE];
    f.read_exact(&mut pre).map_err(|_| bad(path, "truncated preamble"))?;
    let hlen = parse_preamble(path, &pre)?;
    let mut json = vec![0u8; hlen];
    f.read_exact(&mut json).map_err(|_| bad(path, "truncated header"))?;
    serde_json::from_slice(&json).map_err(|e| bad(path, format!("bad header: {e}")))
}

fn read_all(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hlen = parse_preamble(path, &bytes)?;
    let body = bytes
        .get(PREAMBLE..PREAMBLE + hlen)
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(path, format!("bad header: {e}")))?;
    let data = &bytes[PREAMBLE + hlen..];
    if hex::encode(Sha256::digest(data)) != header.data_sha256 {
        return Err(bad(path, "weights do not match the recorded hash"));
    }
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    if data.len() != expected * 4 {
        return Err(bad(path, format!("{} data bytes for {expected} values", data.len())));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn fill(path: &Path, store: &mut ParamStore, header: &CheckpointHeader, values: &[f32]) -> Result<()> {
    if header.params.len() != store.len() {
        return Err(bad(
            path,
            format!("{} parameters stored, model has {}", header.params.len(), store.len()),
        ));
    }
    let mut offset = 0;
    for meta in &header.params {
        let id = store
            .find(&meta.name)
            .ok_or_else(|| bad(path, format!("model has no parameter {}", meta.name)))?;
        let target = store.value_mut(id);
        if target.shape() != (meta.rows, meta.cols) {
            return Err(bad(
                path,
                format!(
                    "{}: stored {}x{}, model {}x{}",
                    meta.name, meta.rows, meta.cols, target.rows, target.cols
                ),
            ));
        }
        let n = meta.rows * meta.cols;
        target.data.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

/// Loads a checkpoint, rebuilding the model from its recorded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, AnyModel)> {
    let (header, values) = read_all(path)?;
    let mut model = match header.kind {
        ModelKind::Flat { scale } => AnyModel::Flat(FlatModel::new(header.model.clone(), scale, 0)?),
        ModelKind::Hier => AnyModel::Hier(HierModel::new(header.model.clone(), 0)?),
    };
    let store = match &mut model {
        AnyModel::Flat(m) => &mut m.store,
        AnyModel::Hier(m) => &mut m.store,
    };
    fill(path, store, &header, &values)?;
    Ok((header, model))
}

/// Loads weights into an existing model, refusing a different kind or
/// configuration.
pub fn load_weights<M: Model>(model: &mut M, path: &Path) -> Result<CheckpointHeader> {
    let (header, values) = read_all(path)?;
    if header.kind != model.kind() {
        return Err(bad(path, format!("checkpoint holds a {} model, not {}", header.kind, model.kind())));
    }
    if &header.model != model.config() {
        return Err(bad(
            path,
            format!(
                "configuration mismatch: checkpoint {:?}, model {:?}",
                header.model,
                model.config()
            ),
        ));
    }
    fill(path, model.store_mut(), &header, &values)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MelodyTokenSeq;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: d,
            hidden: 6,
            expander_hidden: 5,
            use_chords: false,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = FlatModel::new(cfg(3), Scale::Bars2, 11).unwrap();
        save_checkpoint(&m, &path, "pretrain2", 11, serde_json::json!({"k": 1})).unwrap();
        let header = read_header(&path).unwrap();
        assert_eq!(header.stage, "pretrain2");
        assert_eq!(header.kind, ModelKind::Flat { scale: Scale::Bars2 });
        let (_, loaded) = load_checkpoint(&path).unwrap();
        let loaded = loaded.into_flat().unwrap();
        let mel = MelodyTokenSeq::new([60u8, 128, 62, 129].repeat(8)).unwrap();
        assert_eq!(m.encode(&mel, None).unwrap(), loaded.encode(&mel, None).unwrap());

        let mut other = FlatModel::new(cfg(3), Scale::Bars2, 99).unwrap();
        load_weights(&mut other, &path).unwrap();
        assert_eq!(m.encode(&mel, None).unwrap(), other.encode(&mel, None).unwrap());

        let mut wider = FlatModel::new(cfg(4), Scale::Bars2, 0).unwrap();
        let err = load_weights(&mut wider, &path).unwrap_err();
        assert!(err.to_string().contains("configuration mismatch"), "{err}");
        let mut hier = HierModel::new(cfg(3), 0).unwrap();
        assert!(load_weights(&mut hier, &path).is_err());
    }

    #[test]
    fn corrupted_weights_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = HierModel::new(cfg(2), 1).unwrap();
        save_checkpoint(&m, &path, "finetune1", 1, serde_json::Value::Null).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(read_header(&path).is_ok());
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
