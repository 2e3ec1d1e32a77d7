//! `RTAK` checkpoints: config and training state as a JSON header, the
//! song metadata index, then every parameter tensor by name.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainState;
use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::Result;
use crate::model::{ModelConfig, RtaModel};
use crate::numerics::{ParamStore, Tensor};
use crate::represent::SongMeta;

const MAGIC: &[u8; 4] = b"RTAK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    representer: String,
    aggregator: String,
    optimizer: String,
    model: ModelConfig,
    state: TrainState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: TrainState,
    pub meta: Arc<SongMeta>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn of(model: &RtaModel, state: &TrainState) -> Self {
        Checkpoint {
            model: model.config.clone(),
            state: state.clone(),
            meta: model.representer.meta().clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<RtaModel> {
        RtaModel::from_params(&self.model, self.params, self.meta)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            representer: format!("{:?}", self.model.representer.kind).to_lowercase(),
            aggregator: format!("{:?}", self.model.aggregator.kind).to_lowercase(),
            optimizer: "sgd".into(),
            model: self.model.clone(),
            state: self.state.clone(),
        };
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_FORMAT_VERSION);
        w.str(&serde_json::to_string(&header).expect("header serializes"));

        let meta = &self.meta;
        w.u64(meta.index.len() as u64);
        for row in &meta.index {
            for &v in row {
                w.u32(v);
            }
        }
        for present in &meta.present {
            w.u64(present.len() as u64);
            for &p in present {
                w.u8(p as u8);
            }
        }

        w.u32(self.params.len() as u32);
        for (_, p) in self.params.iter() {
            w.str(&p.name);
            w.u32(p.tensor.shape().len() as u32);
            for &d in p.tensor.shape() {
                w.u64(d as u64);
            }
            w.u8(p.weight_decay_exempt as u8);
            w.u8(p.frozen as u8);
            w.f32s(p.tensor.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let header: Header = serde_json::from_str(&r.str()?).map_err(|e| r.err(format!("bad header: {e}")))?;

        let n = r.u64()? as usize;
        let mut index = Vec::with_capacity(n.min(bytes.len()));
        for _ in 0..n {
            index.push([r.u32()?, r.u32()?, r.u32()?, r.u32()?]);
        }
        let mut present: [Vec<bool>; 4] = Default::default();
        for p in &mut present {
            let len = r.u64()? as usize;
            *p = (0..len).map(|_| r.u8().map(|b| b != 0)).collect::<Result<_>>()?;
        }
        let meta = SongMeta { index, present };
        meta.validate().map_err(|e| r.err(e.to_string()))?;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 4 {
                return Err(r.err(format!("parameter `{name}` has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let exempt = r.u8()? != 0;
            let frozen = r.u8()? != 0;
            let len = shape.iter().product();
            let t = Tensor::new(shape, r.f32s(len)?)?;
            let id = params.add(name, t, exempt)?;
            params.set_frozen(id, frozen);
        }
        r.finish()?;
        Ok(Checkpoint {
            model: header.model,
            state: header.state,
            meta: Arc::new(meta),
            params,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the checkpoint and its JSON sidecar; returns the checkpoint's sha256.
pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<String> {
    let bytes = checkpoint.to_bytes();
    let hash = sha256_hex(&bytes);
    write_atomic(path, &bytes)?;
    let sidecar = serde_json::json!({
        "format": "RTAK",
        "version": CHECKPOINT_FORMAT_VERSION,
        "sha256": hash,
        "model": checkpoint.model,
        "label": checkpoint.model.label(),
        "state": checkpoint.state,
        "parameters": checkpoint.params.iter().map(|(_, p)| serde_json::json!({"name": p.name, "shape": p.tensor.shape()})).collect::<Vec<_>>(),
    });
    write_atomic(&sidecar_path(path), (serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n").as_bytes())?;
    Ok(hash)
}

/// Reads a checkpoint and returns it with its sha256.
pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = read_file(path)?;
    let ck = Checkpoint::from_bytes(path, &bytes)?;
    Ok((ck, sha256_hex(&bytes)))
}
