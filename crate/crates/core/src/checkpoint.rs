//! Single-file checkpoint archive.
//!
//! Layout: `GZCK` magic, `u32` format version, `u64` metadata length, JSON
//! metadata, raw little-endian array payloads in metadata order, and a
//! trailing SHA-256 of every preceding byte.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GazeModel, HeadKind, ModelConfig};
use crate::nll::{BankMeta, LabelBank};

pub const MAGIC: &[u8; 4] = b"GZCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub provenance: String,
    pub heads: Vec<HeadKind>,
    pub banks: Vec<BankMeta>,
    arrays: Vec<ArrayEntry>,
}

/// Training metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub epoch: usize,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: GazeModel,
    pub banks: Vec<LabelBank>,
}

pub fn save_checkpoint(path: &Path, model: &GazeModel, banks: &[&LabelBank], prov: &Provenance) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit_params(&mut |name, p| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            dtype: DType::F32,
            shape: [p.value.nrows(), p.value.ncols()],
        });
        for v in p.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    for b in banks {
        for (suffix, arr) in [("u", &b.u), ("y_hat", &b.y_hat)] {
            arrays.push(ArrayEntry {
                name: format!("bank.{}.{suffix}", b.name),
                dtype: DType::F64,
                shape: [arr.nrows(), arr.ncols()],
            });
            for v in arr.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config_hash: model.config().config_hash(),
        model: model.config().clone(),
        seed: prov.seed,
        epoch: prov.epoch,
        provenance: prov.note.clone(),
        heads: model.attached_heads(),
        banks: banks.iter().map(|b| b.meta()).collect(),
        arrays,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len() + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("ckpt.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint. With `expected`, the stored architecture hash must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(Error::Corrupt(format!("{}: file too short ({} bytes)", path.display(), bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Corrupt(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt(format!("{}: checksum mismatch (truncated or modified)", path.display())));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint format version {version}")));
    }
    let meta_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Corrupt("metadata length out of range".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&body[16..meta_end]).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    if meta.config_hash != meta.model.config_hash() {
        return Err(Error::Corrupt("stored config hash does not match stored config".into()));
    }
    if let Some(cfg) = expected {
        let want = cfg.config_hash();
        if want != meta.config_hash {
            return Err(Error::HashMismatch {
                expected: want,
                found: meta.config_hash.clone(),
            });
        }
    }

    let mut f32s: HashMap<String, Array2<f32>> = HashMap::new();
    let mut f64s: HashMap<String, Array2<f64>> = HashMap::new();
    let mut off = meta_end;
    for e in &meta.arrays {
        let n = e.shape[0] * e.shape[1];
        let width = match e.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let end = off + n * width;
        if end > body.len() {
            return Err(Error::Corrupt(format!("array {} runs past the end of the file", e.name)));
        }
        let chunk = &body[off..end];
        match e.dtype {
            DType::F32 => {
                let v: Vec<f32> = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                f32s.insert(
                    e.name.clone(),
                    Array2::from_shape_vec((e.shape[0], e.shape[1]), v).expect("shape matches length"),
                );
            }
            DType::F64 => {
                let v: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                f64s.insert(
                    e.name.clone(),
                    Array2::from_shape_vec((e.shape[0], e.shape[1]), v).expect("shape matches length"),
                );
            }
        }
        off = end;
    }
    if off != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after arrays", body.len() - off)));
    }

    let mut model = GazeModel::new(meta.model.clone())?;
    for &h in &meta.heads {
        model.attach_head(h, 0);
    }
    let mut problem: Option<String> = None;
    let mut used = 0usize;
    model.visit_params_mut(&mut |name, p| match f32s.get(name) {
        Some(a) if a.dim() == p.value.dim() => {
            p.value.assign(a);
            used += 1;
        }
        Some(a) => {
            problem.get_or_insert(format!("{name}: stored shape {:?}, model shape {:?}", a.dim(), p.value.dim()));
        }
        None => {
            problem.get_or_insert(format!("missing parameter {name}"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Corrupt(p));
    }
    if used != f32s.len() {
        return Err(Error::Corrupt(format!("{} unrecognized parameter arrays", f32s.len() - used)));
    }

    let mut banks = Vec::new();
    for bm in &meta.banks {
        let take = |suffix: &str| {
            f64s.get(&format!("bank.{}.{suffix}", bm.name))
                .cloned()
                .ok_or_else(|| Error::Corrupt(format!("bank {} lacks `{suffix}`", bm.name)))
        };
        banks.push(LabelBank::from_parts(bm.clone(), take("u")?, take("y_hat")?)?);
    }
    Ok(Checkpoint { meta, model, banks })
}
