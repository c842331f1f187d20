//! Versioned parameter container.
//!
//! Layout: `ADDVCKPT`, `u32` version, `u32` manifest length, manifest JSON,
//! `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u64` extents and little-endian `f32` values. A SHA-256 of everything
//! before it closes the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::losses::LossConfig;
use crate::nets::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADDVCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_bins: usize,
    pub tau: f64,
    pub uniformizing: bool,
    pub sharpening: bool,
    pub architecture_hash: String,
    pub model: ModelConfig,
    pub loss: Option<LossConfig>,
    /// Epochs completed when the file was written.
    pub epoch: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of parameter names and shapes, in order.
pub fn architecture_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update(format!("{:?};", t.shape()).as_bytes());
    }
    hex(&h.finalize())
}

pub fn encode(model: &Model, loss: Option<&LossConfig>, epoch: usize) -> Result<Vec<u8>> {
    let manifest = Manifest {
        version: VERSION,
        n_bins: model.config.n_bins,
        tau: model.config.tau,
        uniformizing: loss.is_none_or(|l| l.uniformizing),
        sharpening: loss.is_none_or(|l| l.sharpening),
        architecture_hash: architecture_hash(&model.params),
        model: model.config.clone(),
        loss: loss.copied(),
        epoch,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + json.len() + 4 * model.params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parse and verify a checkpoint, rebuilding the model it describes.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, Manifest)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let truncated = || bad("truncated checkpoint");
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mlen = r.u32().ok_or_else(truncated)? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(mlen).ok_or_else(truncated)?).map_err(|e| bad(&e.to_string()))?;
    let mut model = Model::new(manifest.model.clone())?;
    if architecture_hash(&model.params) != manifest.architecture_hash {
        return Err(bad("architecture hash does not match the manifest"));
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    if count != model.params.len() {
        return Err(bad("parameter count does not match the architecture"));
    }
    for _ in 0..count {
        let nlen = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(nlen).ok_or_else(truncated)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))?;
        model.params.assign(&name, t).map_err(|e| bad(&e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((model, manifest))
}

/// Written to a sibling temporary file first, then renamed.
pub fn save(path: &Path, model: &Model, loss: Option<&LossConfig>, epoch: usize) -> Result<()> {
    let bytes = encode(model, loss, epoch)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Round parameters through `f32` so in-memory models match their files.
pub fn quantize(params: &mut ParamSet) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
