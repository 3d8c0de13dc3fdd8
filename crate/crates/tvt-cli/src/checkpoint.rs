//! Checkpoint files: a JSON manifest (format version, spec hash, phase,
//! step, metric snapshot, parent id) followed by named tensor blobs (name,
//! dtype, shape, little-endian raw data) and a trailing integrity digest.
//!
//! The digest of everything before it is the checkpoint id; identical
//! training states produce byte-identical files. Optimizer moments ride
//! along as tensors under the reserved `opt:` namespace so a resumed run
//! continues bit-exactly; low-rank adapter factors keep their own `.lora.`
//! names and load independently of the base weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use tvt_core::optim::{AdamState, MomentSlot};
use tvt_core::tape::ParamStore;
use tvt_core::tensor::Tensor;

use crate::config::sha_hex;

const MAGIC: &[u8; 8] = b"TVTCKPT1";
const DTYPE_F64: &str = "f64";
pub const FORMAT_VERSION: u32 = 1;

/// Everything about a checkpoint except the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Hash of the model shapes the tensors belong to.
    pub spec_hash: String,
    /// Hash of the full experiment document that produced the file.
    pub config_hash: String,
    pub phase: String,
    pub step: u64,
    /// Scalar metric snapshot at save time (last step's loss terms).
    pub metrics: BTreeMap<String, f64>,
    /// Id of the checkpoint this one continues from.
    pub parent: Option<String>,
}

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An in-memory checkpoint: manifest plus uniquely named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<TensorBlob>,
}

fn is_opt_name(name: &str) -> bool {
    name.starts_with("opt:")
}

impl Checkpoint {
    /// Snapshots every parameter in the store (sorted by name) plus the
    /// given optimizer states under `opt:{tag}:{param}:{m|v|t}`.
    pub fn from_store(
        manifest: CheckpointManifest,
        store: &ParamStore,
        optimizers: &[(&str, &AdamState)],
    ) -> Self {
        let mut tensors: Vec<TensorBlob> = (0..store.len())
            .map(|id| {
                let t = store.get(id);
                TensorBlob {
                    name: store.name(id).to_string(),
                    dtype: DTYPE_F64.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        for &(tag, state) in optimizers {
            for (id, slot) in state.slots() {
                let pname = store.name(id);
                let n = slot.m.len();
                tensors.push(TensorBlob {
                    name: format!("opt:{tag}:{pname}:m"),
                    dtype: DTYPE_F64.to_string(),
                    shape: vec![n],
                    data: slot.m.clone(),
                });
                tensors.push(TensorBlob {
                    name: format!("opt:{tag}:{pname}:v"),
                    dtype: DTYPE_F64.to_string(),
                    shape: vec![n],
                    data: slot.v.clone(),
                });
                tensors.push(TensorBlob {
                    name: format!("opt:{tag}:{pname}:t"),
                    dtype: DTYPE_F64.to_string(),
                    shape: vec![1],
                    data: vec![slot.steps as f64],
                });
            }
        }
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Checkpoint { manifest, tensors }
    }

    /// Serializes to `path` and returns the checkpoint id (hex digest of
    /// the file body).
    pub fn write(&self, path: &Path) -> Result<String> {
        let mut names = BTreeMap::new();
        for t in &self.tensors {
            if names.insert(t.name.as_str(), ()).is_some() {
                bail!("duplicate tensor name {:?}", t.name);
            }
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let manifest = serde_json::to_vec(&self.manifest)?;
        buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        buf.extend_from_slice(&manifest);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize {
                bail!("tensor name too long: {:?}", t.name);
            }
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            let dtype = t.dtype.as_bytes();
            buf.push(u8::try_from(dtype.len()).context("dtype tag too long")?);
            buf.extend_from_slice(dtype);
            buf.push(u8::try_from(t.shape.len()).context("too many dimensions")?);
            let mut numel = 1usize;
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
                numel *= d;
            }
            if numel != t.data.len() {
                bail!(
                    "tensor {:?}: shape {:?} does not hold {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                );
            }
            buf.extend_from_slice(&((t.data.len() * 8) as u64).to_le_bytes());
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(&buf);
        let id = sha_hex(&buf);
        buf.extend_from_slice(&digest);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
        Ok(id)
    }

    /// Parses `path`, verifying structure and the trailing digest. Returns
    /// the checkpoint and its id.
    pub fn read(path: &Path) -> Result<(Self, String)> {
        let bytes =
            fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        if bytes.len() < MAGIC.len() + 32 {
            bail!("checkpoint {} is truncated", path.display());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let id = sha_hex(body);
        let mut expect = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            write!(expect, "{b:02x}").expect("hex into string");
        }
        if id != expect {
            bail!(
                "checkpoint {} failed its integrity check (stored {}, computed {})",
                path.display(),
                &expect[..12],
                &id[..12]
            );
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            bail!("{} is not a checkpoint file", path.display());
        }
        let mlen = r.u32()? as usize;
        let manifest: CheckpointManifest =
            serde_json::from_slice(r.take(mlen)?).context("decoding checkpoint manifest")?;
        if manifest.format_version != FORMAT_VERSION {
            bail!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            );
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        let mut last_name = String::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .context("tensor name is not UTF-8")?
                .to_string();
            if !last_name.is_empty() && name <= last_name {
                bail!("tensor names out of order at {name:?}");
            }
            last_name.clone_from(&name);
            let dlen = r.u8()? as usize;
            let dtype = std::str::from_utf8(r.take(dlen)?)
                .context("dtype tag is not UTF-8")?
                .to_string();
            if dtype != DTYPE_F64 {
                bail!("tensor {name:?} has unsupported dtype {dtype:?}");
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                shape.push(d);
                numel = numel
                    .checked_mul(d)
                    .with_context(|| format!("tensor {name:?} shape overflows"))?;
            }
            let blen = r.u64()? as usize;
            if blen != numel * 8 {
                bail!(
                    "tensor {name:?}: blob length {blen} does not match shape {shape:?}"
                );
            }
            let raw = r.take(blen)?;
            let mut data = Vec::with_capacity(numel);
            for ch in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(ch.try_into().expect("8-byte chunk")));
            }
            tensors.push(TensorBlob {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != body.len() {
            bail!("checkpoint has {} trailing bytes", body.len() - r.pos);
        }
        Ok((Checkpoint { manifest, tensors }, id))
    }

    /// Errors unless the checkpoint was written for these model shapes.
    pub fn require_spec(&self, spec_hash: &str) -> Result<()> {
        if self.manifest.spec_hash != spec_hash {
            bail!(
                "checkpoint was written for different model shapes (spec {} vs {})",
                &self.manifest.spec_hash[..12],
                &spec_hash[..12]
            );
        }
        Ok(())
    }

    /// Restores parameters selected by `pred`. Every parameter blob the
    /// predicate accepts must exist in the store with the right shape, and
    /// every store parameter the predicate accepts must be covered.
    /// Returns how many tensors were written.
    pub fn restore_matching(
        &self,
        store: &mut ParamStore,
        pred: impl Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut wanted: BTreeMap<String, ()> = (0..store.len())
            .filter(|&id| pred(store.name(id)))
            .map(|id| (store.name(id).to_string(), ()))
            .collect();
        let mut written = 0usize;
        for t in &self.tensors {
            if is_opt_name(&t.name) || !pred(&t.name) {
                continue;
            }
            let id = store
                .find(&t.name)
                .with_context(|| format!("checkpoint tensor {:?} has no home here", t.name))?;
            let dst = store.get_mut(id);
            if dst.shape() != t.shape.as_slice() {
                bail!(
                    "tensor {:?}: checkpoint shape {:?} vs model {:?}",
                    t.name,
                    t.shape,
                    dst.shape()
                );
            }
            dst.data_mut().copy_from_slice(&t.data);
            wanted.remove(&t.name);
            written += 1;
        }
        if let Some((name, _)) = wanted.into_iter().next() {
            bail!("checkpoint is missing parameter {name:?}");
        }
        Ok(written)
    }

    /// Restores every parameter; the store and checkpoint must cover each
    /// other exactly (the resume path).
    pub fn restore_all(&self, store: &mut ParamStore) -> Result<()> {
        let written = self.restore_matching(store, |_| true)?;
        if written != store.len() {
            bail!(
                "checkpoint holds {written} parameters but the store needs {}",
                store.len()
            );
        }
        Ok(())
    }

    /// Restores parameters under any of the given name prefixes.
    pub fn restore_prefixes(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize> {
        self.restore_matching(store, |n| prefixes.iter().any(|p| n.starts_with(p)))
    }

    /// Rebuilds the optimizer state saved under `tag`, resolving parameter
    /// names against the store.
    pub fn restore_optimizer(&self, tag: &str, store: &ParamStore) -> Result<AdamState> {
        let prefix = format!("opt:{tag}:");
        let mut parts: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>, Option<u64>)> =
            BTreeMap::new();
        for t in &self.tensors {
            let Some(rest) = t.name.strip_prefix(&prefix) else {
                continue;
            };
            let (pname, kind) = rest
                .rsplit_once(':')
                .with_context(|| format!("malformed optimizer tensor {:?}", t.name))?;
            let entry = parts.entry(pname.to_string()).or_default();
            match kind {
                "m" => entry.0 = Some(t.data.clone()),
                "v" => entry.1 = Some(t.data.clone()),
                "t" => entry.2 = Some(t.data[0] as u64),
                other => bail!("unknown optimizer tensor kind {other:?}"),
            }
        }
        let mut state = AdamState::new();
        for (pname, (m, v, steps)) in parts {
            let id = store
                .find(&pname)
                .with_context(|| format!("optimizer state for unknown parameter {pname:?}"))?;
            let (m, v, steps) = match (m, v, steps) {
                (Some(m), Some(v), Some(s)) => (m, v, s),
                _ => bail!("incomplete optimizer state for {pname:?}"),
            };
            if m.len() != store.get(id).numel() || v.len() != m.len() {
                bail!("optimizer moment size mismatch for {pname:?}");
            }
            state.insert_slot(id, MomentSlot { steps, m, v });
        }
        Ok(state)
    }

    /// The tensor named `name`, if present.
    pub fn tensor(&self, name: &str) -> Option<&TensorBlob> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Clones a parameter blob into a core tensor.
    pub fn to_tensor(blob: &TensorBlob) -> Result<Tensor> {
        Tensor::new(&blob.shape, blob.data.clone()).map_err(|e| anyhow::anyhow!("{e}"))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("checkpoint ends unexpectedly");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
