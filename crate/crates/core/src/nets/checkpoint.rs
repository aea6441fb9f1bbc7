//! Checkpoints: a flat binary of named `f64` tensors plus a JSON manifest
//! describing the architecture.
//!
//! Binary layout (little endian): the 8-byte magic `THSCKPT1`, a `u64`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, a `u32`
//! rank, `u64` dimensions and the raw values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{build_head, Adapter, HeadSpec, LayerSlot, ModuleGraph, Origin, StemSpec};
use super::parts::{build_part, Interface, PartSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"THSCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotManifest {
    pub index: usize,
    pub part: PartSpec,
    pub interface: Interface,
    pub origin: Origin,
    pub frozen: bool,
    pub init: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub input: Vec<usize>,
    pub stem: StemSpec,
    pub stem_frozen: bool,
    pub head: HeadSpec,
    pub head_frozen: bool,
    pub slots: Vec<SlotManifest>,
}

impl Manifest {
    pub fn of(model: &ModuleGraph) -> Self {
        Self {
            format: "theseus-checkpoint/1".into(),
            input: model.input_shape.clone(),
            stem: model.stem.spec.clone(),
            stem_frozen: model.stem.frozen,
            head: model.head.spec.clone(),
            head_frozen: model.head.frozen,
            slots: model
                .slots
                .iter()
                .map(|s| SlotManifest {
                    index: s.index,
                    part: s.part.spec.clone(),
                    interface: s.part.interface.clone(),
                    origin: s.origin,
                    frozen: s.frozen,
                    init: s.part.init.clone(),
                })
                .collect(),
        }
    }
}

/// Path of the manifest written next to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

/// All parameters and batch-norm buffers under their full names.
pub fn state_tensors(model: &ModuleGraph) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    for (n, v) in model.named_buffers() {
        out.push((n, Tensor::new(vec![v.len()], v.clone()).expect("vector")));
    }
    out
}

pub fn save_checkpoint(model: &ModuleGraph, path: &Path) -> Result<()> {
    let f = fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), &state_tensors(model))?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&Manifest::of(model))?)?;
    Ok(())
}

/// Rebuilds a model from a manifest and named tensors. Every expected
/// tensor must be present with a matching shape, and nothing else.
pub fn restore(manifest: &Manifest, mut tensors: BTreeMap<String, Tensor>) -> Result<ModuleGraph> {
    let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };
    let stem_params = super::model::build_stem(&manifest.stem, &manifest.input, 0)
        .into_iter()
        .map(|(n, t)| take(format!("stem.{n}"), &t).map(|v| (n, v)))
        .collect::<Result<Vec<_>>>()?;
    let mut slots = Vec::with_capacity(manifest.slots.len());
    let mut last = manifest.input.clone();
    for (pos, s) in manifest.slots.iter().enumerate() {
        if s.index != pos + 1 {
            return Err(Error::Checkpoint(format!(
                "slot {} listed at position {}",
                s.index,
                pos + 1
            )));
        }
        let mut part = build_part(&s.part, &s.interface, 0)?;
        part.init = s.init.clone();
        let prefix = ModuleGraph::slot_prefix(s.index);
        for (n, t) in &mut part.params {
            *t = take(format!("{prefix}.{n}"), t)?;
        }
        for b in &mut part.bn {
            let like = Tensor::zeros(&[b.running_mean.len()]);
            b.running_mean = take(format!("{prefix}.{}.running_mean", b.name), &like)?.into_data();
            b.running_var = take(format!("{prefix}.{}.running_var", b.name), &like)?.into_data();
        }
        last = s.interface.output.clone();
        slots.push(LayerSlot {
            index: s.index,
            part,
            origin: s.origin,
            frozen: s.frozen,
        });
    }
    if manifest.slots.is_empty() {
        last = match &manifest.stem {
            StemSpec::Identity => manifest.input.clone(),
            StemSpec::Linear { dim, .. } => vec![*dim],
            StemSpec::Embedding { dim, .. } => vec![manifest.input[0], *dim],
        };
    }
    let head_params = build_head(&manifest.head, &last, 0)?
        .into_iter()
        .map(|(n, t)| take(format!("head.{n}"), &t).map(|v| (n, v)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(ModuleGraph {
        input_shape: manifest.input.clone(),
        stem: Adapter {
            spec: manifest.stem.clone(),
            params: stem_params,
            frozen: manifest.stem_frozen,
        },
        slots,
        head: Adapter {
            spec: manifest.head.clone(),
            params: head_params,
            frozen: manifest.head_frozen,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModuleGraph> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let tensors = read_tensors(std::io::BufReader::new(fs::File::open(path)?))?;
    restore(&manifest, tensors)
}
