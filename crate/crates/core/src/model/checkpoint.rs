//! Binary checkpoints: `PECK` magic, version, kind, a JSON header and the
//! raw little-endian `f32` tensors listed in the header.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cca::CcaProjection;
use crate::container::{read_f32s, read_u32};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::nn::Real;

use super::{EncoderConfig, ModelConfig, ModelMeta, PerModality, SnippetModel, TwoTowerModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PECK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint file contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Passage = 1,
    Snippet = 2,
}

impl CheckpointKind {
    fn from_u32(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Self::Passage),
            2 => Ok(Self::Snippet),
            _ => Err(Error::Format(format!("unknown checkpoint kind {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PassageHeader {
    config: ModelConfig,
    norm: PerModality<NormStats>,
    frozen: PerModality<bool>,
    cca: Option<CcaProjection>,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnippetHeader {
    sheet: EncoderConfig,
    audio: EncoderConfig,
    norm: PerModality<NormStats>,
    cca: Option<CcaProjection>,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of checkpoint bytes; identifies the model that built an index.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a checkpoint file.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fingerprint(&bytes))
}

type TensorWalk<'a, F> = dyn FnMut(&mut dyn FnMut(&str, Vec<usize>, &mut [F])) + 'a;

fn walk_passage<F: Real>(m: &mut TwoTowerModel<F>, f: &mut dyn FnMut(&str, Vec<usize>, &mut [F])) {
    m.visit_all(&mut |name, p| f(name, p.shape, p.value));
    m.sheet.encoder.visit_buffers("sheet.encoder", &mut |n, b| f(n, vec![b.len()], b));
    m.audio.encoder.visit_buffers("audio.encoder", &mut |n, b| f(n, vec![b.len()], b));
}

fn walk_snippet<F: Real>(m: &mut SnippetModel<F>, f: &mut dyn FnMut(&str, Vec<usize>, &mut [F])) {
    m.visit_all(&mut |name, p| f(name, p.shape, p.value));
    m.sheet.visit_buffers("sheet.encoder", &mut |n, b| f(n, vec![b.len()], b));
    m.audio.visit_buffers("audio.encoder", &mut |n, b| f(n, vec![b.len()], b));
}

fn gather<F: Real>(walk: &mut TensorWalk<'_, F>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    walk(&mut |name, shape, values| {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape,
        });
        for v in values.iter() {
            data.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    });
    (entries, data)
}

fn scatter<F: Real>(walk: &mut TensorWalk<'_, F>, entries: &[TensorEntry], data: &[f32]) -> Result<()> {
    let mut idx = 0;
    let mut offset = 0;
    let mut err = None;
    walk(&mut |name, shape, values| {
        if err.is_some() {
            return;
        }
        match entries.get(idx) {
            Some(e) if e.name == name && e.shape == shape => {
                let n = values.len();
                if offset + n > data.len() {
                    err = Some(Error::Format("checkpoint tensor data truncated".into()));
                    return;
                }
                for (dst, src) in values.iter_mut().zip(&data[offset..offset + n]) {
                    *dst = F::from_f32(*src).unwrap();
                }
                offset += n;
            }
            Some(e) => {
                err = Some(Error::Format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                    e.name, e.shape
                )))
            }
            None => err = Some(Error::Format(format!("checkpoint lacks tensor {name}"))),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != entries.len() || offset != data.len() {
        return Err(Error::Format("checkpoint has extra tensor data".into()));
    }
    Ok(())
}

fn assemble(kind: CheckpointKind, header: &[u8], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(data);
    out
}

/// Parses the fixed preamble, returning the kind, header bytes and tensor data.
fn split(bytes: &[u8]) -> Result<(CheckpointKind, &[u8], Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let kind = CheckpointKind::from_u32(read_u32(bytes, 8))?;
    let hlen = read_u32(bytes, 12) as usize;
    let body = &bytes[16..];
    if body.len() < hlen || (body.len() - hlen) % 4 != 0 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let data = read_f32s(&body[hlen..]);
    Ok((kind, &body[..hlen], data))
}

/// Reads only the kind of a checkpoint.
pub fn peek_kind(bytes: &[u8]) -> Result<CheckpointKind> {
    split(bytes).map(|(k, _, _)| k)
}

pub fn passage_to_bytes<F: Real>(model: &TwoTowerModel<F>) -> Result<Vec<u8>> {
    let mut m = model.clone();
    let (tensors, data) = gather::<F>(&mut |f| walk_passage(&mut m, f));
    let header = PassageHeader {
        config: model.config,
        norm: model.norm,
        frozen: model.frozen,
        cca: model.cca.clone(),
        meta: model.meta.clone(),
        tensors,
    };
    Ok(assemble(CheckpointKind::Passage, &serde_json::to_vec(&header)?, &data))
}

pub fn passage_from_bytes<F: Real>(bytes: &[u8]) -> Result<TwoTowerModel<F>> {
    let (kind, header, data) = split(bytes)?;
    if kind != CheckpointKind::Passage {
        return Err(Error::Format("expected a passage checkpoint, found a snippet checkpoint".into()));
    }
    let h: PassageHeader = serde_json::from_slice(header)?;
    let mut m = TwoTowerModel::<F>::new(h.config, h.meta.seed)?;
    scatter::<F>(&mut |f| walk_passage(&mut m, f), &h.tensors, &data)?;
    m.norm = h.norm;
    m.frozen = h.frozen;
    m.cca = h.cca;
    m.meta = h.meta;
    Ok(m)
}

pub fn snippet_to_bytes<F: Real>(model: &SnippetModel<F>) -> Result<Vec<u8>> {
    let mut m = model.clone();
    let (tensors, data) = gather::<F>(&mut |f| walk_snippet(&mut m, f));
    let header = SnippetHeader {
        sheet: model.sheet.config,
        audio: model.audio.config,
        norm: model.norm,
        cca: model.cca.clone(),
        meta: model.meta.clone(),
        tensors,
    };
    Ok(assemble(CheckpointKind::Snippet, &serde_json::to_vec(&header)?, &data))
}

pub fn snippet_from_bytes<F: Real>(bytes: &[u8]) -> Result<SnippetModel<F>> {
    let (kind, header, data) = split(bytes)?;
    if kind != CheckpointKind::Snippet {
        return Err(Error::Format("expected a snippet checkpoint, found a passage checkpoint".into()));
    }
    let h: SnippetHeader = serde_json::from_slice(header)?;
    let mut m = SnippetModel::<F>::new(h.sheet, h.audio, h.meta.seed)?;
    scatter::<F>(&mut |f| walk_snippet(&mut m, f), &h.tensors, &data)?;
    m.norm = h.norm;
    m.cca = h.cca;
    m.meta = h.meta;
    Ok(m)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_passage_model<F: Real>(model: &TwoTowerModel<F>, path: &Path) -> Result<()> {
    write(path, &passage_to_bytes(model)?)
}

pub fn load_passage_model<F: Real>(path: &Path) -> Result<TwoTowerModel<F>> {
    passage_from_bytes(&read(path)?)
}

pub fn save_snippet_model<F: Real>(model: &SnippetModel<F>, path: &Path) -> Result<()> {
    write(path, &snippet_to_bytes(model)?)
}

pub fn load_snippet_model<F: Real>(path: &Path) -> Result<SnippetModel<F>> {
    snippet_from_bytes(&read(path)?)
}

/// Either kind of stored model.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Passage(TwoTowerModel<f32>),
    Snippet(SnippetModel<f32>),
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let bytes = read(path)?;
    match peek_kind(&bytes)? {
        CheckpointKind::Passage => passage_from_bytes(&bytes).map(AnyModel::Passage),
        CheckpointKind::Snippet => snippet_from_bytes(&bytes).map(AnyModel::Snippet),
    }
}

/// Builds a passage model of shape `config` whose encoders (and input
/// statistics) come from a snippet checkpoint; the recurrent and
/// projection layers are freshly initialised from `seed`.
pub fn passage_from_snippet_checkpoint(
    path: &Path,
    config: ModelConfig,
    seed: u64,
) -> Result<TwoTowerModel<f32>> {
    let snippet = load_snippet_model::<f32>(path)?;
    let mut m = TwoTowerModel::new(config, seed)?;
    m.load_encoders(&snippet)?;
    Ok(m)
}
