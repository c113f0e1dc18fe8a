//! Binary checkpoint format.
//!
//! Layout: the magic line `PLCKPT01\n`, a little-endian u64 with the byte length
//! of a TOML header, the header, then every tensor as little-endian f64 values.
//! The header records the model configuration, free-form metadata and, per
//! tensor, its name, shape and offset (in values) into the data section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use recon_core::model::{GptModel, MatrixKind, ModelConfig};
use recon_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::error::{LabError, Result};

const MAGIC: &[u8; 9] = b"PLCKPT01\n";
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: u32,
    model: ModelSection,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// A model together with string metadata describing how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: GptModel,
    pub meta: BTreeMap<String, String>,
}

fn visit(model: &GptModel, mut f: impl FnMut(String, &Tensor)) {
    f("tok_emb".into(), &model.tok_emb);
    f("pos_emb".into(), &model.pos_emb);
    for (b, block) in model.blocks.iter().enumerate() {
        for (site, norm) in [
            ("attn_norm", &block.attn_norm),
            ("mlp_norm", &block.mlp_norm),
        ] {
            f(format!("blocks.{b}.{site}.gain"), &norm.gain);
            if let Some(bias) = &norm.bias {
                f(format!("blocks.{b}.{site}.bias"), bias);
            }
        }
        for kind in MatrixKind::ALL {
            let m = &block.matrices[kind.index()];
            let base = format!("blocks.{b}.{}", kind.name());
            f(format!("{base}.dense"), &m.dense);
            f(format!("{base}.pruned"), &m.pruned);
            f(format!("{base}.mask"), &m.mask);
        }
    }
    f("final_norm.gain".into(), &model.final_norm.gain);
    if let Some(bias) = &model.final_norm.bias {
        f("final_norm.bias".into(), bias);
    }
    if let Some(head) = &model.lm_head {
        f("lm_head".into(), head);
    }
}

fn visit_mut(model: &mut GptModel, mut f: impl FnMut(String, &mut Tensor)) {
    f("tok_emb".into(), &mut model.tok_emb);
    f("pos_emb".into(), &mut model.pos_emb);
    for (b, block) in model.blocks.iter_mut().enumerate() {
        for (site, norm) in [
            ("attn_norm", &mut block.attn_norm),
            ("mlp_norm", &mut block.mlp_norm),
        ] {
            f(format!("blocks.{b}.{site}.gain"), &mut norm.gain);
            if let Some(bias) = &mut norm.bias {
                f(format!("blocks.{b}.{site}.bias"), bias);
            }
        }
        for kind in MatrixKind::ALL {
            let m = &mut block.matrices[kind.index()];
            let base = format!("blocks.{b}.{}", kind.name());
            f(format!("{base}.dense"), &mut m.dense);
            f(format!("{base}.pruned"), &mut m.pruned);
            f(format!("{base}.mask"), &mut m.mask);
        }
    }
    f("final_norm.gain".into(), &mut model.final_norm.gain);
    if let Some(bias) = &mut model.final_norm.bias {
        f("final_norm.bias".into(), bias);
    }
    if let Some(head) = &mut model.lm_head {
        f("lm_head".into(), head);
    }
}

impl Checkpoint {
    pub fn new(model: GptModel) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut offset = 0;
        visit(&self.model, |name, t| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = Header {
            format: FORMAT,
            model: ModelSection::from(&self.model.config),
            meta: self.meta.clone(),
            tensors,
        };
        let text = toml::to_string(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| LabError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| bad("bad magic".into()))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length".into()));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err(bad("truncated header".into()));
        }
        let text = std::str::from_utf8(&rest[..header_len]).map_err(|e| bad(e.to_string()))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if header.format != FORMAT {
            return Err(bad(format!("unsupported format {}", header.format)));
        }
        let data = &rest[header_len..];
        let config: ModelConfig = header.model.to_config()?;
        let mut model = GptModel::init(config, 0)?;
        let index: BTreeMap<&str, &TensorEntry> = header
            .tensors
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        let mut problem = None;
        let mut seen = 0;
        visit_mut(&mut model, |name, t| {
            if problem.is_some() {
                return;
            }
            let Some(e) = index.get(name.as_str()) else {
                problem = Some(format!("missing tensor {name}"));
                return;
            };
            if e.shape != t.shape() {
                problem = Some(format!(
                    "{name}: shape {:?}, expected {:?}",
                    e.shape,
                    t.shape()
                ));
                return;
            }
            let (start, end) = (e.offset * 8, (e.offset + t.len()) * 8);
            if end > data.len() {
                problem = Some(format!("{name}: data out of bounds"));
                return;
            }
            for (v, chunk) in t
                .data_mut()
                .iter_mut()
                .zip(data[start..end].chunks_exact(8))
            {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            seen += 1;
        });
        if let Some(p) = problem {
            return Err(bad(p));
        }
        if seen != header.tensors.len() {
            return Err(bad(format!(
                "{} unexpected tensors",
                header.tensors.len() - seen
            )));
        }
        for block in &model.blocks {
            for m in &block.matrices {
                if m.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) || m.mask_violations() > 0 {
                    return Err(bad("mask is not binary or pruned weights violate it".into()));
                }
            }
        }
        Ok(Self {
            model,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}
