//! Tensor container: `b"NPCA"`, a little-endian `u32` format version, a
//! little-endian `u64` metadata length, the JSON metadata, then every tensor
//! as row-major little-endian `f64` in the order the metadata lists them.

use std::path::Path;

use neural_pca::data::DataKind;
use neural_pca::{build_variant, BlockStats, Matrix, Mode, NeuralPcaModel, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"NPCA";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockMeta {
    pub eps: f64,
    pub rotate: bool,
    pub mode: Mode,
    pub has_stats: bool,
    pub has_v_tilde: bool,
    pub has_last_v: bool,
    pub degenerate: bool,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub variant: Variant,
    pub dim: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub block: Option<BlockMeta>,
    pub has_tail: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentMeta {
    pub variant: Variant,
    pub dim: usize,
    pub n_classes: usize,
    pub config_hash: String,
    pub data_kind: DataKind,
    /// Splits present, each stored as `z.<split>` and `y.<split>`.
    pub splits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Contents {
    Model(ModelMeta),
    Latents(LatentMeta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub contents: Contents,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub contents: Contents,
    pub tensors: Vec<(String, Matrix)>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let meta = Metadata {
            contents: self.contents.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorInfo {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let payload: usize = self.tensors.iter().map(|(_, m)| m.as_slice().len() * 8).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("checkpoint truncated before header end"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("not an NPCA container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported container version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(HEADER_LEN))
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| corrupt("metadata length exceeds file size"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..end])
            .map_err(|e| corrupt(format!("metadata: {e}")))?;
        let mut at = end;
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            let n = t
                .rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| corrupt(format!("tensor {} too large", t.name)))?;
            let chunk = bytes
                .get(at..at + n)
                .ok_or_else(|| corrupt(format!("payload truncated in tensor {}", t.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_vec(t.rows, t.cols, data).map_err(|e| corrupt(e.to_string()))?;
            tensors.push((t.name.clone(), m));
            at += n;
        }
        if at != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes after payload", bytes.len() - at)));
        }
        Ok(Container {
            contents: meta.contents,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, CliError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }
}

pub fn model_container(model: &NeuralPcaModel, config: &RunConfig) -> Container {
    let mut tensors: Vec<(String, Matrix)> = model
        .params()
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("param.{i}"), p.clone()))
        .collect();
    tensors.push(("base.sigmas".into(), Matrix::row_vector(model.base.sigmas())));
    let block = model.block.as_ref().map(|b| {
        if let Some(s) = &b.stats {
            tensors.push(("block.mu_bar".into(), Matrix::row_vector(&s.mu_bar)));
            tensors.push(("block.sigma_bar".into(), Matrix::row_vector(&s.sigma_bar)));
            if let Some(v) = &s.v_tilde {
                tensors.push(("block.v_tilde".into(), v.clone()));
            }
        }
        if let Some(v) = &b.last_v {
            tensors.push(("block.last_v".into(), v.clone()));
        }
        BlockMeta {
            eps: b.eps,
            rotate: b.rotate,
            mode: b.mode,
            has_stats: b.stats.is_some(),
            has_v_tilde: b.stats.as_ref().is_some_and(|s| s.v_tilde.is_some()),
            has_last_v: b.last_v.is_some(),
            degenerate: b.stats.as_ref().is_some_and(|s| s.degenerate),
            batches: b.stats.as_ref().map_or(0, |s| s.batches),
        }
    });
    Container {
        contents: Contents::Model(ModelMeta {
            variant: model.variant,
            dim: model.dim(),
            config: config.clone(),
            config_hash: config.hash(),
            block,
            has_tail: model.tail.is_some(),
        }),
        tensors,
    }
}

fn row(m: &Matrix, name: &str, n: usize) -> Result<Vec<f64>, CliError> {
    if m.shape() != (1, n) {
        return Err(corrupt(format!("{name} has shape {:?}, expected (1, {n})", m.shape())));
    }
    Ok(m.as_slice().to_vec())
}

/// Rebuilds the architecture from the stored config, then overwrites every
/// parameter and statistic from the payload.
pub fn model_from_container(c: &Container) -> Result<(NeuralPcaModel, RunConfig), CliError> {
    let meta = match &c.contents {
        Contents::Model(m) => m,
        Contents::Latents(_) => return Err(corrupt("expected a model checkpoint, found latents")),
    };
    if meta.config.hash() != meta.config_hash {
        return Err(corrupt("stored config does not match its hash"));
    }
    if meta.config.variant != meta.variant {
        return Err(corrupt("variant disagrees with stored config"));
    }
    let mut model = build_variant(&meta.config.model_spec(meta.dim))
        .map_err(|e| corrupt(format!("cannot rebuild model: {e}")))?;
    if model.tail.is_some() != meta.has_tail || model.block.is_some() != meta.block.is_some() {
        return Err(corrupt("layer layout disagrees with variant"));
    }
    let n = meta.dim;
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let name = format!("param.{i}");
        let t = c.tensor(&name)?;
        if t.shape() != p.shape() {
            return Err(corrupt(format!(
                "{name} has shape {:?}, model expects {:?}",
                t.shape(),
                p.shape()
            )));
        }
        *p = t.clone();
    }
    let sigmas = row(c.tensor("base.sigmas")?, "base.sigmas", n)?;
    if sigmas.as_slice() != model.base.sigmas() {
        return Err(corrupt("base density disagrees with stored config"));
    }
    if let (Some(b), Some(bm)) = (model.block.as_mut(), meta.block.as_ref()) {
        if bm.rotate != b.rotate {
            return Err(corrupt("block rotation flag disagrees with variant"));
        }
        b.eps = bm.eps;
        b.mode = bm.mode;
        b.stats = if bm.has_stats {
            let v_tilde = if bm.has_v_tilde {
                let v = c.tensor("block.v_tilde")?;
                if v.shape() != (n, n) {
                    return Err(corrupt("block.v_tilde is not n x n"));
                }
                Some(v.clone())
            } else {
                None
            };
            Some(BlockStats {
                mu_bar: row(c.tensor("block.mu_bar")?, "block.mu_bar", n)?,
                sigma_bar: row(c.tensor("block.sigma_bar")?, "block.sigma_bar", n)?,
                v_tilde,
                degenerate: bm.degenerate,
                batches: bm.batches,
            })
        } else {
            None
        };
        if bm.mode == Mode::Eval && b.stats.is_none() {
            return Err(corrupt("evaluation-mode block without statistics"));
        }
        b.last_v = if bm.has_last_v {
            Some(c.tensor("block.last_v")?.clone())
        } else {
            None
        };
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(corrupt("non-finite parameter in checkpoint"));
    }
    Ok((model, meta.config.clone()))
}

pub fn load_model(path: &Path) -> Result<(NeuralPcaModel, RunConfig), CliError> {
    model_from_container(&Container::load(path)?)
}

/// Latent codes and labels for some splits.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub meta: LatentMeta,
    pub z: Vec<Matrix>,
    pub y: Vec<Vec<usize>>,
}

impl LatentSet {
    pub fn container(&self) -> Container {
        let mut tensors = Vec::new();
        for ((s, z), y) in self.meta.splits.iter().zip(&self.z).zip(&self.y) {
            tensors.push((format!("z.{s}"), z.clone()));
            let yv: Vec<f64> = y.iter().map(|&l| l as f64).collect();
            tensors.push((format!("y.{s}"), Matrix::column_vector(&yv)));
        }
        Container {
            contents: Contents::Latents(self.meta.clone()),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self, CliError> {
        let meta = match &c.contents {
            Contents::Latents(m) => m.clone(),
            Contents::Model(_) => return Err(corrupt("expected latents, found a model checkpoint")),
        };
        let mut z = Vec::new();
        let mut y = Vec::new();
        for s in &meta.splits {
            let zs = c.tensor(&format!("z.{s}"))?;
            let ys = c.tensor(&format!("y.{s}"))?;
            if zs.cols() != meta.dim || ys.shape() != (zs.rows(), 1) {
                return Err(corrupt(format!("split {s} has inconsistent shapes")));
            }
            let labels = ys
                .as_slice()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < meta.n_classes {
                        Ok(v as usize)
                    } else {
                        Err(corrupt(format!("invalid label {v} in split {s}")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            z.push(zs.clone());
            y.push(labels);
        }
        Ok(LatentSet { meta, z, y })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn split(&self, name: &str) -> Result<(&Matrix, &[usize]), CliError> {
        let i = self
            .meta
            .splits
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| CliError::Config(format!("latents have no {name} split")))?;
        Ok((&self.z[i], &self.y[i]))
    }
}
