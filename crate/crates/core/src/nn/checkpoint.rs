//! Network checkpoints: a JSON manifest next to one EDNT file per weight
//! and bias tensor. Tensors are stored as fp32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_ednt_file, write_ednt_file, Dtype, Tensor};
use crate::scalar::Scalar;

use super::network::{LayerSpec, Network, Params};
use super::types::Thresholds;

pub const CHECKPOINT_FORMAT: &str = "approxdram-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFiles {
    pub weights: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: Dtype,
    pub layers: Vec<LayerSpec>,
    pub thresholds: Thresholds,
    /// Paths relative to the manifest, one entry per parametric layer.
    pub tensors: Vec<TensorFiles>,
    /// Free-form record of how the checkpoint was produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn to_f32<S: Scalar>(v: &[S]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32_storage()).collect()
}

/// Writes `net` as `<path>` plus `<stem>.p<i>.{w,b}.ednt` beside it.
pub fn save_checkpoint<S: Scalar>(net: &Network<S>, path: impl AsRef<Path>, provenance: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", path.display())))?;
    let mut tensors = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        let files = TensorFiles { weights: format!("{stem}.p{i}.w.ednt"), bias: format!("{stem}.p{i}.b.ednt") };
        write_ednt_file(&Tensor::from_f32(vec![p.weights.len()], to_f32(&p.weights))?, dir.join(&files.weights))?;
        write_ednt_file(&Tensor::from_f32(vec![p.bias.len()], to_f32(&p.bias))?, dir.join(&files.bias))?;
        tensors.push(files);
    }
    let m = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: net.dtype,
        layers: net.layers().to_vec(),
        thresholds: net.thresholds.clone(),
        tensors,
        provenance,
    };
    fs::write(path, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn load_vec<S: Scalar>(path: PathBuf) -> Result<Vec<S>> {
    let t = read_ednt_file(&path)?;
    let v = t
        .as_f32()
        .ok_or_else(|| Error::Format(format!("{}: checkpoint tensors must be fp32", path.display())))?;
    Ok(v.iter().map(|&x| S::from_f32_storage(x)).collect())
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Network<S>, Manifest)> {
    let path = path.as_ref();
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let params = m
        .tensors
        .iter()
        .map(|f| Ok(Params { weights: load_vec(dir.join(&f.weights))?, bias: load_vec(dir.join(&f.bias))? }))
        .collect::<Result<Vec<_>>>()?;
    let net = Network::from_parts(m.layers.clone(), params, m.dtype, m.thresholds.clone())?;
    Ok((net, m))
}
