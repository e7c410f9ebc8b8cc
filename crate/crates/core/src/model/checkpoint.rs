use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayViewMutD;
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_untrained, BackboneFamily, BackboneSpec, ClassifierNet, ModelError, Result};
use crate::preprocess::NormStats;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Epoch with the highest validation accuracy.
    Best,
    /// Last epoch.
    Final,
}

/// Sidecar JSON stored next to the weights file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub family: BackboneFamily,
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
    pub seed: u64,
    pub kind: CheckpointKind,
    pub fold: Option<usize>,
    pub backbone: BackboneSpec,
    pub dropout: f64,
    pub image_size: usize,
    /// Normalisation statistics file, relative to the checkpoint directory.
    pub normstats: String,
    pub config_hash: String,
    /// SHA-256 of the weights file, filled in on save.
    #[serde(default)]
    pub model_hash: String,
    #[serde(default)]
    pub dtype: String,
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint<T> {
    pub net: ClassifierNet<T>,
    pub meta: CheckpointMeta,
    pub norm_stats: NormStats,
}

fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn err(e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

pub(super) fn copy_tensor<T: Scalar>(
    name: &str,
    src: &TensorView<'_>,
    dst: &mut ArrayViewMutD<'_, T>,
) -> std::result::Result<(), String> {
    if src.shape() != dst.shape() {
        return Err(format!("{name}: shape {:?}, expected {:?}", src.shape(), dst.shape()));
    }
    let values = T::read_le(src.dtype(), src.data()).ok_or_else(|| format!("{name}: unsupported dtype {:?}", src.dtype()))?;
    for (d, v) in dst.iter_mut().zip(values) {
        *d = v;
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes `<path>` (safetensors, every parameter and batch-norm buffer) and
/// `<path without extension>.json`. Returns the sidecar with its hash filled in.
pub fn save_checkpoint<T: Scalar>(net: &ClassifierNet<T>, path: &Path, meta: &CheckpointMeta) -> Result<CheckpointMeta> {
    let spec = net
        .spec
        .ok_or_else(|| err("only networks built from a BackboneSpec can be checkpointed"))?;
    let tensors = net.named_tensors();
    let buffers: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, t)| {
            let mut bytes = Vec::new();
            T::write_le(&t.iter().copied().collect::<Vec<_>>(), &mut bytes);
            bytes
        })
        .collect();
    let views = tensors
        .iter()
        .zip(&buffers)
        .map(|((name, t), bytes)| Ok((name.clone(), TensorView::new(T::DTYPE, t.shape().to_vec(), bytes).map_err(err)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut meta = meta.clone();
    meta.family = spec.family;
    meta.backbone = spec;
    meta.dropout = net.dropout_p();
    meta.dtype = format!("{:?}", T::DTYPE);

    let info = HashMap::from([
        ("backbone".to_string(), serde_json::to_string(&spec).map_err(err)?),
        ("normstats".to_string(), meta.normstats.clone()),
        ("config_hash".to_string(), meta.config_hash.clone()),
    ]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(err)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    meta.model_hash = hex::encode(Sha256::digest(&bytes));
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta).map_err(err)?)?;
    Ok(meta)
}

/// Reads a checkpoint written by [`save_checkpoint`], verifying the weights
/// hash and resolving the normalisation statistics it refers to.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?).map_err(err)?;
    let actual = sha256_file(path)?;
    if !meta.model_hash.is_empty() && actual != meta.model_hash {
        return Err(err(format!("{} does not match its recorded hash", path.display())));
    }
    let bytes = std::fs::read(path)?;
    let file = SafeTensors::deserialize(&bytes).map_err(err)?;
    let mut net = build_untrained::<T>(meta.backbone, meta.dropout, meta.seed);
    for (name, mut dst) in net.named_tensors_mut() {
        let view = file.tensor(&name).map_err(|_| err(format!("missing tensor {name}")))?;
        copy_tensor(&name, &view, &mut dst).map_err(err)?;
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let norm_stats: NormStats =
        serde_json::from_slice(&std::fs::read(dir.join(&meta.normstats))?).map_err(err)?;
    Ok(LoadedCheckpoint { net, meta, norm_stats })
}
