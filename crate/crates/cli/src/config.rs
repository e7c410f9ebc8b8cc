//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tiger_triage::model::{BackboneFamily, GradientTarget, LayerTag};
use tiger_triage::train::{Protocol, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directories are created under this root.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcamConfig {
    pub layers: Vec<LayerTag>,
    pub target: GradientTarget,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        Self {
            layers: LayerTag::ALL.to_vec(),
            target: GradientTarget::Score,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub sample_size: usize,
    /// Defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            sample_size: 150,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub gradcam: GradcamConfig,
    pub report: ReportConfig,
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub protocol: Option<Protocol>,
    pub backbone: Option<BackboneFamily>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `path` (or starts from defaults) and resolves relative dataset
    /// and output paths against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|_| CliError::PathMissing(path.to_path_buf()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.manifest.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.dataset.images.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.output.dir);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.protocol {
            self.train.protocol = p;
        }
        if let Some(b) = o.backbone {
            self.train.backbone.family = b;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(m) = &o.manifest {
            self.dataset.manifest = Some(m.clone());
        }
        if let Some(i) = &o.images {
            self.dataset.images = Some(i.clone());
        }
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))[..12].to_string()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        if self.report.sample_size == 0 {
            return Err(CliError::ConfigInvalid("report.sample_size must be positive".into()));
        }
        Ok(())
    }

    /// Manifest and image root, both of which must exist.
    pub fn dataset(&self) -> Result<(PathBuf, PathBuf), CliError> {
        let manifest = self
            .dataset
            .manifest
            .clone()
            .ok_or_else(|| CliError::ConfigInvalid("dataset.manifest is not set".into()))?;
        let images = self
            .dataset
            .images
            .clone()
            .ok_or_else(|| CliError::ConfigInvalid("dataset.images is not set".into()))?;
        for p in [&manifest, &images] {
            if !p.exists() {
                return Err(CliError::PathMissing(p.clone()));
            }
        }
        Ok((manifest, images))
    }
}

/// `config.json` in a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredConfig {
    pub config_hash: String,
    pub config: RunConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_and_change_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[dataset]\nmanifest = \"m.csv\"\nimages = \"img\"\n[train]\nepochs = 3\nseed = 7\n[train.backbone]\nfamily = \"resnet50\"\n",
        )
        .unwrap();
        let mut cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.backbone.family, BackboneFamily::Resnet50);
        assert_eq!(cfg.dataset.manifest.as_deref(), Some(dir.path().join("m.csv").as_path()));
        let before = cfg.hash();
        assert_eq!(before.len(), 12);
        assert_eq!(before, RunConfig::load(Some(&path)).unwrap().hash());

        cfg.apply(&Overrides {
            seed: Some(9),
            backbone: Some(BackboneFamily::Vgg16),
            ..Overrides::default()
        });
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.backbone.family, BackboneFamily::Vgg16);
        assert_ne!(cfg.hash(), before);
    }

    #[test]
    fn defaults_and_rejections() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.report.sample_size, 150);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 1.0\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(CliError::ConfigInvalid(_))));
        assert!(matches!(
            RunConfig::load(Some(&dir.path().join("absent.toml"))),
            Err(CliError::PathMissing(_))
        ));
        let mut bad = RunConfig::default();
        bad.train.batch_size = 0;
        assert!(matches!(bad.validate(), Err(CliError::ConfigInvalid(_))));
    }
}
