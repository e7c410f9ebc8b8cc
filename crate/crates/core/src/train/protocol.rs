use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fold_dir, train_fold, CheckpointTarget, Evaluation, FoldOptions, Protocol, RecordSource, Result, RunHistory,
    TrainConfig, TrainError,
};
use crate::dataset::{make_folds_with, split_protocol_b_with, Class, ImageRecord};
use crate::metrics::{ci95, eq4_metrics, CiMethod, ConfusionCounts, Interval, MetricsReport};
use crate::model::build_with_cache;
use crate::preprocess::{fit_norm_stats_sharded, NormSource, NormStats, Preprocessor};
use crate::Scalar;

/// Shared settings for a protocol run.
#[derive(Clone, Debug)]
pub struct RunEnv {
    /// Checkpoints and per-fold statistics go under `<run_dir>/checkpoints/`.
    pub run_dir: Option<PathBuf>,
    /// Directory holding pretrained backbone weights.
    pub weight_cache: PathBuf,
    /// Folds trained concurrently.
    pub jobs: usize,
    pub config_hash: String,
}

impl Default for RunEnv {
    fn default() -> Self {
        Self {
            run_dir: None,
            weight_cache: crate::model::weight_cache_dir(),
            jobs: 1,
            config_hash: String::new(),
        }
    }
}

impl RunEnv {
    /// Artifact paths are recorded relative to the run directory, which may
    /// be renamed once the run completes.
    fn relative(&self, path: Option<PathBuf>) -> Option<PathBuf> {
        let path = path?;
        match &self.run_dir {
            Some(dir) => Some(path.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(path)),
            None => Some(path),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Final-epoch figures.
    pub train: PhaseSummary,
    pub val: PhaseSummary,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub counts: ConfusionCounts,
    pub norm_stats: NormStats,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub protocol: Protocol,
    pub folds: Vec<FoldSummary>,
    /// Fold-size-weighted means with 95% half-widths.
    pub train_accuracy: Interval,
    pub train_loss: Interval,
    pub val_accuracy: Interval,
    pub val_loss: Interval,
    pub ci_method: CiMethod,
    /// Metrics over the pooled held-out predictions of the final-epoch models.
    pub pooled: MetricsReport,
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct CvRun {
    pub summary: CvSummary,
    pub history: RunHistory,
    /// Held-out predictions of each fold's final model.
    pub evaluations: Vec<Evaluation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolBReport {
    pub protocol: Protocol,
    pub n_train: usize,
    pub n_test: usize,
    pub train: PhaseSummary,
    pub test: PhaseSummary,
    pub metrics: MetricsReport,
    pub norm_stats: NormStats,
    pub final_checkpoint: Option<PathBuf>,
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ProtocolBRun {
    pub report: ProtocolBReport,
    pub history: RunHistory,
    pub evaluation: Evaluation,
}

/// Normalisation statistics for a training split, honouring `cfg.norm_source`.
pub fn fit_stats_for(records: &[(String, PathBuf, Class)], cfg: &TrainConfig) -> Result<NormStats> {
    if cfg.norm_source == NormSource::Imagenet {
        return Ok(NormStats::imagenet());
    }
    let pre = Preprocessor::new(cfg.image_size, NormStats::imagenet());
    Ok(fit_norm_stats_sharded::<f32, _>(
        records.len(),
        32,
        |i| pre.raw_resized(&records[i].1, &records[i].0),
        cfg.norm_mode,
    )?)
}

/// `(id, path, class)` for every record `class` assigns a label to.
pub fn labelled_items(records: &[&ImageRecord], class: impl Fn(&ImageRecord) -> Option<Class>) -> Vec<(String, PathBuf, Class)> {
    records
        .iter()
        .filter_map(|r| class(r).map(|c| (r.id.clone(), r.path.clone(), c)))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn interval(values: &[f64], sizes: &[usize], method: CiMethod) -> Result<Interval> {
    Ok(ci95(values, sizes, method)?)
}

/// Stratified k-fold cross-validation. Each fold gets a fresh network built
/// from `seed + fold` and statistics fitted on its training part only.
pub fn run_cv<T: Scalar>(records: &[ImageRecord], cfg: &TrainConfig, env: &RunEnv) -> Result<CvRun> {
    cfg.validate()?;
    let plan = make_folds_with(records, cfg.folds, cfg.seed, &cfg.labels)?;
    let policy = cfg.labels;

    let run_fold = |fold: usize| -> Result<(FoldSummary, RunHistory, Evaluation)> {
        let (train, val) = plan.split(records, fold);
        let train = labelled_items(&train, |r| r.training_class(&policy));
        let val = labelled_items(&val, |r| r.training_class(&policy));
        let stats = fit_stats_for(&train, cfg)?;
        let fold_seed = cfg.seed.wrapping_add(fold as u64);
        let checkpoints = match &env.run_dir {
            Some(dir) => {
                let dir = fold_dir(dir, fold);
                write_json(&dir.join("normstats.json"), &stats)?;
                Some(CheckpointTarget {
                    dir,
                    normstats: "normstats.json".into(),
                    config_hash: env.config_hash.clone(),
                })
            }
            None => None,
        };
        let mut net = build_with_cache::<T>(cfg.backbone, cfg.dropout, fold_seed, &env.weight_cache)?;
        let pre = Preprocessor::new(cfg.image_size, stats.clone());
        let train_src = RecordSource::new(train, pre.clone());
        let val_src = RecordSource::new(val, pre);
        let opts = FoldOptions {
            fold,
            seed: Some(fold_seed),
            checkpoints,
        };
        let out = train_fold(&mut net, &train_src, Some(&val_src), cfg, &opts)?;
        let eval = out.final_eval.clone().ok_or(TrainError::InvalidConfig("validation fold is empty".into()))?;
        let summary = FoldSummary {
            fold,
            n_train: train_src.items.len(),
            n_val: val_src.items.len(),
            train: PhaseSummary {
                accuracy: out.final_train_accuracy,
                loss: out.final_train_loss,
            },
            val: PhaseSummary {
                accuracy: eval.accuracy,
                loss: eval.mean_loss,
            },
            best_epoch: out.best_epoch,
            best_val_accuracy: out.best_val_accuracy,
            counts: eval.counts,
            norm_stats: stats,
            best_checkpoint: env.relative(out.best_checkpoint),
            final_checkpoint: env.relative(out.final_checkpoint),
        };
        Ok((summary, out.history, eval))
    };

    let results: Vec<Result<_>> = if env.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(env.jobs)
            .build()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        pool.install(|| (0..cfg.folds).into_par_iter().map(run_fold).collect())
    } else {
        (0..cfg.folds).map(run_fold).collect()
    };

    let mut folds = Vec::new();
    let mut history = RunHistory::default();
    let mut evaluations = Vec::new();
    for r in results {
        let (s, h, e) = r?;
        folds.push(s);
        history.extend(h);
        evaluations.push(e);
    }
    let sizes: Vec<usize> = folds.iter().map(|f| f.n_val).collect();
    let pick = |f: fn(&FoldSummary) -> f64| folds.iter().map(f).collect::<Vec<_>>();
    let pooled = folds.iter().fold(ConfusionCounts::default(), |acc, f| acc.merge(&f.counts));
    let val_loss = interval(&pick(|f| f.val.loss), &sizes, cfg.ci_method)?;
    let val_accuracy = interval(&pick(|f| f.val.accuracy), &sizes, cfg.ci_method)?;
    let mut pooled = eq4_metrics(pooled).with_loss(val_loss.mean);
    pooled.ci_halfwidth = Some(val_accuracy.halfwidth);
    let train_sizes: Vec<usize> = folds.iter().map(|f| f.n_train).collect();
    let summary = CvSummary {
        protocol: Protocol::Cv5,
        train_accuracy: interval(&pick(|f| f.train.accuracy), &train_sizes, cfg.ci_method)?,
        train_loss: interval(&pick(|f| f.train.loss), &train_sizes, cfg.ci_method)?,
        val_accuracy,
        val_loss,
        ci_method: cfg.ci_method,
        pooled,
        overrides: cfg.overrides(),
        folds,
    };
    Ok(CvRun {
        summary,
        history,
        evaluations,
    })
}

/// Trains once on every expert-labelled image and tests on the unconfirmed
/// reports, labelled by their species tag. The test set is evaluated after
/// each epoch for the learning curves; reported figures use the final epoch.
pub fn run_protocol_b<T: Scalar>(records: &[ImageRecord], cfg: &TrainConfig, env: &RunEnv) -> Result<ProtocolBRun> {
    cfg.validate()?;
    let (train, test) = split_protocol_b_with(records, &cfg.labels)?;
    let train_refs: Vec<&ImageRecord> = train.iter().collect();
    let test_refs: Vec<&ImageRecord> = test.iter().collect();
    let policy = cfg.labels;
    let train = labelled_items(&train_refs, |r| r.training_class(&policy));
    let test = labelled_items(&test_refs, |r| r.species_class());
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let stats = fit_stats_for(&train, cfg)?;
    let checkpoints = match &env.run_dir {
        Some(dir) => {
            let dir = fold_dir(dir, 0);
            write_json(&dir.join("normstats.json"), &stats)?;
            Some(CheckpointTarget {
                dir,
                normstats: "normstats.json".into(),
                config_hash: env.config_hash.clone(),
            })
        }
        None => None,
    };
    let mut net = build_with_cache::<T>(cfg.backbone, cfg.dropout, cfg.seed, &env.weight_cache)?;
    let pre = Preprocessor::new(cfg.image_size, stats.clone());
    let train_src = RecordSource::new(train, pre.clone());
    let test_src = RecordSource::new(test, pre);
    let opts = FoldOptions {
        fold: 0,
        seed: Some(cfg.seed),
        checkpoints,
    };
    let out = train_fold(&mut net, &train_src, Some(&test_src), cfg, &opts)?;
    let evaluation = out.final_eval.clone().expect("non-empty test set");
    let report = ProtocolBReport {
        protocol: Protocol::ConfirmedVsUnconfirmed,
        n_train: train_src.items.len(),
        n_test: test_src.items.len(),
        train: PhaseSummary {
            accuracy: out.final_train_accuracy,
            loss: out.final_train_loss,
        },
        test: PhaseSummary {
            accuracy: evaluation.accuracy,
            loss: evaluation.mean_loss,
        },
        metrics: eq4_metrics(evaluation.counts).with_loss(evaluation.mean_loss),
        norm_stats: stats,
        final_checkpoint: env.relative(out.final_checkpoint),
        overrides: cfg.overrides(),
    };
    Ok(ProtocolBRun {
        report,
        history: out.history,
        evaluation,
    })
}

/// A run directory assembled under a temporary name and renamed into place
/// once complete, so a crashed run never looks finished.
#[derive(Debug)]
pub struct RunDir {
    pub staging: PathBuf,
    pub target: PathBuf,
}

/// `<root>/<timestamp>-<config_hash>`, staged as `<root>/.staging-<same>`.
pub fn prepare_run_dir(root: &Path, config_hash: &str) -> Result<RunDir> {
    let name = format!("{}-{config_hash}", chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ"));
    let staging = root.join(format!(".staging-{name}"));
    std::fs::create_dir_all(staging.join("checkpoints"))?;
    Ok(RunDir {
        staging,
        target: root.join(name),
    })
}

impl RunDir {
    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        write_json(&self.staging.join(name), value)
    }

    pub fn write_history(&self, history: &RunHistory) -> Result<()> {
        history.write_csv(std::fs::File::create(self.staging.join("history.csv"))?)
    }

    /// Removes the staging directory after a failed run.
    pub fn abandon(self) {
        let _ = std::fs::remove_dir_all(&self.staging);
    }

    /// Renames the staging directory to its final name.
    pub fn commit(self) -> Result<PathBuf> {
        std::fs::rename(&self.staging, &self.target)?;
        Ok(self.target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Confidence, Species};
    use crate::model::{BackboneFamily, BackboneSpec, FreezePolicy};
    use image::{Rgb, RgbImage};

    fn write_dataset(dir: &Path, n_pos: usize, n_neg: usize, n_unconfirmed: usize) -> Vec<ImageRecord> {
        let mut out = Vec::new();
        let mut add = |id: String, species, confidence, bright: bool| {
            let path = dir.join(format!("{id}.png"));
            let v = if bright { 220 } else { 30 };
            RgbImage::from_fn(12, 12, |x, y| Rgb([v, ((x * 17 + y * 5) % 40) as u8, v / 2]))
                .save(&path)
                .unwrap();
            out.push(ImageRecord::new(id, path, species, confidence));
        };
        for i in 0..n_pos {
            add(format!("p{i}"), Species::Albopictus, Confidence::Confirmed, true);
        }
        for i in 0..n_neg {
            add(format!("n{i}"), Species::Aegypti, Confidence::Confirmed, false);
        }
        for i in 0..n_unconfirmed {
            let species = if i % 2 == 0 { Species::Albopictus } else { Species::Other };
            add(format!("u{i}"), species, Confidence::NotClassified, i % 2 == 0);
        }
        out
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            folds: 3,
            image_size: 32,
            lr0: 0.01,
            backbone: BackboneSpec {
                freeze_policy: FreezePolicy::FeaturesOnly,
                ..BackboneSpec::new(BackboneFamily::Vgg16)
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cv_run_writes_fold_artifacts() {
        let data = tempfile::tempdir().unwrap();
        let records = write_dataset(data.path(), 5, 4, 0);
        let run = tempfile::tempdir().unwrap();
        let env = RunEnv {
            run_dir: Some(run.path().to_path_buf()),
            config_hash: "cafe".into(),
            ..RunEnv::default()
        };
        let cfg = small_cfg();
        let out = run_cv::<f32>(&records, &cfg, &env).unwrap();
        assert_eq!(out.summary.folds.len(), 3);
        assert_eq!(out.history.records.len(), 2 * 3 * 2);
        assert_eq!(out.summary.pooled.counts.total(), 9);
        let val_total: usize = out.summary.folds.iter().map(|f| f.n_val).sum();
        assert_eq!(val_total, 9);
        for f in &out.summary.folds {
            let dir = fold_dir(run.path(), f.fold);
            assert!(dir.join("best.safetensors").is_file());
            assert!(dir.join("final.json").is_file());
            assert!(dir.join("normstats.json").is_file());
            assert!(f.final_checkpoint.as_ref().unwrap().is_relative());
            let loaded = crate::model::load_checkpoint::<f32>(&dir.join("final.safetensors")).unwrap();
            assert_eq!(loaded.norm_stats, f.norm_stats);
        }
        // no evaluated id appears in its own training split
        let all_ids: Vec<&String> = out.evaluations.iter().flat_map(|e| &e.ids).collect();
        let unique: std::collections::HashSet<_> = all_ids.iter().collect();
        assert_eq!(unique.len(), all_ids.len());
    }

    #[test]
    fn parallel_folds_match_sequential() {
        let data = tempfile::tempdir().unwrap();
        let records = write_dataset(data.path(), 4, 4, 0);
        let cfg = small_cfg();
        let seq = run_cv::<f32>(&records, &cfg, &RunEnv::default()).unwrap();
        let par = run_cv::<f32>(
            &records,
            &cfg,
            &RunEnv {
                jobs: 3,
                ..RunEnv::default()
            },
        )
        .unwrap();
        assert_eq!(seq.history.records, par.history.records);
    }

    #[test]
    fn protocol_b_tests_on_unconfirmed() {
        let data = tempfile::tempdir().unwrap();
        let records = write_dataset(data.path(), 3, 3, 1);
        let cfg = TrainConfig {
            protocol: Protocol::ConfirmedVsUnconfirmed,
            ..small_cfg()
        };
        let out = run_protocol_b::<f32>(&records, &cfg, &RunEnv::default()).unwrap();
        assert_eq!(out.report.n_train, 6);
        assert_eq!(out.report.n_test, 1);
        assert!(out.report.test.accuracy == 0.0 || out.report.test.accuracy == 1.0);

        let no_test = write_dataset(data.path(), 3, 3, 0);
        assert!(matches!(
            run_protocol_b::<f32>(&no_test, &cfg, &RunEnv::default()),
            Err(TrainError::Dataset(crate::dataset::DatasetError::EmptyTestSet))
        ));
    }

    #[test]
    fn weighted_fold_mean() {
        let i = interval(&[1.0, 0.4], &[2, 1], CiMethod::Normal).unwrap();
        assert!((i.mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn run_dir_is_staged_then_committed() {
        let root = tempfile::tempdir().unwrap();
        let dir = prepare_run_dir(root.path(), "abc123").unwrap();
        dir.write_json("config.json", &small_cfg()).unwrap();
        assert!(!dir.target.exists());
        let path = dir.commit().unwrap();
        assert!(path.join("config.json").is_file());
        assert!(path.join("checkpoints").is_dir());
        assert!(path.file_name().unwrap().to_str().unwrap().ends_with("-abc123"));
    }
}
