use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiger_triage::dataset::{
    ingest_manifest, make_folds_with, read_manifest, split_protocol_b_with, Class, FoldPlan, ImageRecord,
    ManifestSummary,
};
use tiger_triage::gradcam;
use tiger_triage::metrics::{ci95, eq4_metrics, ConfusionCounts, MetricsReport};
use tiger_triage::model::{load_checkpoint, ClassSelector, GradientTarget, LoadedCheckpoint};
use tiger_triage::preprocess::{apply_norm, Preprocessor};
use tiger_triage::report::{analyse_record, build_gallery, plot_histories, sample_error_set, ReportSummary};
use tiger_triage::train::{
    evaluate, fold_dir, labelled_items, prepare_run_dir, run_cv, run_protocol_b, Evaluation, Protocol, RecordSource,
    RunEnv, RunHistory,
};

use crate::config::{RunConfig, StoredConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Serialize)]
pub struct IngestOutput {
    pub config_hash: String,
    pub records: usize,
    pub summary: ManifestSummary,
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestOutput> {
    let (manifest, images) = cfg.dataset()?;
    let records = ingest_manifest(&manifest, &images)?;
    Ok(IngestOutput {
        config_hash: cfg.hash(),
        records: records.len(),
        summary: ManifestSummary::of(&records, &cfg.train.labels),
    })
}

/// Which records each fold holds out; written as `folds.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Partition {
    Cv5(FoldPlan),
    ConfirmedVsUnconfirmed { train: Vec<String>, test: Vec<String> },
}

#[derive(Debug, Serialize)]
pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
}

pub fn cmd_train(cfg: &RunConfig, jobs: usize) -> Result<TrainOutput> {
    // everything that can be checked up front is, so a bad invocation never
    // leaves a run directory behind
    cfg.validate()?;
    let (manifest, images) = cfg.dataset()?;
    let records = ingest_manifest(&manifest, &images)?;
    let hash = cfg.hash();
    let partition = partition(&records, cfg)?;

    let run = prepare_run_dir(&cfg.output.dir, &hash)?;
    let result = (|| -> Result<()> {
        run.write_json(
            "config.json",
            &StoredConfig {
                config_hash: hash.clone(),
                config: cfg.clone(),
            },
        )?;
        run.write_json("folds.json", &partition)?;
        let env = RunEnv {
            run_dir: Some(run.staging.clone()),
            jobs: jobs.max(1),
            config_hash: hash.clone(),
            ..RunEnv::default()
        };
        let (summary, history, evaluations) = match cfg.train.protocol {
            Protocol::Cv5 => {
                let out = run_cv::<f32>(&records, &cfg.train, &env)?;
                (serde_json::to_value(&out.summary)?, out.history, out.evaluations)
            }
            Protocol::ConfirmedVsUnconfirmed => {
                let out = run_protocol_b::<f32>(&records, &cfg.train, &env)?;
                (serde_json::to_value(&out.report)?, out.history, vec![out.evaluation])
            }
        };
        run.write_json(
            "summary.json",
            &serde_json::json!({ "config_hash": hash, "seed": cfg.train.seed, "summary": summary }),
        )?;
        run.write_history(&history)?;
        write_predictions(&run.staging.join("predictions.csv"), &evaluations)?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(TrainOutput {
            run_dir: run.commit()?,
            config_hash: hash,
            seed: cfg.train.seed,
        }),
        Err(e) => {
            run.abandon();
            Err(e)
        }
    }
}

fn partition(records: &[ImageRecord], cfg: &RunConfig) -> Result<Partition> {
    Ok(match cfg.train.protocol {
        Protocol::Cv5 => Partition::Cv5(make_folds_with(records, cfg.train.folds, cfg.train.seed, &cfg.train.labels)?),
        Protocol::ConfirmedVsUnconfirmed => {
            let (train, test) = split_protocol_b_with(records, &cfg.train.labels)?;
            Partition::ConfirmedVsUnconfirmed {
                train: train.into_iter().map(|r| r.id).collect(),
                test: test.into_iter().map(|r| r.id).collect(),
            }
        }
    })
}

fn write_predictions(path: &Path, evaluations: &[Evaluation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.into()))?;
    let csv_err = |e: csv::Error| CliError::Io(e.into());
    w.write_record(["fold", "id", "label", "predicted", "tiger_probability"]).map_err(csv_err)?;
    for (fold, ev) in evaluations.iter().enumerate() {
        for i in 0..ev.ids.len() {
            w.write_record([
                fold.to_string(),
                ev.ids[i].clone(),
                ev.labels[i].to_string(),
                ev.predictions[i].to_string(),
                format!("{}", ev.tiger_probability[i]),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A finished run directory and what it was trained from.
struct Run {
    dir: PathBuf,
    stored: StoredConfig,
    records: Vec<ImageRecord>,
    partition: Partition,
}

impl Run {
    fn open(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|_| CliError::PathMissing(p))
        };
        let stored: StoredConfig = serde_json::from_slice(&read("config.json")?)?;
        let partition: Partition = serde_json::from_slice(&read("folds.json")?)?;
        let (manifest, images) = stored.config.dataset()?;
        let records = read_manifest(&manifest, &images)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            stored,
            records,
            partition,
        })
    }

    fn folds(&self) -> usize {
        match &self.partition {
            Partition::Cv5(plan) => plan.k,
            Partition::ConfirmedVsUnconfirmed { .. } => 1,
        }
    }

    fn checkpoint(&self, fold: usize) -> Result<LoadedCheckpoint<f32>> {
        Ok(load_checkpoint::<f32>(&fold_dir(&self.dir, fold).join("final.safetensors"))?)
    }

    /// The records a fold's model never trained on, with their labels.
    fn held_out(&self, fold: usize) -> Vec<(String, PathBuf, Class)> {
        let policy = self.stored.config.train.labels;
        match &self.partition {
            Partition::Cv5(plan) => {
                let (_, val) = plan.split(&self.records, fold);
                labelled_items(&val, |r| r.training_class(&policy))
            }
            Partition::ConfirmedVsUnconfirmed { test, .. } => {
                let test: HashSet<&str> = test.iter().map(String::as_str).collect();
                let test: Vec<&ImageRecord> = self.records.iter().filter(|r| test.contains(r.id.as_str())).collect();
                labelled_items(&test, |r| r.species_class())
            }
        }
    }

    /// Fold whose model classifies `record` in the error analysis.
    fn fold_for(&self, record: &ImageRecord) -> usize {
        match &self.partition {
            Partition::Cv5(plan) => plan.fold_of(&record.id).unwrap_or(0),
            Partition::ConfirmedVsUnconfirmed { .. } => 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FoldEval {
    pub fold: usize,
    pub n: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub protocol: Protocol,
    pub folds: Vec<FoldEval>,
    pub pooled: MetricsReport,
    /// Whether the pooled metrics equal those stored in `summary.json`.
    pub matches_summary: Option<bool>,
}

/// Re-evaluates every final checkpoint of a run on its held-out records.
pub fn cmd_eval(run_dir: &Path) -> Result<EvalOutput> {
    let run = Run::open(run_dir)?;
    let cfg = &run.stored.config.train;
    let mut folds = Vec::new();
    for fold in 0..run.folds() {
        let ckpt = run.checkpoint(fold)?;
        let pre = Preprocessor::new(ckpt.meta.image_size, ckpt.norm_stats.clone());
        let src = RecordSource::new(run.held_out(fold), pre);
        let ev = evaluate(&ckpt.net, &src, cfg.batch_size)?;
        folds.push(FoldEval {
            fold,
            n: ev.ids.len(),
            metrics: eq4_metrics(ev.counts).with_loss(ev.mean_loss),
        });
    }
    let counts = folds
        .iter()
        .fold(ConfusionCounts::default(), |acc, f| acc.merge(&f.metrics.counts));
    let pooled = if folds.len() > 1 {
        let sizes: Vec<usize> = folds.iter().map(|f| f.n).collect();
        let losses: Vec<f64> = folds.iter().map(|f| f.metrics.mean_loss.unwrap_or(f64::NAN)).collect();
        let accs: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy.unwrap_or(f64::NAN)).collect();
        let mut pooled = eq4_metrics(counts).with_loss(ci95(&losses, &sizes, cfg.ci_method)?.mean);
        pooled.ci_halfwidth = Some(ci95(&accs, &sizes, cfg.ci_method)?.halfwidth);
        pooled
    } else {
        folds[0].metrics.clone()
    };

    let stored: Option<MetricsReport> = std::fs::read(run.dir.join("summary.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| {
            let s = &v["summary"];
            let m = if s["pooled"].is_object() { &s["pooled"] } else { &s["metrics"] };
            serde_json::from_value(m.clone()).ok()
        });
    Ok(EvalOutput {
        config_hash: run.stored.config_hash.clone(),
        protocol: cfg.protocol,
        matches_summary: stored.map(|s| s == pooled),
        folds,
        pooled,
    })
}

#[derive(Debug, Serialize)]
pub struct ExplainOutput {
    pub config_hash: String,
    pub files: Vec<PathBuf>,
}

pub fn cmd_explain(
    checkpoint: &Path,
    images: &[PathBuf],
    layers: &[String],
    class: ClassSelector,
    target: GradientTarget,
    out: &Path,
) -> Result<ExplainOutput> {
    if !checkpoint.exists() {
        return Err(CliError::PathMissing(checkpoint.to_path_buf()));
    }
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let names: Vec<String> = layers
        .iter()
        .map(|l| {
            let i = ckpt.net.resolve_layer(l)?;
            Ok(ckpt.net.units[i].name.clone())
        })
        .collect::<Result<_>>()?;
    let pre = Preprocessor::new(ckpt.meta.image_size, ckpt.norm_stats.clone());
    let mut files = Vec::new();
    for path in images {
        if !path.exists() {
            return Err(CliError::PathMissing(path.clone()));
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let raw = pre.raw_resized::<f32>(path, id)?;
        let x = apply_norm(&raw, &pre.stats)?.data.insert_axis(ndarray::Axis(0));
        for name in &names {
            let acts = ckpt.net.forward_with_capture(&x, name, class, target)?;
            let hm = gradcam::heatmap(&acts);
            let exported = gradcam::export(out, &hm, &raw, Some(&ckpt.meta.config_hash))?;
            files.push(exported.png);
        }
    }
    Ok(ExplainOutput {
        config_hash: ckpt.meta.config_hash,
        files,
    })
}

#[derive(Debug, Serialize)]
pub struct ReportOutput {
    pub config_hash: String,
    pub index: PathBuf,
    pub summary: ReportSummary,
}

pub fn cmd_report(run_dir: &Path, sample: Option<usize>, out: Option<&Path>) -> Result<ReportOutput> {
    let run = Run::open(run_dir)?;
    let cfg = &run.stored.config;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run.dir.join("report"));
    let n = sample.unwrap_or(cfg.report.sample_size);
    let seed = cfg.report.seed.unwrap_or(cfg.train.seed);
    let sampled = sample_error_set(&run.records, n, seed, &cfg.train.labels)?;

    // group by the fold whose model never saw the record, loading each
    // checkpoint once
    let mut by_fold: BTreeMap<usize, Vec<&ImageRecord>> = BTreeMap::new();
    for r in &sampled {
        by_fold.entry(run.fold_for(r)).or_default().push(r);
    }
    let mut cases = Vec::new();
    for (fold, records) in by_fold {
        let ckpt = run.checkpoint(fold)?;
        let pre = Preprocessor::new(ckpt.meta.image_size, ckpt.norm_stats.clone());
        for r in records {
            let label = r.training_class(&cfg.train.labels).expect("sampled records are labelled");
            cases.push(analyse_record(&ckpt.net, &pre, r, label, cfg.gradcam.target)?);
        }
    }
    let order: BTreeMap<&str, usize> = sampled.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    cases.sort_by_key(|c| order[c.record.id.as_str()]);

    let history = RunHistory::read_csv(std::fs::File::open(run.dir.join("history.csv"))?)?;
    let curves = plot_histories(&history, &out_dir)?;
    let mut summary = ReportSummary::of(&cases);
    summary.config_hash = run.stored.config_hash.clone();
    summary.run = std::fs::read(run.dir.join("summary.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let index = build_gallery(&cases, &out_dir, cfg.train.image_size, Some(&curves), &summary)?;
    Ok(ReportOutput {
        config_hash: summary.config_hash.clone(),
        index,
        summary,
    })
}

/// Parses `predicted`, `tiger`, `non_tiger` or a class index.
pub fn parse_class(s: &str) -> std::result::Result<ClassSelector, String> {
    match s {
        "predicted" => Ok(ClassSelector::Predicted),
        "tiger" => Ok(ClassSelector::Index(Class::Tiger.index())),
        "non_tiger" => Ok(ClassSelector::Index(Class::NonTiger.index())),
        other => other
            .parse::<usize>()
            .ok()
            .filter(|&i| i < 2)
            .map(ClassSelector::Index)
            .ok_or_else(|| format!("unknown class {other:?}")),
    }
}
