//! Momentum SGD with a step-decay schedule, per-epoch tracking and
//! checkpointing, plus the cross-validation and held-out protocols.

mod protocol;
mod source;

pub use protocol::{
    fit_stats_for, labelled_items, prepare_run_dir, run_cv, run_protocol_b, CvRun, CvSummary, FoldSummary, PhaseSummary,
    ProtocolBReport, ProtocolBRun, RunDir, RunEnv,
};
pub use source::{InMemorySource, RecordSource, SampleSource};

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Class, DatasetError, LabelPolicy};
use crate::metrics::{confusion, CiMethod, ConfusionCounts, MetricsError};
use crate::model::{
    save_checkpoint, BackboneSpec, CheckpointKind, CheckpointMeta, ClassifierNet, Gradients, ModelError,
    DEFAULT_DROPOUT,
};
use crate::nn;
use crate::preprocess::{NormMode, NormSource, PreprocessError, DEFAULT_INPUT_SIZE};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    DivergenceDetected { epoch: usize, step: usize, loss: f64 },
    #[error("train and evaluation sets share record `{0}`")]
    Leakage(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Stratified k-fold cross-validation over expert-labelled images.
    #[default]
    Cv5,
    /// Train on all expert-labelled images, test on unconfirmed reports.
    ConfirmedVsUnconfirmed,
}

impl std::str::FromStr for Protocol {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv5" => Ok(Protocol::Cv5),
            "confirmed_vs_unconfirmed" | "b" => Ok(Protocol::ConfirmedVsUnconfirmed),
            other => Err(TrainError::InvalidConfig(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub gamma: f64,
    pub step_size_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub backbone: BackboneSpec,
    pub protocol: Protocol,
    pub folds: usize,
    pub dropout: f64,
    /// Square input side; 224 for the published setting.
    pub image_size: usize,
    /// Split each batch into chunks of this size and accumulate gradients.
    pub micro_batch: Option<usize>,
    pub norm_mode: NormMode,
    pub norm_source: NormSource,
    pub ci_method: CiMethod,
    pub labels: LabelPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.7,
            gamma: 0.1,
            step_size_epochs: 7,
            batch_size: 64,
            epochs: 25,
            seed: 42,
            backbone: BackboneSpec::default(),
            protocol: Protocol::Cv5,
            folds: 5,
            dropout: DEFAULT_DROPOUT,
            image_size: DEFAULT_INPUT_SIZE,
            micro_batch: None,
            norm_mode: NormMode::PerChannel,
            norm_source: NormSource::Dataset,
            ci_method: CiMethod::Normal,
            labels: LabelPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// Names of the fields that differ from the published defaults. The seed
    /// is a run parameter and never counts as an override.
    pub fn overrides(&self) -> Vec<String> {
        let base = serde_json::to_value(TrainConfig::default()).expect("serialisable");
        let this = serde_json::to_value(self).expect("serialisable");
        let mut out: Vec<String> = this
            .as_object()
            .expect("struct")
            .iter()
            .filter(|(k, v)| k.as_str() != "seed" && base.get(k.as_str()) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect();
        out.sort();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.step_size_epochs == 0 {
            return bad("step_size_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.micro_batch == Some(0) {
            return bad("micro_batch must be positive");
        }
        if self.protocol == Protocol::Cv5 && self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr0 · gamma^⌊epoch / step_size⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.gamma.powi((epoch / cfg.step_size_epochs) as i32)
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum: T::lit(momentum),
            velocity: Vec::new(),
        }
    }

    /// Applies one update to `params`; entries with no gradient are untouched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = ndarray::ArrayViewMutD<'a, T>>, grads: &Gradients<T>, lr: f64)
    where
        T: 'a,
    {
        if self.velocity.len() < grads.tensors.len() {
            self.velocity.resize(grads.tensors.len(), None);
        }
        let lr = T::lit(lr);
        for ((mut w, g), v) in params.into_iter().zip(&grads.tensors).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let v = v.get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let mu = self.momentum;
            v.zip_mut_with(g, |v, &g| *v = mu * *v + g);
            w.scaled_add(-lr, v);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fold: usize,
    pub phase: Phase,
    pub accuracy: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunHistory {
    pub fn extend(&mut self, other: RunHistory) {
        self.records.extend(other.records);
        self.checkpoints.extend(other.checkpoints);
        self.wall_clock_secs += other.wall_clock_secs;
    }

    pub fn series(&self, fold: usize, phase: Phase) -> Vec<&EpochRecord> {
        self.records.iter().filter(|r| r.fold == fold && r.phase == phase).collect()
    }

    /// CSV with columns `epoch,fold,phase,accuracy,loss,lr`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let records = rd.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self {
            records,
            ..Self::default()
        })
    }
}

/// Predictions of a network over a labelled source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub labels: Vec<Class>,
    pub predictions: Vec<Class>,
    /// Per-sample probability of the positive class.
    pub tiger_probability: Vec<f64>,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
}

fn stack<T: Scalar>(images: &[ndarray::Array3<T>]) -> Array4<T> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share a shape")
}

/// Evaluation-mode predictions in fixed order.
pub fn evaluate<T: Scalar>(net: &ClassifierNet<T>, source: &dyn SampleSource<T>, batch_size: usize) -> Result<Evaluation> {
    let n = source.len();
    let mut out = Evaluation {
        ids: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        predictions: Vec::with_capacity(n),
        tiger_probability: Vec::with_capacity(n),
        mean_loss: 0.0,
        accuracy: 0.0,
        counts: ConfusionCounts::default(),
    };
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = stack(&source.load_many(chunk)?);
        let logits = net.logits(&x)?;
        let targets: Vec<usize> = chunk.iter().map(|&i| source.label(i).index()).collect();
        let losses = nn::cross_entropy_per_sample(&logits, &targets);
        loss_sum += losses.iter().map(|l| l.as_f64()).sum::<f64>();
        let probs = nn::softmax(&logits);
        for (row, &i) in chunk.iter().enumerate() {
            out.ids.push(source.id(i).to_string());
            out.labels.push(source.label(i));
            out.predictions.push(Class::from_index(nn::argmax(probs.row(row))));
            out.tiger_probability.push(probs[[row, Class::Tiger.index()]].as_f64());
        }
    }
    out.counts = confusion(&out.predictions, &out.labels)?;
    if n > 0 {
        out.mean_loss = loss_sum / n as f64;
        out.accuracy = (out.counts.tp + out.counts.tn) as f64 / n as f64;
    }
    Ok(out)
}

/// Where and how checkpoints of one training run are written.
#[derive(Clone, Debug)]
pub struct CheckpointTarget {
    pub dir: PathBuf,
    /// Normalisation statistics file, relative to `dir`.
    pub normstats: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default)]
pub struct FoldOptions {
    pub fold: usize,
    /// Seed for shuffling and dropout; defaults to the config seed.
    pub seed: Option<u64>,
    pub checkpoints: Option<CheckpointTarget>,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub history: RunHistory,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    /// Evaluation of the final-epoch network on the held-out set.
    pub final_eval: Option<Evaluation>,
    pub final_train_accuracy: f64,
    pub final_train_loss: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | epoch as u64);
    rng
}

fn check_disjoint<T>(train: &dyn SampleSource<T>, val: Option<&dyn SampleSource<T>>) -> Result<()> {
    if let Some(val) = val {
        let ids: std::collections::HashSet<&str> = (0..train.len()).map(|i| train.id(i)).collect();
        if let Some(dup) = (0..val.len()).map(|i| val.id(i)).find(|id| ids.contains(id)) {
            return Err(TrainError::Leakage(dup.to_string()));
        }
    }
    Ok(())
}

/// One optimisation step on a batch, given either images or cached features.
enum BatchInput<T> {
    Images(Array4<T>),
    Features(Array2<T>),
}

fn slice_batch<T: Scalar>(x: &BatchInput<T>, range: std::ops::Range<usize>) -> BatchInput<T> {
    match x {
        BatchInput::Images(a) => BatchInput::Images(a.slice(s![range, .., .., ..]).to_owned()),
        BatchInput::Features(a) => BatchInput::Features(a.slice(s![range, ..]).to_owned()),
    }
}

/// Runs forward/backward on `x` (split into micro-batches when configured),
/// updates the network and returns (summed loss, correct count).
fn train_step<T: Scalar>(
    net: &mut ClassifierNet<T>,
    sgd: &mut Sgd<T>,
    x: BatchInput<T>,
    targets: &[usize],
    lr: f64,
    micro: Option<usize>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let n = targets.len();
    let chunk = micro.unwrap_or(n).clamp(1, n);
    let mut total: Option<Gradients<T>> = None;
    let (mut loss_sum, mut correct) = (0.0, 0);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = if chunk == n { x_take(&x) } else { slice_batch(&x, start..end) };
        let (logits, tape) = match part {
            BatchInput::Images(a) => net.forward_train(a, dropout_rng)?,
            BatchInput::Features(f) => net.forward_train_head(f, dropout_rng),
        };
        let t = &targets[start..end];
        let (loss, mut dlogits) = nn::cross_entropy(&logits, t);
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected { epoch: 0, step: 0, loss });
        }
        // per-chunk mean → batch mean
        dlogits.mapv_inplace(|v| v * T::lit((end - start) as f64 / n as f64));
        loss_sum += loss * (end - start) as f64;
        correct += logits
            .outer_iter()
            .zip(t)
            .filter(|(row, &y)| nn::argmax(row.view()) == y)
            .count();
        let grads = net.backward(&tape, &dlogits);
        net.commit_batch_stats(&tape);
        match &mut total {
            Some(acc) => acc.accumulate(&grads),
            None => total = Some(grads),
        }
        start = end;
    }
    let grads = total.expect("non-empty batch");
    if grads.tensors.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::DivergenceDetected {
            epoch: 0,
            step: 0,
            loss: f64::NAN,
        });
    }
    sgd.step(net.params_mut(), &grads, lr);
    Ok((loss_sum, correct))
}

fn x_take<T: Scalar>(x: &BatchInput<T>) -> BatchInput<T> {
    match x {
        BatchInput::Images(a) => BatchInput::Images(a.clone()),
        BatchInput::Features(a) => BatchInput::Features(a.clone()),
    }
}

fn checkpoint_meta(cfg: &TrainConfig, target: &CheckpointTarget, net_seed: u64, fold: usize, epoch: usize, val: Option<f64>, kind: CheckpointKind) -> CheckpointMeta {
    CheckpointMeta {
        family: cfg.backbone.family,
        epoch,
        val_accuracy: val,
        seed: net_seed,
        kind,
        fold: Some(fold),
        backbone: cfg.backbone,
        dropout: cfg.dropout,
        image_size: cfg.image_size,
        normstats: target.normstats.clone(),
        config_hash: target.config_hash.clone(),
        model_hash: String::new(),
        dtype: String::new(),
    }
}

/// Trains `net` for exactly `cfg.epochs` epochs, evaluating on `val` after
/// each one. Batches are reshuffled every epoch from a seed-derived stream and
/// the last partial batch is kept. When the whole backbone is frozen, its
/// features are computed once and only the head is run per step.
pub fn train_fold<T: Scalar>(
    net: &mut ClassifierNet<T>,
    train: &dyn SampleSource<T>,
    val: Option<&dyn SampleSource<T>>,
    cfg: &TrainConfig,
    opts: &FoldOptions,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    check_disjoint(train, val)?;
    let started = Instant::now();
    let seed = opts.seed.unwrap_or(cfg.seed);
    let net_seed = seed;
    let mut sgd = Sgd::<T>::new(cfg.momentum);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(3);

    let n = train.len();
    let targets_all: Vec<usize> = (0..n).map(|i| train.label(i).index()).collect();
    let cached: Option<Array2<T>> = if net.backbone_frozen() {
        let mut rows = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(cfg.batch_size) {
            rows.push(net.features(&stack(&train.load_many(chunk)?))?);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        Some(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
    } else {
        None
    };

    let mut history = RunHistory::default();
    let mut best: Option<(usize, f64)> = None;
    let mut best_checkpoint = None;
    let mut final_eval = None;
    let (mut last_train_acc, mut last_train_loss) = (0.0, 0.0);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(seed, epoch));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<usize> = batch.iter().map(|&i| targets_all[i]).collect();
            let x = match &cached {
                Some(f) => BatchInput::Features(f.select(Axis(0), batch)),
                None => BatchInput::Images(stack(&train.load_many(batch)?)),
            };
            let (l, c) = train_step(net, &mut sgd, x, &targets, lr, cfg.micro_batch, &mut dropout_rng).map_err(|e| match e {
                TrainError::DivergenceDetected { loss, .. } => TrainError::DivergenceDetected { epoch, step, loss },
                other => other,
            })?;
            loss_sum += l;
            correct += c;
        }
        last_train_acc = correct as f64 / n as f64;
        last_train_loss = loss_sum / n as f64;
        history.records.push(EpochRecord {
            epoch,
            fold: opts.fold,
            phase: Phase::Train,
            accuracy: last_train_acc,
            loss: last_train_loss,
            lr,
        });

        let mut val_acc = None;
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let ev = evaluate(net, val, cfg.batch_size)?;
            history.records.push(EpochRecord {
                epoch,
                fold: opts.fold,
                phase: Phase::Val,
                accuracy: ev.accuracy,
                loss: ev.mean_loss,
                lr,
            });
            val_acc = Some(ev.accuracy);
            if epoch + 1 == cfg.epochs {
                final_eval = Some(ev);
            }
        }
        tracing::info!(
            fold = opts.fold,
            epoch,
            lr,
            train_acc = last_train_acc,
            train_loss = last_train_loss,
            val_acc = val_acc.unwrap_or(f64::NAN),
            "epoch finished"
        );

        let improved = match (best, val_acc) {
            (None, _) => true,
            (Some((_, b)), Some(v)) => v > b,
            (Some(_), None) => false,
        };
        if improved {
            best = Some((epoch, val_acc.unwrap_or(f64::NAN)));
            if let Some(target) = &opts.checkpoints {
                let path = target.dir.join("best.safetensors");
                let meta = checkpoint_meta(cfg, target, net_seed, opts.fold, epoch, val_acc, CheckpointKind::Best);
                save_checkpoint(net, &path, &meta)?;
                best_checkpoint = Some(path);
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(target) = &opts.checkpoints {
        let path = target.dir.join("final.safetensors");
        let val_acc = final_eval.as_ref().map(|e| e.accuracy);
        let meta = checkpoint_meta(cfg, target, net_seed, opts.fold, cfg.epochs.saturating_sub(1), val_acc, CheckpointKind::Final);
        save_checkpoint(net, &path, &meta)?;
        final_checkpoint = Some(path.clone());
        history.checkpoints.extend(best_checkpoint.clone());
        history.checkpoints.push(path);
    }
    history.wall_clock_secs = started.elapsed().as_secs_f64();

    Ok(FoldOutcome {
        history,
        best_epoch: best.map(|(e, _)| e),
        best_val_accuracy: best.map(|(_, v)| v).filter(|v| v.is_finite()),
        best_checkpoint,
        final_checkpoint,
        final_eval,
        final_train_accuracy: last_train_acc,
        final_train_loss: last_train_loss,
    })
}

/// Path of a fold's checkpoint directory inside a run directory.
pub fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("fold{fold}"))
}
