//! Learning curves, error-analysis sampling and the static HTML report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Class, DatasetError, ImageRecord, LabelPolicy};
use crate::gradcam::{self, GradcamError, Heatmap};
use crate::model::{ClassifierNet, GradientTarget, LayerTag};
use crate::nn;
use crate::preprocess::{apply_norm, PreprocessError, Preprocessor};
use crate::train::{EpochRecord, Phase, RunHistory, TrainError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("case `{0}` lacks heatmaps")]
    MissingHeatmap(String),
    #[error("no history to plot")]
    EmptyHistory,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gradcam(#[from] GradcamError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

/// Seeded sample without replacement, split as evenly as possible between
/// the two classes. If one class is short, the other makes up the difference.
pub fn sample_error_set(records: &[ImageRecord], n: usize, seed: u64, policy: &LabelPolicy) -> Result<Vec<ImageRecord>> {
    let mut pos: Vec<&ImageRecord> = Vec::new();
    let mut neg: Vec<&ImageRecord> = Vec::new();
    for r in records {
        match r.training_class(policy) {
            Some(Class::Tiger) => pos.push(r),
            Some(Class::NonTiger) => neg.push(r),
            None => {}
        }
    }
    let available = pos.len() + neg.len();
    if n > available {
        return Err(DatasetError::SampleTooLarge { requested: n, available }.into());
    }
    pos.sort_by(|a, b| a.id.cmp(&b.id));
    neg.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut take_pos = n.div_ceil(2).min(pos.len());
    let take_neg = (n - take_pos).min(neg.len());
    take_pos = n - take_neg;
    Ok(pos[..take_pos].iter().chain(&neg[..take_neg]).map(|r| (*r).clone()).collect())
}

/// One analysed image: prediction plus shallow/middle/deep heatmaps.
#[derive(Clone, Debug)]
pub struct ErrorCase<T> {
    pub record: ImageRecord,
    pub label: Class,
    pub predicted: Class,
    /// Probability of the predicted class.
    pub probability: f64,
    pub heatmaps: Vec<Heatmap<T>>,
}

impl<T> ErrorCase<T> {
    pub fn is_error(&self) -> bool {
        self.label != self.predicted
    }
}

/// Classifies a record and computes heatmaps at every tagged layer for the
/// predicted class.
pub fn analyse_record<T: Scalar>(
    net: &ClassifierNet<T>,
    pre: &Preprocessor,
    record: &ImageRecord,
    label: Class,
    target: GradientTarget,
) -> Result<ErrorCase<T>> {
    let raw = pre.raw_resized::<T>(&record.path, &record.id)?;
    let x = apply_norm(&raw, &pre.stats)?.data.insert_axis(ndarray::Axis(0));
    let probs = net.forward(&x).map_err(GradcamError::from)?;
    let predicted = nn::argmax(probs.row(0));
    let layers: Vec<&str> = LayerTag::ALL
        .iter()
        .filter_map(|t| net.layer_for_tag(*t))
        .collect();
    let heatmaps = gradcam::multi_layer_cams(net, &x, &layers, target)?;
    Ok(ErrorCase {
        record: record.clone(),
        label,
        predicted: Class::from_index(predicted),
        probability: probs[[0, predicted]].as_f64(),
        heatmaps,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub sampled: usize,
    pub errors: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    /// category → [errors, sampled]; records without a category are `unlabelled`.
    pub by_category: BTreeMap<String, [usize; 2]>,
    /// Anything else worth carrying along, e.g. the run summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
    pub config_hash: String,
}

impl ReportSummary {
    pub fn of<T>(cases: &[ErrorCase<T>]) -> Self {
        let mut s = ReportSummary {
            sampled: cases.len(),
            ..Self::default()
        };
        for c in cases {
            let cat = c.record.category.map(|c| c.to_string()).unwrap_or_else(|| "unlabelled".into());
            let entry = s.by_category.entry(cat).or_insert([0, 0]);
            entry[1] += 1;
            if c.is_error() {
                entry[0] += 1;
                s.errors += 1;
                match c.label {
                    Class::Tiger => s.false_negatives += 1,
                    Class::NonTiger => s.false_positives += 1,
                }
            }
        }
        s
    }
}

/// Files produced by [`plot_histories`].
#[derive(Clone, Debug, Default)]
pub struct CurveArtifacts {
    pub accuracy_png: PathBuf,
    pub loss_png: PathBuf,
    pub csv: PathBuf,
    pub folds: Vec<usize>,
}

/// Distinct line colours, one per fold (cycled).
pub const FOLD_COLORS: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const PANEL_W: u32 = 360;
const PANEL_H: u32 = 240;
const MARGIN: u32 = 20;

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
        }
    }
}

fn draw_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    let c = |x: u32, y: u32| (x as f64, y as f64);
    draw_line(img, c(x0, y0), c(x1, y0), color);
    draw_line(img, c(x1, y0), c(x1, y1), color);
    draw_line(img, c(x1, y1), c(x0, y1), color);
    draw_line(img, c(x0, y1), c(x0, y0), color);
}

/// Two panels side by side (train, validation), one line per fold. The value
/// axis spans `range`; the epoch axis spans every recorded epoch.
fn render_metric(history: &RunHistory, folds: &[usize], value: fn(&EpochRecord) -> f64, range: (f64, f64)) -> RgbImage {
    let mut img = RgbImage::from_pixel(2 * PANEL_W, PANEL_H, Rgb([255, 255, 255]));
    let max_epoch = history.records.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (p, phase) in [Phase::Train, Phase::Val].into_iter().enumerate() {
        let ox = p as u32 * PANEL_W;
        let (left, right) = (ox + MARGIN, ox + PANEL_W - MARGIN);
        let (top, bottom) = (MARGIN, PANEL_H - MARGIN);
        draw_rect(&mut img, left, top, right, bottom, [0, 0, 0]);
        let to_px = |epoch: usize, v: f64| {
            let x = left as f64 + (right - left) as f64 * epoch as f64 / max_epoch;
            let y = bottom as f64 - (bottom - top) as f64 * ((v - lo) / span).clamp(0.0, 1.0);
            (x, y)
        };
        for (i, &fold) in folds.iter().enumerate() {
            let color = FOLD_COLORS[i % FOLD_COLORS.len()];
            let pts: Vec<(f64, f64)> = history
                .series(fold, phase)
                .iter()
                .map(|r| to_px(r.epoch, value(r)))
                .collect();
            for w in pts.windows(2) {
                draw_line(&mut img, w[0], w[1], color);
            }
            for &(x, y) in &pts {
                draw_line(&mut img, (x - 1.5, y), (x + 1.5, y), color);
            }
        }
    }
    img
}

/// Accuracy and loss curves per fold for both phases, plus a CSV holding
/// exactly the plotted points.
pub fn plot_histories(history: &RunHistory, out_dir: &Path) -> Result<CurveArtifacts> {
    if history.records.is_empty() {
        return Err(ReportError::EmptyHistory);
    }
    let dir = out_dir.join("curves");
    std::fs::create_dir_all(&dir)?;
    let mut folds: Vec<usize> = history.records.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();

    let max_loss = history.records.iter().map(|r| r.loss).filter(|l| l.is_finite()).fold(0.0, f64::max);
    let accuracy = render_metric(history, &folds, |r| r.accuracy, (0.0, 1.0));
    let loss = render_metric(history, &folds, |r| r.loss, (0.0, max_loss.max(1e-9)));
    let out = CurveArtifacts {
        accuracy_png: dir.join("accuracy.png"),
        loss_png: dir.join("loss.png"),
        csv: dir.join("history.csv"),
        folds,
    };
    accuracy.save(&out.accuracy_png)?;
    loss.save(&out.loss_png)?;
    history.write_csv(std::fs::File::create(&out.csv)?)?;
    Ok(out)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Writes `gallery/*.png`, `summary.json` and `index.html` under `out_dir`.
/// Misclassified cases are grouped into false negatives and false
/// positives; each row shows the input and its three layer overlays.
pub fn build_gallery<T: Scalar>(
    cases: &[ErrorCase<T>],
    out_dir: &Path,
    image_size: usize,
    curves: Option<&CurveArtifacts>,
    summary: &ReportSummary,
) -> Result<PathBuf> {
    let gallery = out_dir.join("gallery");
    std::fs::create_dir_all(&gallery)?;
    let pre = Preprocessor::new(image_size, crate::preprocess::NormStats::imagenet());

    let mut sections: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for case in cases.iter().filter(|c| c.is_error()) {
        if case.heatmaps.is_empty() {
            return Err(ReportError::MissingHeatmap(case.record.id.clone()));
        }
        let raw = pre.raw_resized::<T>(&case.record.path, &case.record.id)?;
        let stem = gradcam::export_stem(&case.record.id, "input", case.predicted.index());
        let original = gallery.join(format!("{stem}.png"));
        raw.to_rgb8().save(&original)?;
        let mut cells = vec![format!(
            "<td><img src=\"{}\" alt=\"input\"></td>",
            esc(&rel(&original, out_dir))
        )];
        for hm in &case.heatmaps {
            let path = gallery.join(format!(
                "{}.png",
                gradcam::export_stem(&case.record.id, &hm.layer, hm.class_index)
            ));
            gradcam::upsample_overlay(hm, &raw)?.save(&path)?;
            cells.push(format!(
                "<td><img src=\"{}\" alt=\"{}\"></td>",
                esc(&rel(&path, out_dir)),
                esc(&hm.layer)
            ));
        }
        let category = case.record.category.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
        let row = format!(
            "<tr><td>{}</td><td>{}</td><td>{:.4}</td>{}</tr>",
            esc(&case.record.id),
            esc(&category),
            case.probability,
            cells.join("")
        );
        let key = if case.label == Class::Tiger { "fn" } else { "fp" };
        sections.entry(key).or_default().push(row);
    }

    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Tiger mosquito triage report</title>\n");
    html.push_str("<style>body{font-family:sans-serif}table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:4px}img{width:160px}</style></head><body>\n");
    html.push_str("<h1>Tiger mosquito triage report</h1>\n");
    if !summary.config_hash.is_empty() {
        let _ = writeln!(html, "<p>config hash <code>{}</code></p>", esc(&summary.config_hash));
    }
    html.push_str("<h2>Counts</h2>\n<table id=\"counts\"><tr><th>sampled</th><th>errors</th><th>false negatives</th><th>false positives</th></tr>\n");
    let _ = writeln!(
        html,
        "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr></table>",
        summary.sampled, summary.errors, summary.false_negatives, summary.false_positives
    );
    if !summary.by_category.is_empty() {
        html.push_str("<table id=\"categories\"><tr><th>category</th><th>errors</th><th>sampled</th></tr>\n");
        for (cat, [e, n]) in &summary.by_category {
            let _ = writeln!(html, "<tr><td>{}</td><td>{e}</td><td>{n}</td></tr>", esc(cat));
        }
        html.push_str("</table>\n");
    }
    if let Some(c) = curves {
        html.push_str("<h2>Learning curves</h2>\n<p>Left panel: training; right panel: validation. Data: ");
        let _ = write!(html, "<a href=\"{}\">history.csv</a>.</p>\n<p>", esc(&rel(&c.csv, out_dir)));
        for (i, fold) in c.folds.iter().enumerate() {
            let [r, g, b] = FOLD_COLORS[i % FOLD_COLORS.len()];
            let _ = write!(html, "<span style=\"color:rgb({r},{g},{b})\">&#9632; fold {fold}</span> ");
        }
        html.push_str("</p>\n");
        for (title, p) in [("Accuracy (0 to 1)", &c.accuracy_png), ("Loss (0 to max)", &c.loss_png)] {
            let _ = writeln!(
                html,
                "<h3>{title}</h3><img style=\"width:720px\" src=\"{}\" alt=\"{title}\">",
                esc(&rel(p, out_dir))
            );
        }
    }
    for (key, title) in [("fn", "False negatives: tiger predicted as non-tiger"), ("fp", "False positives: non-tiger predicted as tiger")] {
        let rows = sections.get(key).map(Vec::as_slice).unwrap_or(&[]);
        let _ = writeln!(html, "<h2 id=\"{key}\">{title} ({})</h2>", rows.len());
        html.push_str("<table><tr><th>id</th><th>category</th><th>probability</th><th>input</th><th>shallow</th><th>middle</th><th>deep</th></tr>\n");
        for row in rows {
            html.push_str(row);
            html.push('\n');
        }
        html.push_str("</table>\n");
    }
    html.push_str("</body></html>\n");

    std::fs::write(out_dir.join("summary.json"), serde_json::to_vec_pretty(summary)?)?;
    let index = out_dir.join("index.html");
    std::fs::write(&index, html)?;
    Ok(index)
}
