//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Every oracle here is computed independently of the library
//! code path it checks.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiger_triage::dataset::{make_folds, Class, Confidence, ImageRecord, Species};
use tiger_triage::gradcam;
use tiger_triage::metrics::{confusion, eq4_metrics, ConfusionCounts};
use tiger_triage::model::{
    build, build_untrained, BackboneFamily, BackboneSpec, ClassSelector, ClassifierNet, FreezePolicy, GradientTarget, Head,
    LayerTag, Unit,
};
use tiger_triage::nn::{Conv2d, Layer, Named};
use tiger_triage::preprocess::{apply_norm, fit_norm_stats, ImageTensor, NormMode};
use tiger_triage::train::{evaluate, lr_at, train_fold, FoldOptions, InMemorySource, Phase, SampleSource, TrainConfig};

/// Relative tolerance for the Grad-CAM oracle comparison.
const GRADCAM_REL_TOL: f64 = 1e-3;
const GRADCAM_MAX_SECS: f64 = 10.0;
/// Published values are rounded to two decimals.
const PAPER_TOL: f64 = 0.01;
/// Exact four-decimal values.
const EXACT_TOL: f64 = 5e-5;
const NORM_MEAN_TOL: f64 = 1e-5;
const NORM_STD_TOL: f64 = 1e-4;
const FOLD_MANIFESTS: usize = 100;
const SCHEDULE_REL_TOL: f64 = 1e-12;
const OVERFIT_STEPS: usize = 50;
const OVERFIT_MAX_LOSS: f64 = 0.05;
const OVERFIT_MAX_SECS: f64 = 300.0;
const CAPTURE_STEP: f64 = 1e-3;
const CAPTURE_REL_TOL: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Grad-CAM oracle

struct TinyWeights {
    conv_w: Array4<f64>,
    conv_b: Array1<f64>,
    fc1_w: Array2<f64>,
    fc1_b: Array1<f64>,
    fc2_w: Array2<f64>,
    fc2_b: Array1<f64>,
}

fn naive_conv_relu(x: &Array3<f64>, w: &TinyWeights) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let k = w.conv_w.dim().0;
    let mut out = Array3::zeros((k, h, wd));
    for o in 0..k {
        for i in 0..h {
            for j in 0..wd {
                let mut s = w.conv_b[o];
                for c in 0..cin {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as i64 + di as i64 - 1, j as i64 + dj as i64 - 1);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                s += w.conv_w[[o, c, di, dj]] * x[[c, ii as usize, jj as usize]];
                            }
                        }
                    }
                }
                out[[o, i, j]] = s.max(0.0);
            }
        }
    }
    out
}

fn naive_score(a: &Array3<f64>, w: &TinyWeights, class: usize) -> f64 {
    let flat: Vec<f64> = a.iter().copied().collect();
    let mut s = w.fc2_b[class];
    for j in 0..w.fc1_w.nrows() {
        let mut z = w.fc1_b[j];
        for (m, v) in flat.iter().enumerate() {
            z += w.fc1_w[[j, m]] * v;
        }
        s += w.fc2_w[[class, j]] * z.max(0.0);
    }
    s
}

fn gradcam_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (k, side, hidden) = (4usize, 4usize, 6usize);
    let mut conv = Conv2d::<f64>::zeros(3, k, 3, 1, 1, true);
    conv.weight.mapv_inplace(|_| rng.random_range(-0.6..0.6));
    conv.bias.as_mut().unwrap().mapv_inplace(|_| rng.random_range(0.0..0.2));
    let mut head = Head::<f64>::init(k * side * side, hidden, 0.0, &mut rng);
    head.fc1.bias.mapv_inplace(|_| rng.random_range(0.0..0.3));
    let weights = TinyWeights {
        conv_w: conv.weight.clone(),
        conv_b: conv.bias.clone().unwrap(),
        fc1_w: head.fc1.weight.clone(),
        fc1_b: head.fc1.bias.clone(),
        fc2_w: head.fc2.weight.clone(),
        fc2_b: head.fc2.bias.clone(),
    };
    let units = vec![Unit::new(
        "conv1",
        1,
        vec![Named::new("conv", Layer::Conv(conv)), Named::new("relu", Layer::Relu)],
        true,
    )];
    let net = ClassifierNet::from_parts(units, head, vec![(LayerTag::Deep, "conv1".into())]).unwrap();
    let img = Array3::from_shape_fn((3, side, side), |_| rng.random_range(-1.0..1.0));

    let mut worst: f64 = 0.0;
    for class in 0..2 {
        let acts = net
            .forward_with_capture(
                &img.clone().insert_axis(Axis(0)),
                "deep",
                ClassSelector::Index(class),
                GradientTarget::Score,
            )
            .unwrap();
        let captured = gradcam::heatmap(&acts);

        let a = naive_conv_relu(&img, &weights);
        let h = 1e-5;
        let mut da = Array3::<f64>::zeros(a.dim());
        for idx in ndarray::indices(a.dim()) {
            let (mut p, mut m) = (a.clone(), a.clone());
            p[idx] += h;
            m[idx] -= h;
            da[idx] = (naive_score(&p, &weights, class) - naive_score(&m, &weights, class)) / (2.0 * h);
        }
        let mut alpha = vec![0.0; k];
        for (kk, al) in alpha.iter_mut().enumerate() {
            for i in 0..side {
                for j in 0..side {
                    *al += da[[kk, i, j]];
                }
            }
            *al /= (side * side) as f64;
        }
        let mut oracle = Array2::<f64>::zeros((side, side));
        for i in 0..side {
            for j in 0..side {
                let mut s = 0.0;
                for (kk, al) in alpha.iter().enumerate() {
                    s += al * a[[kk, i, j]];
                }
                oracle[[i, j]] = s.max(0.0);
            }
        }
        let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in captured.values.iter().zip(oracle.iter()) {
            worst = worst.max((x - y).abs() / scale);
        }
        let act_err = acts
            .activations
            .iter()
            .zip(a.iter())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(act_err);
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < GRADCAM_REL_TOL && secs < GRADCAM_MAX_SECS,
        format!("max relative deviation {worst:.2e} (tol {GRADCAM_REL_TOL:.0e}), {secs:.2}s (limit {GRADCAM_MAX_SECS}s)"),
    )
}

// ---------------------------------------------------------------------------
// Precision, recall and F1 from the published confusion counts

fn naive_recount(preds: &[bool], labels: &[bool]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (p, l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let precision = if tp + fp > 0.0 { Some(tp / (tp + fp)) } else { None };
    let recall = if tp + fn_ > 0.0 { Some(tp / (tp + fn_)) } else { None };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let n = tp + tn + fp + fn_;
    let accuracy = if n > 0.0 { Some((tp + tn) / n) } else { None };
    (accuracy, precision, recall, f1)
}

fn expand(c: ConfusionCounts) -> (Vec<bool>, Vec<bool>) {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for (n, p, l) in [(c.tp, true, true), (c.tn, false, false), (c.fp, true, false), (c.fn_, false, true)] {
        for _ in 0..n {
            preds.push(p);
            labels.push(l);
        }
    }
    (preds, labels)
}

fn reference_counts() -> Outcome {
    // (counts, published 2-dp precision/recall/F1, exact 4-dp precision/recall/F1)
    let rows = [
        ("vgg16", ConfusionCounts { tp: 3318, tn: 2935, fp: 46, fn_: 79 }, [0.98, 0.97, 0.98], [0.9863, 0.9767, 0.9815]),
        ("resnet50", ConfusionCounts { tp: 3270, tn: 2898, fp: 94, fn_: 116 }, [0.97, 0.96, 0.96], [0.9721, 0.9657, 0.9689]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, counts, paper, exact) in rows {
        let (preds, labels) = expand(counts);
        let cls = |v: &[bool]| v.iter().map(|&b| if b { Class::Tiger } else { Class::NonTiger }).collect::<Vec<_>>();
        let report = eq4_metrics(confusion(&cls(&preds), &cls(&labels)).unwrap());
        let (_, p, r, f) = naive_recount(&preds, &labels);
        let got = [report.precision.unwrap(), report.recall.unwrap(), report.f1.unwrap()];
        let oracle = [p.unwrap(), r.unwrap(), f.unwrap()];
        for i in 0..3 {
            ok &= (got[i] - paper[i]).abs() <= PAPER_TOL;
            ok &= (got[i] - exact[i]).abs() < EXACT_TOL;
            ok &= (oracle[i] - exact[i]).abs() < EXACT_TOL;
            ok &= (got[i] - oracle[i]).abs() < 1e-12;
        }
        notes.push(format!("{name} P/R/F1 {:.4}/{:.4}/{:.4}", got[0], got[1], got[2]));
    }
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// Normalisation

fn pooled_channel_stats(images: &[ImageTensor<f64>]) -> [(f64, f64); 3] {
    let mut out = [(0.0, 0.0); 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = images
            .iter()
            .flat_map(|img| img.data.index_axis(Axis(0), c).iter().copied().collect::<Vec<_>>())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        *slot = (mean, var.sqrt());
    }
    out
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for trial in 0..20 {
        let n = rng.random_range(4..30);
        let images: Vec<ImageTensor<f64>> = (0..n)
            .map(|i| {
                let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
                let scale = [0.05 + 0.3 * rng.random::<f64>(), 0.2, 0.5];
                let data = Array3::from_shape_fn((3, h, w), |(c, _, _)| {
                    (0.1 * c as f64 + scale[c] * rng.random::<f64>()).clamp(0.0, 1.0)
                });
                ImageTensor::raw(data, format!("t{trial}-{i}")).unwrap()
            })
            .collect();
        // fit on a random training split only
        let split = n * 4 / 5;
        let train = &images[..split.max(1)];
        let stats = fit_norm_stats(train.iter().cloned(), NormMode::PerChannel).unwrap();
        let normed: Vec<_> = train.iter().map(|img| apply_norm(img, &stats).unwrap()).collect();
        for (m, s) in pooled_channel_stats(&normed) {
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - 1.0).abs());
        }
    }
    // constant channel
    let flat: Vec<ImageTensor<f64>> = (0..3)
        .map(|i| {
            let data = Array3::from_shape_fn((3, 5, 5), |(c, y, x)| if c == 1 { 0.4 } else { ((x + y + i) % 4) as f64 / 4.0 });
            ImageTensor::raw(data, "flat").unwrap()
        })
        .collect();
    let stats = fit_norm_stats(flat.iter().cloned(), NormMode::PerChannel).unwrap();
    let finite = flat
        .iter()
        .map(|img| apply_norm(img, &stats).unwrap())
        .all(|img| img.data.iter().all(|v| v.is_finite()));
    outcome(
        worst_mean < NORM_MEAN_TOL && worst_std < NORM_STD_TOL && finite,
        format!(
            "max |mean| {worst_mean:.2e} (tol {NORM_MEAN_TOL:.0e}), max |std-1| {worst_std:.2e} (tol {NORM_STD_TOL:.0e}), zero-variance channel finite: {finite}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Fold integrity

fn fold_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for m in 0..FOLD_MANIFESTS {
        let n = rng.random_range(10..400);
        let k = if m % 2 == 0 { 5 } else { rng.random_range(2..=10) };
        let mut records = Vec::new();
        for i in 0..n {
            let (species, confidence) = match rng.random_range(0..10) {
                0..=3 => (Species::Albopictus, Confidence::Confirmed),
                4..=7 => (if rng.random() { Species::Aegypti } else { Species::Other }, Confidence::Confirmed),
                8 => (Species::Albopictus, Confidence::Probable),
                _ => (Species::CannotTell, Confidence::NotClassified),
            };
            records.push(ImageRecord::new(format!("r{m}-{i}"), format!("{i}.jpg"), species, confidence));
        }
        let eligible: Vec<&ImageRecord> = records
            .iter()
            .filter(|r| r.confidence == Confidence::Confirmed && r.species != Species::CannotTell)
            .collect();
        let positives: HashSet<&str> = eligible
            .iter()
            .filter(|r| r.species == Species::Albopictus)
            .map(|r| r.id.as_str())
            .collect();
        if eligible.len() < k || positives.is_empty() || positives.len() == eligible.len() {
            continue;
        }
        let seed = rng.random::<u64>();
        let plan = make_folds(&records, k, seed).unwrap();

        // exhaustive over eligible records, nothing else assigned
        let assigned: HashSet<&str> = plan.assignments.keys().map(String::as_str).collect();
        let expected: HashSet<&str> = eligible.iter().map(|r| r.id.as_str()).collect();
        if assigned != expected {
            failures.push(format!("manifest {m}: assignment set differs"));
            continue;
        }
        // disjoint: validation parts partition the eligible set
        let mut seen = HashSet::new();
        for f in 0..k {
            let (train, val) = plan.split(&records, f);
            for r in &val {
                if !seen.insert(r.id.clone()) || train.iter().any(|t| t.id == r.id) {
                    failures.push(format!("manifest {m}: {} repeated", r.id));
                }
            }
        }
        if seen.len() != eligible.len() {
            failures.push(format!("manifest {m}: folds not exhaustive"));
        }
        // stratified within one sample
        let (n_el, n_pos) = (eligible.len() as f64, positives.len() as f64);
        let mut per_fold: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (id, &f) in &plan.assignments {
            let e = per_fold.entry(f).or_default();
            e.0 += 1;
            e.1 += usize::from(positives.contains(id.as_str()));
        }
        for (f, (size, pos)) in &per_fold {
            let ideal = *size as f64 * n_pos / n_el;
            if (*pos as f64 - ideal).abs() > 1.0 {
                failures.push(format!("manifest {m} fold {f}: {pos} positives, ideal {ideal:.2}"));
            }
        }
        let sizes = plan.fold_sizes();
        if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            failures.push(format!("manifest {m}: fold sizes {sizes:?}"));
        }
        // reproducible and independent of input order
        let mut reversed = records.clone();
        reversed.reverse();
        if make_folds(&records, k, seed).unwrap() != plan || make_folds(&reversed, k, seed).unwrap() != plan {
            failures.push(format!("manifest {m}: not reproducible"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{FOLD_MANIFESTS} manifests: disjoint, exhaustive, stratified within ±1, reproducible")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

fn tiny_trainable_net(seed: u64) -> ClassifierNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = Conv2d::<f64>::zeros(3, 2, 3, 1, 1, true);
    conv.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let units = vec![Unit::new(
        "conv",
        1,
        vec![Named::new("c", Layer::Conv(conv)), Named::new("r", Layer::Relu)],
        true,
    )];
    let head = Head::init(2 * 3 * 3, 4, 0.5, &mut rng);
    ClassifierNet::from_parts(units, head, vec![(LayerTag::Deep, "conv".into())]).unwrap()
}

fn schedule() -> Outcome {
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let images = (0..6).map(|i| Array3::from_elem((3, 3, 3), i as f64 / 6.0 - 0.5)).collect();
    let labels = (0..6).map(|i| Class::from_index(i % 2)).collect();
    let src = InMemorySource::new((0..6).map(|i| format!("s{i}")).collect(), images, labels);
    let mut net = tiny_trainable_net(1);
    let out = train_fold(&mut net, &src, None, &cfg, &FoldOptions::default()).unwrap();
    let train_rows = out.history.series(0, Phase::Train);
    let mut ok = train_rows.len() == 25;
    for (e, row) in train_rows.iter().enumerate() {
        let expected = 0.001 * 0.1f64.powi((e / 7) as i32);
        ok &= row.epoch == e && ((row.lr - expected) / expected).abs() < SCHEDULE_REL_TOL;
        ok &= lr_at(e, &cfg) == row.lr;
    }
    let marks: Vec<f64> = [0, 7, 14, 21].iter().map(|&e| train_rows[e].lr).collect();
    for (got, want) in marks.iter().zip([1e-3, 1e-4, 1e-5, 1e-6]) {
        ok &= ((got - want) / want).abs() < SCHEDULE_REL_TOL;
    }
    outcome(ok, format!("{} epochs recorded; lr at epochs 0/7/14/21 = {marks:?}", train_rows.len()))
}

// ---------------------------------------------------------------------------
// Overfit one batch

/// Trains on `src` and reports eval-mode accuracy and loss on the same batch.
fn overfit(mut net: ClassifierNet<f32>, src: &InMemorySource<f32>, spec: BackboneSpec, started: Instant, what: &str) -> Outcome {
    let n = src.len();
    // a single 64-image batch per epoch, constant learning rate over the 50 steps
    let cfg = TrainConfig {
        epochs: OVERFIT_STEPS,
        step_size_epochs: OVERFIT_STEPS,
        batch_size: n,
        backbone: spec,
        ..TrainConfig::default()
    };
    if let Err(e) = train_fold(&mut net, src, None, &cfg, &FoldOptions::default()) {
        return outcome(false, format!("training failed: {e}"));
    }
    let ev = evaluate(&net, src, n).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        ev.accuracy == 1.0 && ev.mean_loss < OVERFIT_MAX_LOSS && secs < OVERFIT_MAX_SECS,
        format!(
            "{what}: accuracy {:.3}, loss {:.4} (limit {OVERFIT_MAX_LOSS}), {secs:.1}s (limit {OVERFIT_MAX_SECS}s)",
            ev.accuracy, ev.mean_loss
        ),
    )
}

fn overfit_smoke() -> Outcome {
    let started = Instant::now();
    let spec = BackboneSpec {
        freeze_policy: FreezePolicy::FeaturesOnly,
        ..BackboneSpec::new(BackboneFamily::Vgg16)
    };
    let n = 64;
    let labels: Vec<Class> = (0..n).map(|i| Class::from_index(i % 2)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("img{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let pretrained = BackboneSpec { pretrained: true, ..spec };
    if let Ok(net) = build::<f32>(pretrained, 0.5, 42) {
        let images = (0..n)
            .map(|_| Array3::from_shape_fn((3, 224, 224), |_| rng.random_range(-2.0f32..2.0)))
            .collect();
        let src = InMemorySource::new(ids, images, labels);
        return overfit(net, &src, spec, started, "pretrained vgg16");
    }

    // Without cached weights a random backbone maps every input to nearly the
    // same feature vector, so the frozen-feature path is fed synthetic
    // rectified pool5 activations instead. The head is the vgg16 head.
    let donor = build_untrained::<f32>(spec, 0.5, 42);
    let (c, h, w) = donor.unit_output_shape(donor.units.len() - 1, (3, 224, 224)).unwrap();
    let head = donor.head.clone();
    drop(donor);
    let units = vec![Unit::new("pool5", 6, vec![Named::new("relu", Layer::Relu)], true)];
    let net = ClassifierNet::from_parts(units, head, vec![(LayerTag::Deep, "pool5".into())]).unwrap();
    let features = (0..n)
        .map(|_| Array3::from_shape_fn((c, h, w), |_| rng.random_range(-3.0f32..3.0).max(0.0)))
        .collect();
    let src = InMemorySource::new(ids, features, labels);
    overfit(net, &src, spec, started, &format!("vgg16 head on synthetic {c}x{h}x{w} features"))
}

// ---------------------------------------------------------------------------
// Gradient capture against finite differences

fn capture_check(family: BackboneFamily, side: usize, amplitude: f64) -> (f64, usize) {
    let spec = BackboneSpec {
        freeze_policy: FreezePolicy::FeaturesOnly,
        ..BackboneSpec::new(family)
    };
    let net = build_untrained::<f64>(spec, 0.5, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Zero-bias random nets are positively homogeneous; the input amplitude
    // puts deep activations at O(1) so a fixed step stays well inside each
    // max-pool decision region.
    let img = Array4::from_shape_fn((1, 3, side, side), |_| rng.random_range(-amplitude..amplitude));
    let acts = net
        .forward_with_capture(&img, "deep", ClassSelector::Predicted, GradientTarget::Score)
        .unwrap();
    let c = acts.class_index;
    let layer = net.layer_for_tag(LayerTag::Deep).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    // zero activations sit on a ReLU kink where the downstream max-pool
    // derivative is one-sided
    let cells: Vec<_> = ndarray::indices(acts.activations.dim())
        .into_iter()
        .filter(|&i| acts.activations[i] > 0.0)
        .collect();
    for &idx in cells.iter().step_by((cells.len() / 48).max(1)) {
        let (mut p, mut m) = (acts.activations.clone(), acts.activations.clone());
        p[idx] += CAPTURE_STEP;
        m[idx] -= CAPTURE_STEP;
        let fd = (net.tail_logits(layer, &p).unwrap()[c] - net.tail_logits(layer, &m).unwrap()[c]) / (2.0 * CAPTURE_STEP);
        let g = acts.gradients[idx];
        let scale = g.abs().max(fd.abs());
        if scale > 1e-12 {
            worst = worst.max((fd - g).abs() / scale);
        }
        checked += 1;
    }
    (worst, checked)
}

fn gradient_capture() -> Outcome {
    let (vgg, n_vgg) = capture_check(BackboneFamily::Vgg16, 32, 100.0);
    let (res, n_res) = capture_check(BackboneFamily::Resnet50, 64, 1.0);
    outcome(
        vgg < CAPTURE_REL_TOL && res < CAPTURE_REL_TOL,
        format!(
            "vgg16 conv5_3: {n_vgg} cells, max rel err {vgg:.2e}; resnet50 layer4.2: {n_res} cells, max rel err {res:.2e} (tol {CAPTURE_REL_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------------------
// Exhaustive metrics check

fn metrics_brute_force() -> Outcome {
    let bits = |v: u8| (0..4).map(|i| v >> i & 1 == 1).collect::<Vec<bool>>();
    let cls = |v: &[bool]| v.iter().map(|&b| if b { Class::Tiger } else { Class::NonTiger }).collect::<Vec<_>>();
    let mut combos = 0;
    let mut mismatches = 0;
    for l in 0..16u8 {
        for p in 0..16u8 {
            let (labels, preds) = (bits(l), bits(p));
            let report = eq4_metrics(confusion(&cls(&preds), &cls(&labels)).unwrap());
            let (a, pr, r, f) = naive_recount(&preds, &labels);
            let same = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            if !(same(report.accuracy, a) && same(report.precision, pr) && same(report.recall, r) && same(report.f1, f))
                || report.counts.total() != 4
            {
                mismatches += 1;
            }
            combos += 1;
        }
    }
    outcome(mismatches == 0 && combos == 256, format!("{combos} combinations, {mismatches} mismatches"))
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this gate
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("grad-cam oracle equivalence", gradcam_oracle),
        ("precision/recall/f1 from reference confusion counts", reference_counts),
        ("normalization", normalization),
        ("fold integrity", fold_integrity),
        ("lr schedule", schedule),
        ("overfit smoke test", overfit_smoke),
        ("gradient capture", gradient_capture),
        ("metrics brute force", metrics_brute_force),
    ];
    let mut failed = 0;
    let mut total = Duration::ZERO;
    for (name, check) in criteria {
        let t = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        total += t.elapsed();
        if !result.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s)",
        8 - failed,
        total.as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
