//! Manifest to report, end to end, on a small synthetic corpus.

use std::path::Path;

use image::{Rgb, RgbImage};
use tiger_triage::dataset::{ingest_manifest, make_folds, DatasetError, LabelPolicy};
use tiger_triage::gradcam;
use tiger_triage::model::{load_checkpoint, BackboneFamily, BackboneSpec, FreezePolicy, GradientTarget};
use tiger_triage::preprocess::{apply_norm, Preprocessor};
use tiger_triage::report::{analyse_record, build_gallery, plot_histories, sample_error_set, ReportSummary};
use tiger_triage::train::{fold_dir, run_cv, RunEnv, TrainConfig};

fn write_corpus(root: &Path) -> std::path::PathBuf {
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();
    let mut csv = String::from("id,relative_path,species,confidence,category\n");
    let rows = [
        ("albopictus", "confirmed", 6),
        ("aegypti", "confirmed", 3),
        ("other", "confirmed", 3),
        ("albopictus", "probable", 2),
        ("cannot_tell", "not_classified", 1),
    ];
    let mut k = 0;
    for (species, confidence, n) in rows {
        for _ in 0..n {
            let bright = species == "albopictus";
            let rel = format!("{species}/{k}.png");
            std::fs::create_dir_all(images.join(species)).unwrap();
            RgbImage::from_fn(20 + k, 16, |x, y| {
                let v = if bright { 200 } else { 40 };
                Rgb([v, ((x * 7 + y * 3 + k) % 60) as u8, v / 3])
            })
            .save(images.join(&rel))
            .unwrap();
            let category = if k % 3 == 0 { "damaged_or_occluded" } else { "clear" };
            csv.push_str(&format!("img{k},{rel},{species},{confidence},{category}\n"));
            k += 1;
        }
    }
    let manifest = root.join("manifest.csv");
    std::fs::write(&manifest, csv).unwrap();
    manifest
}

fn config() -> TrainConfig {
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
fn manifest_to_gallery() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let records = ingest_manifest(&manifest, &tmp.path().join("images")).unwrap();
    assert_eq!(records.len(), 15);

    let plan = make_folds(&records, 3, 42).unwrap();
    assert_eq!(plan.assignments.len(), 12);

    let run = tmp.path().join("run");
    let env = RunEnv {
        run_dir: Some(run.clone()),
        config_hash: "0123456789ab".into(),
        ..RunEnv::default()
    };
    let cfg = config();
    let out = run_cv::<f32>(&records, &cfg, &env).unwrap();
    assert_eq!(out.summary.pooled.counts.total(), 12);
    assert_eq!(out.history.records.len(), 3 * 2 * 2);

    // checkpoint reload reproduces the stored evaluation
    let ckpt = fold_dir(&run, 0).join("final.safetensors");
    let loaded = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(loaded.meta.config_hash, "0123456789ab");
    let pre = Preprocessor::new(cfg.image_size, loaded.norm_stats.clone());
    let eval0 = &out.evaluations[0];
    let id = &eval0.ids[0];
    let rec = records.iter().find(|r| &r.id == id).unwrap();
    let x = pre.load::<f32>(&rec.path, id).unwrap().data.insert_axis(ndarray::Axis(0));
    let p = loaded.net.forward(&x).unwrap()[[0, 1]] as f64;
    assert!((p - eval0.tiger_probability[0]).abs() < 1e-6);

    // report: sample, explain, render
    let sample = sample_error_set(&records, 6, 42, &LabelPolicy::default()).unwrap();
    assert_eq!(sample.len(), 6);
    let cases: Vec<_> = sample
        .iter()
        .map(|r| {
            let label = r.training_class(&LabelPolicy::default()).unwrap();
            analyse_record(&loaded.net, &pre, r, label, GradientTarget::Score).unwrap()
        })
        .collect();
    for c in &cases {
        assert_eq!(c.heatmaps.len(), 3);
        assert!(c.heatmaps.iter().all(gradcam::is_valid_heatmap));
    }
    let report_dir = tmp.path().join("report");
    let curves = plot_histories(&out.history, &report_dir).unwrap();
    let summary = ReportSummary::of(&cases);
    let index = build_gallery(&cases, &report_dir, cfg.image_size, Some(&curves), &summary).unwrap();
    assert!(index.is_file());
    assert!(curves.accuracy_png.is_file() && curves.loss_png.is_file());
    assert_eq!(summary.false_negatives + summary.false_positives, summary.errors);

    // heatmap export of the first case
    let raw = pre.raw_resized::<f32>(&sample[0].path, &sample[0].id).unwrap();
    let normed = apply_norm(&raw, &pre.stats).unwrap();
    assert_eq!(normed.data.dim(), (3, 32, 32));
    let exported = gradcam::export(&report_dir.join("cams"), &cases[0].heatmaps[2], &raw, Some("0123456789ab")).unwrap();
    assert!(exported.png.is_file() && exported.npy.is_file() && exported.json.is_file());
}

#[test]
fn unreadable_images_are_reported_together() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let images = tmp.path().join("images");
    std::fs::write(images.join("aegypti/6.png"), b"not a png").unwrap();
    std::fs::write(images.join("other/9.png"), b"").unwrap();
    match ingest_manifest(&manifest, &images) {
        Err(DatasetError::UnreadableImage { mut row_ids }) => {
            row_ids.sort();
            assert_eq!(row_ids, ["img6", "img9"]);
        }
        other => panic!("unexpected {other:?}"),
    }
}
