//! Gradient-weighted class activation maps and their rendering.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Class;
use crate::model::{ClassSelector, ClassifierNet, GradientTarget, ModelError};
use crate::nn;
use crate::preprocess::{bilinear_plane, ImageTensor, PixelSpace};
use crate::Scalar;

/// Weight of the colormap in the overlay; the image keeps `1 - OVERLAY_ALPHA`.
pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Error)]
pub enum GradcamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("heatmap is already upsampled")]
    AlreadyUpsampled,
    #[error("overlay needs a raw-pixel image")]
    NotRawPixels,
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
    #[error("npy: {0}")]
    Npy(#[from] ndarray_npy::WriteNpyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GradcamError> = std::result::Result<T, E>;

/// Activation maps at one layer and the gradient of a class score with respect to them.
#[derive(Clone, Debug)]
pub struct LayerActivations<T> {
    pub layer: String,
    /// K×H′×W′ activations.
    pub activations: Array3<T>,
    /// K×H′×W′ gradients, same shape as `activations`.
    pub gradients: Array3<T>,
    pub class_index: usize,
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap<T> {
    /// Non-negative, un-normalised map.
    pub values: Array2<T>,
    pub layer: String,
    pub class_index: usize,
    pub upsampled: bool,
}

/// Per-channel spatial mean of the gradients.
pub fn alpha_weights<T: Scalar>(acts: &LayerActivations<T>) -> Array1<T> {
    let (k, h, w) = acts.gradients.dim();
    if h * w == 0 {
        return Array1::zeros(k);
    }
    acts.gradients
        .sum_axis(Axis(2))
        .sum_axis(Axis(1))
        .mapv_into(|s| s / T::lit((h * w) as f64))
}

/// `max(0, Σ_k α_k A_k)` with the weights supplied by the caller.
pub fn weighted_map<T: Scalar>(alphas: &Array1<T>, activations: &Array3<T>) -> Array2<T> {
    let (_, h, w) = activations.dim();
    let mut sum = Array2::<T>::zeros((h, w));
    for (a, plane) in alphas.iter().zip(activations.outer_iter()) {
        sum.scaled_add(*a, &plane);
    }
    sum.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn heatmap<T: Scalar>(acts: &LayerActivations<T>) -> Heatmap<T> {
    Heatmap {
        values: weighted_map(&alpha_weights(acts), &acts.activations),
        layer: acts.layer.clone(),
        class_index: acts.class_index,
        upsampled: false,
    }
}

/// Bilinear resize of the raw map to `(height, width)`.
pub fn upsample<T: Scalar>(hm: &Heatmap<T>, target: (usize, usize)) -> Result<Heatmap<T>> {
    if hm.upsampled {
        return Err(GradcamError::AlreadyUpsampled);
    }
    let values = bilinear_plane(hm.values.view(), target).mapv_into(|v| if v > T::zero() { v } else { T::zero() });
    Ok(Heatmap {
        values,
        layer: hm.layer.clone(),
        class_index: hm.class_index,
        upsampled: true,
    })
}

/// Per-image min-max scaling to [0, 1]. A constant positive map becomes all
/// ones and an all-zero map stays zero.
pub fn normalize_for_display<T: Scalar>(values: &Array2<T>) -> Array2<f64> {
    let v = values.mapv(|x| x.as_f64());
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() || !(max > 0.0) {
        return Array2::zeros(v.dim());
    }
    let range = max - min;
    if range <= 0.0 {
        return Array2::ones(v.dim());
    }
    v.mapv_into(|x| (x - min) / range)
}

/// Jet colormap: dark blue at 0 through cyan, yellow to dark red at 1.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Upsamples to the image size, normalises, applies [`jet`] and blends it over
/// the image with weight [`OVERLAY_ALPHA`].
pub fn upsample_overlay<T: Scalar>(hm: &Heatmap<T>, img: &ImageTensor<T>) -> Result<RgbImage> {
    if img.space != PixelSpace::RawPixels {
        return Err(GradcamError::NotRawPixels);
    }
    let (h, w) = (img.height(), img.width());
    let up = if hm.upsampled && hm.values.dim() == (h, w) {
        hm.clone()
    } else {
        upsample(hm, (h, w))?
    };
    let norm = normalize_for_display(&up.values);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let color = jet(norm[[y, x]]);
        let px = |c: usize| {
            let base = img.data[[c, y, x]].as_f64().clamp(0.0, 1.0);
            let v = (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * color[c];
            (v * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Heatmaps at several layers for one normalised 1×3×H×W image, all for the
/// predicted class.
pub fn multi_layer_cams<T: Scalar>(
    net: &ClassifierNet<T>,
    img: &Array4<T>,
    layers: &[&str],
    target: GradientTarget,
) -> Result<Vec<Heatmap<T>>> {
    let probs = net.forward(img)?;
    let class = nn::argmax(probs.row(0));
    layers
        .iter()
        .map(|layer| {
            let acts = net.forward_with_capture(img, layer, ClassSelector::Index(class), target)?;
            Ok(heatmap(&acts))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub record_id: String,
    pub layer: String,
    pub class_index: usize,
    pub class: String,
    /// [height, width] of the raw map.
    pub shape: [usize; 2],
    pub upsampled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ExportedHeatmap {
    pub png: PathBuf,
    pub npy: PathBuf,
    pub json: PathBuf,
}

/// `<record-id>_<layer>_<class>` with characters unsafe in file names replaced.
pub fn export_stem(record_id: &str, layer: &str, class_index: usize) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect::<String>()
    };
    format!("{}_{}_{}", clean(record_id), clean(layer), Class::from_index(class_index))
}

/// Writes the overlay PNG, the raw map as `.npy` (f64) and a JSON sidecar.
pub fn export<T: Scalar>(
    dir: &Path,
    hm: &Heatmap<T>,
    img: &ImageTensor<T>,
    config_hash: Option<&str>,
) -> Result<ExportedHeatmap> {
    std::fs::create_dir_all(dir)?;
    let stem = export_stem(&img.source_id, &hm.layer, hm.class_index);
    let png = dir.join(format!("{stem}.png"));
    let npy = dir.join(format!("{stem}.npy"));
    let json = dir.join(format!("{stem}.json"));
    upsample_overlay(hm, img)?.save(&png)?;
    ndarray_npy::write_npy(&npy, &hm.values.mapv(|v| v.as_f64()))?;
    let (h, w) = hm.values.dim();
    let sidecar = HeatmapSidecar {
        record_id: img.source_id.clone(),
        layer: hm.layer.clone(),
        class_index: hm.class_index,
        class: Class::from_index(hm.class_index).to_string(),
        shape: [h, w],
        upsampled: hm.upsampled,
        config_hash: config_hash.map(str::to_string),
    };
    std::fs::write(&json, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(ExportedHeatmap { png, npy, json })
}

/// True when every value is finite and non-negative.
pub fn is_valid_heatmap<T: Scalar>(hm: &Heatmap<T>) -> bool {
    Zip::from(&hm.values).all(|&v| v.is_finite() && v >= T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use proptest::prelude::*;

    fn acts(a: Array3<f64>, da: Array3<f64>) -> LayerActivations<f64> {
        LayerActivations {
            layer: "l".into(),
            activations: a,
            gradients: da,
            class_index: 1,
            logits: vec![0.0, 0.0],
            probabilities: vec![0.5, 0.5],
        }
    }

    #[test]
    fn alpha_is_spatial_mean() {
        let mut da = Array3::zeros((2, 2, 2));
        da.index_axis_mut(Axis(0), 0).fill(1.0);
        da.index_axis_mut(Axis(0), 1).fill(-1.0);
        let a = alpha_weights(&acts(Array3::zeros((2, 2, 2)), da));
        assert_eq!(a.to_vec(), vec![1.0, -1.0]);

        let da = Array3::from_elem((3, 5, 5), 0.25);
        assert!(alpha_weights(&acts(da.clone(), da)).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn alpha_matches_double_loop() {
        let da = Array::from_shape_fn((3, 4, 4), |(k, i, j)| ((k * 31 + i * 7 + j * 3) % 11) as f64 / 3.0 - 1.5);
        let alpha = alpha_weights(&acts(da.clone(), da.clone()));
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += da[[k, i, j]];
                }
            }
            assert!((alpha[k] - s / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_map() {
        let mut a = Array3::zeros((2, 2, 2));
        a.index_axis_mut(Axis(0), 0).assign(&arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        a.index_axis_mut(Axis(0), 1).assign(&arr2(&[[0.0, 2.0], [2.0, 0.0]]));
        let m = weighted_map(&Array1::from(vec![0.5, -1.0]), &a);
        assert_eq!(m, arr2(&[[0.5, 0.0], [0.0, 0.5]]));

        let m = weighted_map(&Array1::from(vec![-0.5, -1.0]), &a);
        assert!(m.iter().all(|&v| v == 0.0));

        let single = Array3::from_shape_vec((1, 2, 2), vec![1.0, -2.0, 0.0, 3.0]).unwrap();
        let m = weighted_map(&Array1::from(vec![1.0]), &single);
        assert_eq!(m, arr2(&[[1.0, 0.0], [0.0, 3.0]]));
    }

    fn flat_image(v: f64, size: usize) -> ImageTensor<f64> {
        ImageTensor::raw(Array3::from_elem((3, size, size), v), "img").unwrap()
    }

    fn map(values: Array2<f64>) -> Heatmap<f64> {
        Heatmap {
            values,
            layer: "deep".into(),
            class_index: 1,
            upsampled: false,
        }
    }

    #[test]
    fn overlay_degenerate_maps() {
        let img = flat_image(0.5, 16);
        let zero = upsample_overlay(&map(Array2::zeros((4, 4))), &img).unwrap();
        let floor = jet(0.0);
        for px in zero.pixels() {
            for c in 0..3 {
                let expected = ((0.6 * 0.5 + 0.4 * floor[c]) * 255.0).round() as u8;
                assert_eq!(px[c], expected);
            }
        }
        let constant = upsample_overlay(&map(Array2::from_elem((4, 4), 3.0)), &img).unwrap();
        let first = *constant.get_pixel(0, 0);
        assert!(constant.pixels().all(|p| *p == first));
        assert_ne!(first, *zero.get_pixel(0, 0));
    }

    #[test]
    fn single_hot_maximum_lands_in_its_patch() {
        for (r, c) in [(0usize, 0usize), (3, 5), (6, 6), (2, 0)] {
            let mut v = Array2::zeros((7, 7));
            v[[r, c]] = 1.0;
            let up = upsample(&map(v), (224, 224)).unwrap();
            let (mut best, mut at) = (f64::MIN, (0, 0));
            for ((y, x), &val) in up.values.indexed_iter() {
                if val > best {
                    best = val;
                    at = (y, x);
                }
            }
            assert_eq!((at.0 / 32, at.1 / 32), (r, c));
        }
    }

    #[test]
    fn upsample_is_flagged_once() {
        let up = upsample(&map(Array2::ones((2, 2))), (8, 8)).unwrap();
        assert!(up.upsampled);
        assert!(matches!(upsample(&up, (8, 8)), Err(GradcamError::AlreadyUpsampled)));
    }

    #[test]
    fn export_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = flat_image(0.2, 8);
        let out = export(dir.path(), &map(Array2::eye(2)), &img, Some("abc")).unwrap();
        assert!(out.png.ends_with("img_deep_tiger.png"));
        let side: HeatmapSidecar = serde_json::from_slice(&std::fs::read(&out.json).unwrap()).unwrap();
        assert_eq!(side.shape, [2, 2]);
        assert_eq!(side.config_hash.as_deref(), Some("abc"));
        let raw: Array2<f64> = ndarray_npy::read_npy(&out.npy).unwrap();
        assert_eq!(raw, Array2::<f64>::eye(2));
    }

    proptest! {
        #[test]
        fn positive_gradient_scaling_keeps_zero_set(
            a in proptest::collection::vec(-2.0f64..2.0, 2 * 3 * 3),
            g in proptest::collection::vec(-2.0f64..2.0, 2 * 3 * 3),
            s in 0.01f64..100.0,
        ) {
            let a = Array3::from_shape_vec((2, 3, 3), a).unwrap();
            let g = Array3::from_shape_vec((2, 3, 3), g).unwrap();
            let base = acts(a.clone(), g.clone());
            let scaled = acts(a, g * s);
            let (ab, as_) = (alpha_weights(&base), alpha_weights(&scaled));
            for (x, y) in ab.iter().zip(as_.iter()) {
                prop_assert!((x * s - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
            let (hb, hs) = (heatmap(&base), heatmap(&scaled));
            prop_assert!(is_valid_heatmap(&hb) && is_valid_heatmap(&hs));
            for (x, y) in hb.values.iter().zip(hs.values.iter()) {
                // pixels whose pre-ReLU sum is within rounding of zero may flip
                if x.abs() > 1e-9 || y.abs() > 1e-9 {
                    prop_assert_eq!(*x == 0.0, *y == 0.0);
                    prop_assert!((x * s - y).abs() <= 1e-8 * (1.0 + y.abs()));
                }
            }
        }
    }
}
