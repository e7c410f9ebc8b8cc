//! Image decoding, resizing and z-score normalization.
//!
//! Normalization statistics are fitted on training images only and are applied
//! per channel as `(x - mean) / (std + eps)`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageDecoder, ImageReader, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

/// Guard added to the standard deviation when normalizing.
pub const NORM_EPSILON: f64 = 1e-7;

/// Default network input side length.
pub const DEFAULT_INPUT_SIZE: usize = 224;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("image has a zero-sized dimension ({height}x{width})")]
    ZeroDimensionInput { height: usize, width: usize },
    #[error("no images to fit normalization statistics on")]
    EmptyStream,
    #[error("expected a tensor in {expected:?} space, got {found:?}")]
    WrongSpace { expected: PixelSpace, found: PixelSpace },
    #[error("expected 3 channels, got {0}")]
    ChannelCount(usize),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelSpace {
    RawPixels,
    Normalized,
}

/// A C×H×W image. Raw tensors hold values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    pub data: Array3<T>,
    pub space: PixelSpace,
    pub source_id: String,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn raw(data: Array3<T>, source_id: impl Into<String>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(PreprocessError::ChannelCount(data.dim().0));
        }
        Ok(Self {
            data,
            space: PixelSpace::RawPixels,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    fn expect_space(&self, expected: PixelSpace) -> Result<()> {
        if self.space != expected {
            return Err(PreprocessError::WrongSpace {
                expected,
                found: self.space,
            });
        }
        Ok(())
    }

    pub fn from_rgb8(img: &RgbImage, source_id: impl Into<String>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let scale = T::lit(1.0 / 255.0);
        let mut data = Array3::<T>::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = T::lit(px[c] as f64) * scale;
            }
        }
        Self {
            data,
            space: PixelSpace::RawPixels,
            source_id: source_id.into(),
        }
    }

    /// Back to 8-bit RGB, clamping to [0, 1]. Only meaningful for raw tensors.
    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = self.data[[c, y as usize, x as usize]].as_f64().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

fn decode_with(reader: ImageReader<impl std::io::BufRead + std::io::Seek>, path: &Path) -> Result<DynamicImage> {
    let err = |e: image::ImageError| PreprocessError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let reader = reader.with_guessed_format().map_err(|e| PreprocessError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut decoder = reader.into_decoder().map_err(err)?;
    let orientation = decoder.orientation().map_err(err)?;
    let mut img = DynamicImage::from_decoder(decoder).map_err(err)?;
    img.apply_orientation(orientation);
    Ok(img)
}

/// Decodes a JPEG/PNG file to RGB with its EXIF orientation applied.
pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| PreprocessError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(decode_with(reader, path)?.to_rgb8())
}

pub fn decode_rgb_bytes(bytes: &[u8]) -> Result<RgbImage> {
    let reader = ImageReader::new(Cursor::new(bytes));
    Ok(decode_with(reader, Path::new("<memory>"))?.to_rgb8())
}

pub fn load_raw<T: Scalar>(path: &Path, source_id: &str) -> Result<ImageTensor<T>> {
    let img = decode_rgb(path)?;
    if img.width() == 0 || img.height() == 0 {
        return Err(PreprocessError::ZeroDimensionInput {
            height: img.height() as usize,
            width: img.width() as usize,
        });
    }
    Ok(ImageTensor::from_rgb8(&img, source_id))
}

/// Source coordinate and blend weight for half-pixel-centred bilinear sampling.
fn sample_axis(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of a single plane (no corner alignment, edges clamped).
pub fn bilinear_plane<T: Scalar>(plane: ArrayView2<'_, T>, target: (usize, usize)) -> Array2<T> {
    let (h, w) = plane.dim();
    let rows = sample_axis(target.0, h);
    let cols = sample_axis(target.1, w);
    Array2::from_shape_fn(target, |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        let one = T::one();
        let top = plane[[y0, x0]] * (one - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (one - fx) + plane[[y1, x1]] * fx;
        top * (one - fy) + bottom * fy
    })
}

/// Stretches every channel to `target` (height, width); aspect ratio is not kept.
pub fn resize<T: Scalar>(img: &ImageTensor<T>, target: (usize, usize)) -> Result<ImageTensor<T>> {
    img.expect_space(PixelSpace::RawPixels)?;
    let (c, h, w) = img.data.dim();
    if h == 0 || w == 0 || target.0 == 0 || target.1 == 0 {
        return Err(PreprocessError::ZeroDimensionInput { height: h, width: w });
    }
    if (h, w) == target {
        return Ok(img.clone());
    }
    let mut data = Array3::<T>::zeros((c, target.0, target.1));
    for ch in 0..c {
        data.index_axis_mut(Axis(0), ch)
            .assign(&bilinear_plane(img.data.index_axis(Axis(0), ch), target));
    }
    Ok(ImageTensor {
        data,
        space: PixelSpace::RawPixels,
        source_id: img.source_id.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Separate statistics per RGB channel.
    #[default]
    PerChannel,
    /// One mean/std pooled over all channels, replicated into each slot.
    Scalar,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    /// Fitted on the training split.
    #[default]
    Dataset,
    /// Fixed statistics of the ImageNet pretraining corpus.
    Imagenet,
}

/// Mean and population standard deviation per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Number of pixel values per channel the statistics were computed over.
    pub n: u64,
}

impl NormStats {
    pub fn imagenet() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            n: 0,
        }
    }
}

/// Streaming per-channel moments (count, mean, sum of squared deviations)
/// that merge exactly with Chan's update, so shard results can be reduced in
/// any fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormAccumulator {
    count: u64,
    mean: [f64; 3],
    m2: [f64; 3],
}

impl NormAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push<T: Scalar>(&mut self, img: &ImageTensor<T>) -> Result<()> {
        img.expect_space(PixelSpace::RawPixels)?;
        let (c, h, w) = img.data.dim();
        if c != 3 {
            return Err(PreprocessError::ChannelCount(c));
        }
        let n = (h * w) as u64;
        if n == 0 {
            return Ok(());
        }
        let mut part = NormAccumulator {
            count: n,
            ..Default::default()
        };
        for ch in 0..3 {
            let plane = img.data.index_axis(Axis(0), ch);
            let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            part.mean[ch] = mean;
            part.m2[ch] = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum();
        }
        self.merge(&part);
        Ok(())
    }

    pub fn merge(&mut self, other: &NormAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        for ch in 0..3 {
            let delta = other.mean[ch] - self.mean[ch];
            self.mean[ch] += delta * nb / total;
            self.m2[ch] += other.m2[ch] + delta * delta * na * nb / total;
        }
        self.count += other.count;
    }

    pub fn finish(&self, mode: NormMode) -> Result<NormStats> {
        if self.count == 0 {
            return Err(PreprocessError::EmptyStream);
        }
        let n = self.count as f64;
        match mode {
            NormMode::PerChannel => Ok(NormStats {
                mean: self.mean,
                std: [0, 1, 2].map(|c| (self.m2[c] / n).sqrt()),
                n: self.count,
            }),
            NormMode::Scalar => {
                // pool the three channels as one population of 3n values
                let mean = self.mean.iter().sum::<f64>() / 3.0;
                let m2: f64 = (0..3)
                    .map(|c| self.m2[c] + n * (self.mean[c] - mean).powi(2))
                    .sum();
                let std = (m2 / (3.0 * n)).sqrt();
                Ok(NormStats {
                    mean: [mean; 3],
                    std: [std; 3],
                    n: self.count * 3,
                })
            }
        }
    }
}

/// Fits statistics over every pixel of every image in the stream.
pub fn fit_norm_stats<T: Scalar, I>(images: I, mode: NormMode) -> Result<NormStats>
where
    I: IntoIterator<Item = ImageTensor<T>>,
{
    let mut acc = NormAccumulator::new();
    for img in images {
        acc.push(&img)?;
    }
    acc.finish(mode)
}

/// Parallel variant: shards are accumulated independently and merged in shard
/// order, so the result does not depend on scheduling.
pub fn fit_norm_stats_sharded<T, F>(count: usize, shard_size: usize, load: F, mode: NormMode) -> Result<NormStats>
where
    T: Scalar,
    F: Fn(usize) -> Result<ImageTensor<T>> + Sync,
{
    let shard_size = shard_size.max(1);
    let shards: Vec<Result<NormAccumulator>> = (0..count.div_ceil(shard_size))
        .into_par_iter()
        .map(|s| {
            let mut acc = NormAccumulator::new();
            for i in s * shard_size..((s + 1) * shard_size).min(count) {
                acc.push(&load(i)?)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = NormAccumulator::new();
    for shard in shards {
        total.merge(&shard?);
    }
    total.finish(mode)
}

pub fn apply_norm<T: Scalar>(img: &ImageTensor<T>, stats: &NormStats) -> Result<ImageTensor<T>> {
    img.expect_space(PixelSpace::RawPixels)?;
    let mut data = img.data.clone();
    for (c, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
        let mean = T::lit(stats.mean[c]);
        let denom = T::lit(stats.std[c] + NORM_EPSILON);
        plane.mapv_inplace(|v| (v - mean) / denom);
    }
    Ok(ImageTensor {
        data,
        space: PixelSpace::Normalized,
        source_id: img.source_id.clone(),
    })
}

/// Decode → resize → normalize, the exact path used for training, evaluation and serving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub size: usize,
    pub stats: NormStats,
}

impl Preprocessor {
    pub fn new(size: usize, stats: NormStats) -> Self {
        Self { size, stats }
    }

    pub fn raw_resized<T: Scalar>(&self, path: &Path, id: &str) -> Result<ImageTensor<T>> {
        resize(&load_raw(path, id)?, (self.size, self.size))
    }

    pub fn load<T: Scalar>(&self, path: &Path, id: &str) -> Result<ImageTensor<T>> {
        apply_norm(&self.raw_resized(path, id)?, &self.stats)
    }

    pub fn raw_from_rgb<T: Scalar>(&self, img: &RgbImage, id: &str) -> Result<ImageTensor<T>> {
        if img.width() == 0 || img.height() == 0 {
            return Err(PreprocessError::ZeroDimensionInput {
                height: img.height() as usize,
                width: img.width() as usize,
            });
        }
        resize(&ImageTensor::from_rgb8(img, id), (self.size, self.size))
    }

    pub fn from_rgb<T: Scalar>(&self, img: &RgbImage, id: &str) -> Result<ImageTensor<T>> {
        apply_norm(&self.raw_from_rgb(img, id)?, &self.stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn raw(data: Array3<f64>) -> ImageTensor<f64> {
        ImageTensor::raw(data, "t").unwrap()
    }

    #[test]
    fn identity_resize() {
        let data = Array::from_iter((0..3 * 5 * 4).map(|i| (i % 7) as f64 / 7.0))
            .into_shape_with_order((3, 5, 4))
            .unwrap();
        let img = raw(data.clone());
        assert_eq!(resize(&img, (5, 4)).unwrap().data, data);
    }

    #[test]
    fn constant_field_stays_constant() {
        let img = raw(Array3::from_elem((3, 448, 448), 0.3));
        let out = resize(&img, (224, 224)).unwrap();
        assert_eq!(out.data.dim(), (3, 224, 224));
        assert!(out.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_upsample_centre() {
        // weights worked out by hand: source coords 0, .25, .75, 1 (clamped) per axis
        let mut data = Array3::zeros((3, 2, 2));
        for c in 0..3 {
            data[[c, 0, 1]] = 1.0;
            data[[c, 1, 0]] = 1.0;
        }
        let out = resize(&raw(data), (4, 4)).unwrap();
        let centre = [[0.375, 0.625], [0.625, 0.375]];
        for c in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let v = out.data[[c, i + 1, j + 1]];
                    assert!(v > 0.0 && v < 1.0);
                    assert!((v - centre[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let img = raw(Array3::zeros((3, 0, 4)));
        assert!(matches!(resize(&img, (2, 2)), Err(PreprocessError::ZeroDimensionInput { .. })));
    }

    #[test]
    fn resize_requires_raw_space() {
        let mut img = raw(Array3::zeros((3, 2, 2)));
        img.space = PixelSpace::Normalized;
        assert!(matches!(resize(&img, (4, 4)), Err(PreprocessError::WrongSpace { .. })));
    }

    #[test]
    fn stats_of_small_channel() {
        // values {1,2,3,2}: mean 2, population variance 0.5
        let mut data = Array3::zeros((3, 2, 2));
        for (k, v) in [1.0, 2.0, 3.0, 2.0].into_iter().enumerate() {
            data[[0, k / 2, k % 2]] = v;
            data[[1, k / 2, k % 2]] = 5.0;
        }
        let stats = fit_norm_stats([raw(data.clone())], NormMode::PerChannel).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-15);
        assert!((stats.std[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(stats.std[1], 0.0);
        assert_eq!(stats.n, 4);

        let twice = fit_norm_stats([raw(data.clone()), raw(data.clone())], NormMode::PerChannel).unwrap();
        assert!((twice.mean[0] - stats.mean[0]).abs() < 1e-15);
        assert!((twice.std[0] - stats.std[0]).abs() < 1e-15);

        let z = apply_norm(&raw(data), &stats).unwrap();
        assert_eq!(z.space, PixelSpace::Normalized);
        // x = 3 → (3 - 2) / (sqrt(0.5) + eps)
        assert!((z.data[[0, 1, 0]] - 1.41421).abs() < 1e-5);
        // zero-variance channel at its mean maps to exactly zero
        assert_eq!(z.data[[1, 0, 0]], 0.0);
        assert!(z.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_stream_is_an_error() {
        let none: Vec<ImageTensor<f32>> = Vec::new();
        assert!(matches!(fit_norm_stats(none, NormMode::PerChannel), Err(PreprocessError::EmptyStream)));
    }

    #[test]
    fn scalar_mode_pools_channels() {
        let mut data = Array3::zeros((3, 1, 2));
        data[[0, 0, 0]] = 1.0;
        data[[1, 0, 1]] = 1.0;
        // six values: two ones, four zeros
        let stats = fit_norm_stats([raw(data)], NormMode::Scalar).unwrap();
        let mean = 2.0 / 6.0;
        let var = (2.0 * (1.0 - mean) * (1.0f64 - mean) + 4.0 * mean * mean) / 6.0;
        assert!(stats.mean.iter().all(|m| (m - mean).abs() < 1e-15));
        assert!(stats.std.iter().all(|s| (s - var.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn sharded_fit_is_order_stable() {
        let imgs: Vec<_> = (0..7)
            .map(|k| {
                raw(Array::from_iter((0..3 * 4 * 3).map(|i| ((i * (k + 3)) % 11) as f64 / 11.0))
                    .into_shape_with_order((3, 4, 3))
                    .unwrap())
            })
            .collect();
        let serial = fit_norm_stats(imgs.clone(), NormMode::PerChannel).unwrap();
        for shard in [1, 2, 3, 7] {
            let par = fit_norm_stats_sharded(imgs.len(), shard, |i| Ok(imgs[i].clone()), NormMode::PerChannel).unwrap();
            for c in 0..3 {
                assert!((par.mean[c] - serial.mean[c]).abs() < 1e-14);
                assert!((par.std[c] - serial.std[c]).abs() < 1e-14);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normalised_training_set_is_standard(
            seeds in proptest::collection::vec((1usize..12, 1usize..12, proptest::prelude::any::<u64>()), 2..8),
        ) {
            use rand::{Rng, SeedableRng};
            let imgs: Vec<_> = seeds
                .iter()
                .map(|&(h, w, s)| {
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
                    raw(Array3::from_shape_fn((3, h, w), |(c, _, _)| 0.2 * c as f64 + 0.5 * rng.random::<f64>()))
                })
                .collect();
            let stats = fit_norm_stats(imgs.clone(), NormMode::PerChannel).unwrap();
            for c in 0..3 {
                let vals: Vec<f64> = imgs
                    .iter()
                    .flat_map(|i| apply_norm(i, &stats).unwrap().data.index_axis(Axis(0), c).iter().copied().collect::<Vec<_>>())
                    .collect();
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                proptest::prop_assert!(m.abs() < 1e-9);
                let expected = stats.std[c] / (stats.std[c] + NORM_EPSILON);
                proptest::prop_assert!((sd - expected).abs() < 1e-6);
            }
        }
    }
}
