//! Backbone + replacement classifier head, with named capture points for
//! activation/gradient extraction.

mod checkpoint;
mod resnet;
mod vgg;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, CheckpointMeta, LoadedCheckpoint};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcam::LayerActivations;
use crate::nn::{self, Cache, Dropout, Layer, Linear, Named};
use crate::Scalar;

/// Width of the first fully-connected layer of the head.
pub const HEAD_HIDDEN: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const NUM_CLASSES: usize = 2;
/// Environment variable naming the pretrained-weight cache directory.
pub const CACHE_ENV: &str = "TIGER_TRIAGE_CACHE";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("pretrained weights unavailable: {0}")]
    WeightsUnavailable(String),
    #[error("unknown backbone family `{0}`")]
    UnknownFamily(String),
    #[error("input shape mismatch: expected {expected}, got {got:?}")]
    ShapeMismatch { expected: String, got: Vec<usize> },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("class index {0} out of range")]
    InvalidClass(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneFamily {
    Vgg16,
    Resnet50,
}

impl BackboneFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneFamily::Vgg16 => "vgg16",
            BackboneFamily::Resnet50 => "resnet50",
        }
    }
}

impl FromStr for BackboneFamily {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vgg16" => Ok(BackboneFamily::Vgg16),
            "resnet50" => Ok(BackboneFamily::Resnet50),
            other => Err(ModelError::UnknownFamily(other.to_string())),
        }
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which backbone parameters receive updates. Blocks are numbered from 1:
/// VGG16 blocks are the five conv groups; ResNet50 block 1 is the stem and
/// blocks 2..=5 are `layer1`..`layer4`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    FeaturesOnly,
    UpToBlock(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub freeze_policy: FreezePolicy,
}

impl BackboneSpec {
    pub fn new(family: BackboneFamily) -> Self {
        Self {
            family,
            pretrained: false,
            freeze_policy: FreezePolicy::None,
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::new(BackboneFamily::Vgg16)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    Shallow,
    Middle,
    Deep,
}

impl LayerTag {
    pub const ALL: [LayerTag; 3] = [LayerTag::Shallow, LayerTag::Middle, LayerTag::Deep];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Shallow => "shallow",
            LayerTag::Middle => "middle",
            LayerTag::Deep => "deep",
        }
    }
}

impl FromStr for LayerTag {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shallow" => Ok(LayerTag::Shallow),
            "middle" => Ok(LayerTag::Middle),
            "deep" => Ok(LayerTag::Deep),
            other => Err(ModelError::UnknownLayer(other.to_string())),
        }
    }
}

/// Which class score the captured gradient is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSelector {
    /// Argmax of the predicted probabilities, ties to the lower index.
    #[default]
    Predicted,
    Index(usize),
}

/// Differentiate the pre-softmax score (default) or the softmax probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientTarget {
    #[default]
    Score,
    Probability,
}

/// A contiguous piece of the backbone whose output can be captured.
#[derive(Clone, Debug)]
pub struct Unit<T> {
    pub name: String,
    /// Freeze-policy block number.
    pub block: usize,
    pub layers: Vec<Named<T>>,
    /// Output is a convolutional activation map that may be captured.
    pub capturable: bool,
}

impl<T> Unit<T> {
    pub fn new(name: impl Into<String>, block: usize, layers: Vec<Named<T>>, capturable: bool) -> Self {
        Self {
            name: name.into(),
            block,
            layers,
            capturable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturePoint {
    pub name: String,
    pub tag: Option<LayerTag>,
}

/// fully-connected → ReLU → dropout → fully-connected. Softmax is applied on top.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub dropout: Dropout,
}

impl<T: Scalar> Head<T> {
    /// Uniform(±1/√fan_in) weights, zero biases.
    pub fn init(in_features: usize, hidden: usize, dropout_p: f64, rng: &mut impl Rng) -> Self {
        let linear = |fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(dist.sample(rng)));
            Linear::new(w, Array1::zeros(fan_out))
        };
        let fc1 = linear(in_features, hidden, rng);
        let fc2 = linear(hidden, NUM_CLASSES, rng);
        Self {
            fc1,
            fc2,
            dropout: Dropout { p: dropout_p },
        }
    }

    fn forward(&self, x: Array2<T>, dropout_rng: Option<&mut dyn rand::RngCore>, record: bool) -> (Array2<T>, Option<HeadCache<T>>) {
        let a1 = self.fc1.forward(&x).mapv_into(|v| if v > T::zero() { v } else { T::zero() });
        let mask = dropout_rng.map(|rng| self.dropout.mask::<T, _>(a1.dim(), rng));
        let d1 = match &mask {
            Some(m) => &a1 * m,
            None => a1.clone(),
        };
        let z2 = self.fc2.forward(&d1);
        let cache = record.then(|| HeadCache { x, a1, mask, d1 });
        (z2, cache)
    }

    fn backward(&self, cache: &HeadCache<T>, dz2: &Array2<T>, need_dx: bool, grads: Option<&mut [ArrayD<T>]>) -> Option<Array2<T>> {
        let (g1, g2) = match grads {
            Some(g) => {
                let (a, b) = g.split_at_mut(2);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let mut dd1 = self
            .fc2
            .backward(&cache.d1, dz2, true, g2.map(linear_grads))
            .expect("dx requested");
        if let Some(m) = &cache.mask {
            dd1 *= m;
        }
        dd1.zip_mut_with(&cache.a1, |d, &a| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
        self.fc1.backward(&cache.x, &dd1, need_dx, g1.map(linear_grads))
    }

    fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![
            self.fc1.weight.view().into_dyn(),
            self.fc1.bias.view().into_dyn(),
            self.fc2.weight.view().into_dyn(),
            self.fc2.bias.view().into_dyn(),
        ]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![
            self.fc1.weight.view_mut().into_dyn(),
            self.fc1.bias.view_mut().into_dyn(),
            self.fc2.weight.view_mut().into_dyn(),
            self.fc2.bias.view_mut().into_dyn(),
        ]
    }

    const NAMES: [&'static str; 4] = ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"];
}

fn linear_grads<T: Scalar>(g: &mut [ArrayD<T>]) -> (ndarray::ArrayViewMut2<'_, T>, ndarray::ArrayViewMut1<'_, T>) {
    let (w, b) = g.split_at_mut(1);
    (
        w[0].view_mut().into_dimensionality::<Ix2>().expect("2-d"),
        b[0].view_mut().into_dimensionality().expect("1-d"),
    )
}

#[derive(Clone, Debug)]
struct HeadCache<T> {
    x: Array2<T>,
    a1: Array2<T>,
    mask: Option<Array2<T>>,
    d1: Array2<T>,
}

/// Values recorded by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    start: usize,
    units: Vec<Vec<Cache<T>>>,
    feature_dim: (usize, usize, usize, usize),
    head: HeadCache<T>,
}

/// One gradient buffer per parameter tensor, `None` for frozen ones.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub tensors: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adds `other` into `self` slot by slot.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => *a += b,
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierNet<T> {
    /// `None` for hand-assembled networks.
    pub spec: Option<BackboneSpec>,
    pub units: Vec<Unit<T>>,
    pub head: Head<T>,
    tags: Vec<(LayerTag, String)>,
    /// Units before this index are frozen.
    frozen_units: usize,
}

fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Kaiming-normal (fan-out, ReLU gain) convolution weights, zero biases.
pub(crate) fn init_backbone<T: Scalar>(units: &mut [Unit<T>], rng: &mut ChaCha8Rng) {
    fn visit<T: Scalar>(layer: &mut Layer<T>, rng: &mut ChaCha8Rng) {
        match layer {
            Layer::Conv(conv) => {
                let (out, _, k, _) = conv.weight.dim();
                let std = (2.0 / (out * k * k) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                conv.weight.mapv_inplace(|_| T::lit(dist.sample(rng)));
                if let Some(b) = &mut conv.bias {
                    b.fill(T::zero());
                }
            }
            Layer::Residual(block) => {
                for n in block.main.iter_mut().chain(block.shortcut.iter_mut()) {
                    visit(&mut n.layer, rng);
                }
            }
            _ => {}
        }
    }
    for unit in units {
        for n in &mut unit.layers {
            visit(&mut n.layer, rng);
        }
    }
}

/// Directory searched for `<family>.safetensors` pretrained backbones.
pub fn weight_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
            home.join(".cache").join("tiger-triage")
        })
}

/// Builds a network; pretrained backbones are read from [`weight_cache_dir`].
pub fn build<T: Scalar>(spec: BackboneSpec, dropout_p: f64, seed: u64) -> Result<ClassifierNet<T>> {
    build_with_cache(spec, dropout_p, seed, &weight_cache_dir())
}

pub fn build_with_cache<T: Scalar>(
    spec: BackboneSpec,
    dropout_p: f64,
    seed: u64,
    cache_dir: &Path,
) -> Result<ClassifierNet<T>> {
    let mut net = build_untrained(spec, dropout_p, seed);
    if spec.pretrained {
        let path = cache_dir.join(format!("{}.safetensors", spec.family));
        if !path.is_file() {
            return Err(ModelError::WeightsUnavailable(format!("{} not found", path.display())));
        }
        net.load_backbone_weights(&path)?;
    }
    Ok(net)
}

/// Architecture with seeded random weights; never touches the disk.
pub fn build_untrained<T: Scalar>(spec: BackboneSpec, dropout_p: f64, seed: u64) -> ClassifierNet<T> {
    let (mut units, feature_width, tags) = match spec.family {
        BackboneFamily::Vgg16 => vgg::vgg16_units(),
        BackboneFamily::Resnet50 => resnet::resnet50_units(),
    };
    // independent streams so head weights do not depend on the backbone
    init_backbone(&mut units, &mut derive_rng(seed, 1));
    let head = Head::init(feature_width, HEAD_HIDDEN, dropout_p, &mut derive_rng(seed, 2));
    let mut net = ClassifierNet::from_parts(units, head, tags).expect("built-in tags are valid");
    net.spec = Some(spec);
    net.set_freeze_policy(spec.freeze_policy);
    net
}

impl<T: Scalar> ClassifierNet<T> {
    /// Assembles a network from parts. Every tag must name a capturable unit and
    /// exactly one unit must be tagged deep.
    pub fn from_parts(units: Vec<Unit<T>>, head: Head<T>, tags: Vec<(LayerTag, String)>) -> Result<Self> {
        for (_, name) in &tags {
            if !units.iter().any(|u| u.capturable && &u.name == name) {
                return Err(ModelError::UnknownLayer(name.clone()));
            }
        }
        if tags.iter().filter(|(t, _)| *t == LayerTag::Deep).count() != 1 {
            return Err(ModelError::UnknownLayer("exactly one deep tag required".into()));
        }
        Ok(Self {
            spec: None,
            units,
            head,
            tags,
            frozen_units: 0,
        })
    }

    pub fn family(&self) -> Option<BackboneFamily> {
        self.spec.map(|s| s.family)
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        self.frozen_units = match policy {
            FreezePolicy::None => 0,
            FreezePolicy::FeaturesOnly => self.units.len(),
            FreezePolicy::UpToBlock(n) => self.units.iter().take_while(|u| u.block <= n).count(),
        };
        if let Some(spec) = &mut self.spec {
            spec.freeze_policy = policy;
        }
    }

    /// True when only the head is trained, so backbone features can be cached.
    pub fn backbone_frozen(&self) -> bool {
        self.frozen_units == self.units.len()
    }

    pub fn dropout_p(&self) -> f64 {
        self.head.dropout.p
    }

    /// Capture points in network order.
    pub fn named_layers(&self) -> Vec<CapturePoint> {
        self.units
            .iter()
            .filter(|u| u.capturable)
            .map(|u| CapturePoint {
                name: u.name.clone(),
                tag: self.tags.iter().find(|(_, n)| n == &u.name).map(|(t, _)| *t),
            })
            .collect()
    }

    pub fn layer_for_tag(&self, tag: LayerTag) -> Option<&str> {
        self.tags.iter().find(|(t, _)| *t == tag).map(|(_, n)| n.as_str())
    }

    /// Accepts either a capture-point name or a tag (`shallow`, `middle`, `deep`).
    pub fn resolve_layer(&self, layer: &str) -> Result<usize> {
        let name = match layer.parse::<LayerTag>() {
            Ok(tag) => self
                .layer_for_tag(tag)
                .ok_or_else(|| ModelError::UnknownLayer(layer.to_string()))?,
            Err(_) => layer,
        };
        self.units
            .iter()
            .position(|u| u.capturable && u.name == name)
            .ok_or_else(|| ModelError::UnknownLayer(layer.to_string()))
    }

    pub fn conv_layer_count(&self) -> usize {
        self.units
            .iter()
            .flat_map(|u| &u.layers)
            .map(|n| n.layer.conv_count())
            .sum()
    }

    /// Activation shape (C, H, W) at the output of unit `index` for a given input.
    pub fn unit_output_shape(&self, index: usize, input: (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        let mut shape = input;
        for u in &self.units[..=index] {
            shape = nn::seq_output_shape(&u.layers, shape)?;
        }
        Some(shape)
    }

    fn check_input(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (n, c, h, w) = dim;
        let feature = self
            .unit_output_shape(self.units.len() - 1, (c, h, w))
            .map(|(c, h, w)| c * h * w);
        if n == 0 || feature != Some(self.head.fc1.in_features()) {
            return Err(ModelError::ShapeMismatch {
                expected: "N×3×H×W with N ≥ 1 and H, W large enough for the backbone".into(),
                got: vec![n, c, h, w],
            });
        }
        Ok(())
    }

    /// Total number of scalar parameters (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut v: Vec<_> = self
            .units
            .iter()
            .flat_map(|u| &u.layers)
            .flat_map(|n| n.layer.params())
            .collect();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v: Vec<_> = self
            .units
            .iter_mut()
            .flat_map(|u| u.layers.iter_mut())
            .flat_map(|n| n.layer.params_mut())
            .collect();
        v.extend(self.head.params_mut());
        v
    }

    /// Which entries of [`ClassifierNet::params`] are updated by training.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            let count: usize = u.layers.iter().map(|n| n.layer.param_count()).sum();
            mask.extend(std::iter::repeat_n(i >= self.frozen_units, count));
        }
        mask.extend([true; 4]);
        mask
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for n in self.units.iter().flat_map(|u| &u.layers) {
            n.layer.named_tensors(&n.name, &mut out);
        }
        for (name, p) in Head::<T>::NAMES.iter().zip(self.head.params()) {
            out.push((name.to_string(), p));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for n in self.units.iter_mut().flat_map(|u| u.layers.iter_mut()) {
            n.layer.named_tensors_mut(&n.name.clone(), &mut out);
        }
        for (name, p) in Head::<T>::NAMES.iter().zip(self.head.params_mut()) {
            out.push((name.to_string(), p));
        }
        out
    }

    fn flatten(x: Array4<T>) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let x = x.as_standard_layout().into_owned();
        x.into_shape_with_order((n, c * h * w)).expect("standard layout")
    }

    fn run_units(&self, range: std::ops::Range<usize>, mut x: Array4<T>) -> Array4<T> {
        for u in &self.units[range] {
            x = nn::seq_forward(&u.layers, x, false, false).0;
        }
        x
    }

    /// Evaluation-mode backbone output, flattened to (N, features).
    pub fn features(&self, x: &Array4<T>) -> Result<Array2<T>> {
        self.check_input(x.dim())?;
        Ok(Self::flatten(self.run_units(0..self.units.len(), x.to_owned())))
    }

    /// Evaluation-mode head on precomputed features.
    pub fn head_logits(&self, features: Array2<T>) -> Array2<T> {
        self.head.forward(features, None, false).0
    }

    /// Evaluation-mode pre-softmax scores, shape (N, 2).
    pub fn logits(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.head_logits(self.features(x)?))
    }

    /// Evaluation-mode class probabilities, shape (N, 2); dropout is off.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(nn::softmax(&self.logits(x)?))
    }

    /// Training-mode pass from images. Frozen units run in evaluation mode and
    /// are not recorded.
    pub fn forward_train(&self, x: Array4<T>, dropout_rng: &mut dyn rand::RngCore) -> Result<(Array2<T>, Tape<T>)> {
        self.check_input(x.dim())?;
        let start = self.frozen_units;
        let mut x = self.run_units(0..start, x);
        let mut units = Vec::with_capacity(self.units.len() - start);
        for u in &self.units[start..] {
            let (y, caches) = nn::seq_forward(&u.layers, x, true, true);
            units.push(caches);
            x = y;
        }
        let feature_dim = x.dim();
        let (logits, head) = self.head.forward(Self::flatten(x), Some(dropout_rng), true);
        Ok((
            logits,
            Tape {
                start,
                units,
                feature_dim,
                head: head.expect("recorded"),
            },
        ))
    }

    /// Training-mode pass of the head alone on cached backbone features.
    pub fn forward_train_head(&self, features: Array2<T>, dropout_rng: &mut dyn rand::RngCore) -> (Array2<T>, Tape<T>) {
        let (n, f) = features.dim();
        let (logits, head) = self.head.forward(features, Some(dropout_rng), true);
        (
            logits,
            Tape {
                start: self.units.len(),
                units: Vec::new(),
                feature_dim: (n, f, 1, 1),
                head: head.expect("recorded"),
            },
        )
    }

    /// Parameter gradients of `sum(dlogits ⊙ logits)` for every recorded, trainable tensor.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &Array2<T>) -> Gradients<T> {
        let mask = self.trainable_mask();
        let mut grads: Vec<ArrayD<T>> = self.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let unit_offsets: Vec<usize> = self
            .units
            .iter()
            .scan(0, |acc, u| {
                let start = *acc;
                *acc += u.layers.iter().map(|n| n.layer.param_count()).sum::<usize>();
                Some(start)
            })
            .collect();
        let head_offset = grads.len() - 4;

        let need_backbone = !tape.units.is_empty();
        let dfeat = self
            .head
            .backward(&tape.head, dlogits, need_backbone, Some(&mut grads[head_offset..]));
        if let Some(dfeat) = dfeat {
            let mut dy = dfeat
                .into_shape_with_order(tape.feature_dim)
                .expect("feature shape recorded");
            for (k, caches) in tape.units.iter().enumerate().rev() {
                let idx = tape.start + k;
                let unit = &self.units[idx];
                let count: usize = unit.layers.iter().map(|n| n.layer.param_count()).sum();
                let offset = unit_offsets[idx];
                let need_dx = k > 0;
                match nn::seq_backward(&unit.layers, caches, dy, need_dx, Some(&mut grads[offset..offset + count])) {
                    Some(d) => dy = d,
                    None => break,
                }
            }
        }
        Gradients {
            tensors: grads
                .into_iter()
                .zip(mask)
                .map(|(g, m)| m.then_some(g))
                .collect(),
        }
    }

    /// Folds batch-norm batch statistics from a training pass into the running estimates.
    pub fn commit_batch_stats(&mut self, tape: &Tape<T>) {
        for (k, caches) in tape.units.iter().enumerate() {
            nn::seq_update_running_stats(&mut self.units[tape.start + k].layers, caches);
        }
    }

    /// Evaluation-mode scores from the activation map at `layer` onward.
    pub fn tail_logits(&self, layer: &str, activations: &Array3<T>) -> Result<Array1<T>> {
        let idx = self.resolve_layer(layer)?;
        let x = activations.clone().insert_axis(Axis(0));
        let x = self.run_units(idx + 1..self.units.len(), x);
        Ok(self.head_logits(Self::flatten(x)).row(0).to_owned())
    }

    /// Activations at `layer` for a single image and the gradient of the
    /// selected class's score (or probability) with respect to them.
    pub fn forward_with_capture(
        &self,
        img: &Array4<T>,
        layer: &str,
        class: ClassSelector,
        target: GradientTarget,
    ) -> Result<LayerActivations<T>> {
        let (n, c, h, w) = img.dim();
        if n != 1 {
            return Err(ModelError::ShapeMismatch {
                expected: "a single image (1×3×H×W)".into(),
                got: vec![n, c, h, w],
            });
        }
        self.check_input(img.dim())?;
        let idx = self.resolve_layer(layer)?;
        let acts = self.run_units(0..idx + 1, img.to_owned());

        let mut x = acts.clone();
        let mut tail = Vec::new();
        for u in &self.units[idx + 1..] {
            let (y, caches) = nn::seq_forward(&u.layers, x, false, true);
            tail.push(caches);
            x = y;
        }
        let feature_dim = x.dim();
        let (logits, head_cache) = self.head.forward(Self::flatten(x), None, true);
        let probs = nn::softmax(&logits);
        let class_index = match class {
            ClassSelector::Predicted => nn::argmax(probs.row(0)),
            ClassSelector::Index(i) if i < NUM_CLASSES => i,
            ClassSelector::Index(i) => return Err(ModelError::InvalidClass(i)),
        };

        let mut dlogits = Array2::<T>::zeros((1, NUM_CLASSES));
        match target {
            GradientTarget::Score => dlogits[[0, class_index]] = T::one(),
            GradientTarget::Probability => {
                // d p_c / d z_j = p_c (δ_cj − p_j)
                let pc = probs[[0, class_index]];
                for j in 0..NUM_CLASSES {
                    let delta = if j == class_index { T::one() } else { T::zero() };
                    dlogits[[0, j]] = pc * (delta - probs[[0, j]]);
                }
            }
        }
        let dfeat = self
            .head
            .backward(&head_cache.expect("recorded"), &dlogits, true, None)
            .expect("dx requested");
        let mut dy = dfeat.into_shape_with_order(feature_dim).expect("feature shape");
        for (k, caches) in tail.iter().enumerate().rev() {
            dy = nn::seq_backward(&self.units[idx + 1 + k].layers, caches, dy, true, None).expect("dx requested");
        }

        Ok(LayerActivations {
            layer: self.units[idx].name.clone(),
            activations: acts.index_axis_move(Axis(0), 0),
            gradients: dy.index_axis_move(Axis(0), 0),
            class_index,
            logits: logits.row(0).to_vec(),
            probabilities: probs.row(0).to_vec(),
        })
    }

    /// Copies matching backbone tensors from a safetensors file (torchvision
    /// naming). Head tensors are left untouched.
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let file = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| ModelError::WeightsUnavailable(format!("{}: {e}", path.display())))?;
        let head_names = Head::<T>::NAMES;
        for (name, mut dst) in self.named_tensors_mut() {
            if head_names.contains(&name.as_str()) {
                continue;
            }
            let view = file
                .tensor(&name)
                .map_err(|_| ModelError::WeightsUnavailable(format!("{} lacks tensor {name}", path.display())))?;
            checkpoint::copy_tensor(&name, &view, &mut dst).map_err(ModelError::WeightsUnavailable)?;
        }
        Ok(())
    }
}
