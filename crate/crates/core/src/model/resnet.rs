use crate::nn::{AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Layer, MaxPool2d, Named, Residual};
use crate::Scalar;

use super::{LayerTag, Unit};

const EXPANSION: usize = 4;
const STAGES: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];

fn conv<T: Scalar>(name: &str, in_ch: usize, out: usize, k: usize, stride: usize) -> Named<T> {
    Named::new(name, Layer::Conv(Conv2d::zeros(in_ch, out, k, stride, k / 2, false)))
}

fn bn<T: Scalar>(name: &str, ch: usize) -> Named<T> {
    Named::new(name, Layer::BatchNorm(BatchNorm2d::new(ch)))
}

fn bottleneck<T: Scalar>(in_ch: usize, width: usize, stride: usize) -> Residual<T> {
    let out = width * EXPANSION;
    let main = vec![
        conv("conv1", in_ch, width, 1, 1),
        bn("bn1", width),
        Named::new("relu1", Layer::Relu),
        conv("conv2", width, width, 3, stride),
        bn("bn2", width),
        Named::new("relu2", Layer::Relu),
        conv("conv3", width, out, 1, 1),
        bn("bn3", out),
    ];
    let shortcut = if stride != 1 || in_ch != out {
        vec![conv("downsample.0", in_ch, out, 1, stride), bn("downsample.1", out)]
    } else {
        Vec::new()
    };
    Residual { main, shortcut }
}

/// ResNet50 (stride on the 3×3 convolution) with torchvision tensor names.
/// Every bottleneck block output is a capture unit named `layer{s}.{b}`.
pub(super) fn resnet50_units<T: Scalar>() -> (Vec<Unit<T>>, usize, Vec<(LayerTag, String)>) {
    let mut units = vec![
        Unit::new(
            "stem",
            1,
            vec![conv("conv1", 3, 64, 7, 2), bn("bn1", 64), Named::new("relu", Layer::Relu)],
            true,
        ),
        Unit::new("maxpool", 1, vec![Named::new("maxpool", Layer::MaxPool(MaxPool2d::new(3, 2, 1)))], false),
    ];
    let mut in_ch = 64;
    let mut tags = Vec::new();
    for (s, &(width, blocks, stride)) in STAGES.iter().enumerate() {
        for b in 0..blocks {
            let name = format!("layer{}.{b}", s + 1);
            let block = bottleneck(in_ch, width, if b == 0 { stride } else { 1 });
            in_ch = width * EXPANSION;
            units.push(Unit::new(name.clone(), s + 2, vec![Named::new(name, Layer::Residual(Box::new(block)))], true));
        }
        let last = format!("layer{}.{}", s + 1, blocks - 1);
        match s {
            1 => tags.push((LayerTag::Shallow, last)),
            2 => tags.push((LayerTag::Middle, last)),
            3 => tags.push((LayerTag::Deep, last)),
            _ => {}
        }
    }
    units.push(Unit::new(
        "avgpool",
        5,
        vec![Named::new("avgpool", Layer::AdaptiveAvgPool(AdaptiveAvgPool2d::new(1, 1)))],
        false,
    ));
    (units, in_ch, tags)
}
