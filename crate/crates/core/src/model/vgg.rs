use crate::nn::{AdaptiveAvgPool2d, Conv2d, Layer, MaxPool2d, Named};
use crate::Scalar;

use super::{LayerTag, Unit};

const CFG: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];

/// VGG16 feature extractor with torchvision tensor names. Each convolution
/// (with its ReLU) is a capture unit named `conv{block}_{index}`.
pub(super) fn vgg16_units<T: Scalar>() -> (Vec<Unit<T>>, usize, Vec<(LayerTag, String)>) {
    let mut units = Vec::new();
    let mut idx = 0;
    let mut in_ch = 3;
    for (b, widths) in CFG.iter().enumerate() {
        let block = b + 1;
        for (j, &out) in widths.iter().enumerate() {
            let conv = Named::new(format!("features.{idx}"), Layer::Conv(Conv2d::zeros(in_ch, out, 3, 1, 1, true)));
            let relu = Named::new(format!("features.{}", idx + 1), Layer::Relu);
            units.push(Unit::new(format!("conv{block}_{}", j + 1), block, vec![conv, relu], true));
            idx += 2;
            in_ch = out;
        }
        let pool = Named::new(format!("features.{idx}"), Layer::MaxPool(MaxPool2d::new(2, 2, 0)));
        units.push(Unit::new(format!("pool{block}"), block, vec![pool], false));
        idx += 1;
    }
    units.push(Unit::new(
        "avgpool",
        5,
        vec![Named::new("avgpool", Layer::AdaptiveAvgPool(AdaptiveAvgPool2d::new(7, 7)))],
        false,
    ));
    let tags = vec![
        (LayerTag::Shallow, "conv2_2".to_string()),
        (LayerTag::Middle, "conv4_3".to_string()),
        (LayerTag::Deep, "conv5_3".to_string()),
    ];
    (units, 512 * 7 * 7, tags)
}
