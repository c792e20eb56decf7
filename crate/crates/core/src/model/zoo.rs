//! Built-in architectures.
//!
//! Full-size models follow the reference layer tables for 32x32 RGB inputs
//! (LeNet-style, MLP, simplified VGG8, ResNet-10/12/18). Every builder takes
//! the input shape and class count, so the same definitions serve EMNIST or
//! synthetic data. The `tiny` widths keep the same topology at desk scale.

use super::{ArchitectureSpec, LayerKind, LayerSpec};
use crate::error::{Error, Result};

fn dense(name: &str, inputs: usize, outputs: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Dense { inputs, outputs })
}

fn conv3(name: &str, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        },
    )
}

fn relu(name: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Relu)
}

fn image_dims(input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Architecture(format!(
            "convolutional models need [channels, h, w] input, got {input:?}"
        ))),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeNetWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl LeNetWidths {
    pub const FULL: Self = Self { conv1: 16, conv2: 32, fc1: 108, fc2: 64 };
    pub const TINY: Self = Self { conv1: 4, conv2: 8, fc1: 16, fc2: 12 };
}

pub fn lenet_style(input: &[usize], classes: usize, w: LeNetWidths) -> Result<ArchitectureSpec> {
    let (c, h, wd) = image_dims(input)?;
    let flat = w.conv2 * (h / 2 / 2) * (wd / 2 / 2);
    ArchitectureSpec::new(
        "lenet",
        input.to_vec(),
        classes,
        vec![
            conv3("conv1", c, w.conv1),
            relu("relu1"),
            LayerSpec::new("pool1", LayerKind::MaxPool),
            conv3("conv2", w.conv1, w.conv2),
            relu("relu2"),
            LayerSpec::new("pool2", LayerKind::MaxPool),
            LayerSpec::new("flatten", LayerKind::Flatten),
            dense("fc1", flat, w.fc1),
            relu("relu3"),
            dense("fc2", w.fc1, w.fc2),
            relu("relu4"),
            dense("fc3", w.fc2, classes),
        ],
    )
}

/// Flatten followed by dense layers with ReLU between them.
pub fn mlp(name: &str, input: &[usize], hidden: &[usize], classes: usize) -> Result<ArchitectureSpec> {
    let mut layers = vec![LayerSpec::new("flatten", LayerKind::Flatten)];
    let mut width: usize = input.iter().product();
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(dense(&format!("fc{}", i + 1), width, h));
        layers.push(relu(&format!("relu{}", i + 1)));
        width = h;
    }
    layers.push(dense(&format!("fc{}", hidden.len() + 1), width, classes));
    ArchitectureSpec::new(name, input.to_vec(), classes, layers)
}

#[derive(Debug, Clone, Copy)]
pub struct VggWidths {
    pub stage: [usize; 3],
    pub fc1: usize,
    pub fc2: usize,
}

impl VggWidths {
    /// The reference table prints Linear1 as 1024x180 but Linear2 as 108x64;
    /// 108 is used so the chain composes.
    pub const FULL: Self = Self { stage: [16, 32, 64], fc1: 108, fc2: 64 };
    pub const TINY: Self = Self { stage: [4, 8, 8], fc1: 12, fc2: 8 };
}

pub fn vgg8(input: &[usize], classes: usize, w: VggWidths) -> Result<ArchitectureSpec> {
    let (c, h, wd) = image_dims(input)?;
    let mut layers = Vec::new();
    let mut cin = c;
    let mut k = 1;
    for (s, &width) in w.stage.iter().enumerate() {
        for _ in 0..2 {
            layers.push(conv3(&format!("conv{k}"), cin, width));
            layers.push(relu(&format!("relu{k}")));
            cin = width;
            k += 1;
        }
        layers.push(LayerSpec::new(format!("pool{}", s + 1), LayerKind::MaxPool));
    }
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    let flat = cin * (h >> 3) * (wd >> 3);
    layers.push(dense("linear1", flat, w.fc1));
    layers.push(relu("relu_fc1"));
    layers.push(dense("linear2", w.fc1, w.fc2));
    layers.push(relu("relu_fc2"));
    layers.push(dense("linear3", w.fc2, classes));
    ArchitectureSpec::new("vgg8", input.to_vec(), classes, layers)
}

/// Residual-block multiplicities of the three stages.
pub const RESNET10_BLOCKS: [usize; 3] = [3, 3, 4];
pub const RESNET12_BLOCKS: [usize; 3] = [1, 5, 6];
pub const RESNET18_BLOCKS: [usize; 3] = [6, 6, 6];

/// Stem conv, three residual stages (the 2nd and 3rd downsample by 2),
/// global average pooling and a linear classifier.
pub fn resnet(
    name: &str,
    input: &[usize],
    classes: usize,
    blocks: [usize; 3],
    base_width: usize,
) -> Result<ArchitectureSpec> {
    let (c, h, wd) = image_dims(input)?;
    let widths = [base_width, base_width * 2, base_width * 4];
    let mut layers = vec![
        LayerSpec::new(
            "conv1",
            LayerKind::Conv2d {
                in_channels: c,
                out_channels: base_width,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
        ),
        LayerSpec::new("bn1", LayerKind::BatchNorm { channels: base_width }),
        relu("relu1"),
    ];
    let mut cin = base_width;
    let (mut oh, mut ow) = (h, wd);
    for (stage, (&count, &width)) in blocks.iter().zip(&widths).enumerate() {
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            if stride == 2 {
                oh = (oh - 1) / 2 + 1;
                ow = (ow - 1) / 2 + 1;
            }
            layers.push(LayerSpec::new(
                format!("conv{}_{}", stage + 2, b + 1),
                LayerKind::ResidualBlock {
                    in_channels: cin,
                    out_channels: width,
                    stride,
                },
            ));
            cin = width;
        }
    }
    layers.push(LayerSpec::new("avgpool", LayerKind::AvgPool { kernel: oh.min(ow) }));
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    layers.push(dense("fc", cin * (oh / oh.min(ow)) * (ow / oh.min(ow)), classes));
    ArchitectureSpec::new(name, input.to_vec(), classes, layers)
}

/// Look up a built-in architecture by name.
///
/// Names: `lenet`, `mlp`, `vgg8`, `resnet10`, `resnet12`, `resnet18`,
/// `tiny-mlp` (input-16-C), `tiny-cnn` (one 8-channel conv), and the
/// desk-scale `tiny-lenet`, `tiny-vgg8`, `tiny-resnet10`.
pub fn builtin(name: &str, input: &[usize], classes: usize) -> Result<ArchitectureSpec> {
    let mut arch = match name {
        "lenet" => lenet_style(input, classes, LeNetWidths::FULL),
        "mlp" => mlp("mlp", input, &[128, 64], classes),
        "vgg8" => vgg8(input, classes, VggWidths::FULL),
        "resnet10" => resnet("resnet10", input, classes, RESNET10_BLOCKS, 16),
        "resnet12" => resnet("resnet12", input, classes, RESNET12_BLOCKS, 16),
        "resnet18" => resnet("resnet18", input, classes, RESNET18_BLOCKS, 16),
        "tiny-mlp" => mlp("tiny-mlp", input, &[16], classes),
        "tiny-cnn" => {
            let (c, h, w) = image_dims(input)?;
            ArchitectureSpec::new(
                "tiny-cnn",
                input.to_vec(),
                classes,
                vec![
                    conv3("conv1", c, 8),
                    relu("relu1"),
                    LayerSpec::new("pool1", LayerKind::MaxPool),
                    LayerSpec::new("flatten", LayerKind::Flatten),
                    dense("fc", 8 * (h / 2) * (w / 2), classes),
                ],
            )
        }
        "tiny-lenet" => lenet_style(input, classes, LeNetWidths::TINY),
        "tiny-vgg8" => vgg8(input, classes, VggWidths::TINY),
        "tiny-resnet10" => resnet("tiny-resnet10", input, classes, RESNET10_BLOCKS, 4),
        other => return Err(Error::Architecture(format!("unknown built-in architecture {other:?}"))),
    }?;
    arch.name = name.to_string();
    Ok(arch)
}

pub const BUILTIN_NAMES: &[&str] = &[
    "lenet",
    "mlp",
    "vgg8",
    "resnet10",
    "resnet12",
    "resnet18",
    "tiny-mlp",
    "tiny-cnn",
    "tiny-lenet",
    "tiny-vgg8",
    "tiny-resnet10",
];
