use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    /// Two 3x3 conv+batchnorm stages with a skip connection; the skip is a
    /// 1x1 conv+batchnorm projection when stride or width changes.
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
}

/// Per-layer placement flags.
///
/// A layer is generated by the hypernetwork unless it is `local_only`.
/// `frozen` layers are served but never updated by local training.
/// `local_norm` keeps only the batchnorm tensors of a layer on the client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub local_only: bool,
    pub frozen: bool,
    pub local_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub flags: LayerFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl SlotRole {
    /// Running statistics are packed but never receive a gradient.
    pub fn trainable(self) -> bool {
        !matches!(self, SlotRole::RunningMean | SlotRole::RunningVar)
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            SlotRole::Gamma | SlotRole::Beta | SlotRole::RunningMean | SlotRole::RunningVar
        )
    }
}

/// One parameter tensor of a layer, in packing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpec {
    pub role: SlotRole,
    pub shape: Vec<usize>,
    pub len: usize,
}

impl SlotSpec {
    fn new(role: SlotRole, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { role, shape, len }
    }
}

fn norm_slots(channels: usize, out: &mut Vec<SlotSpec>) {
    out.push(SlotSpec::new(SlotRole::Gamma, vec![channels]));
    out.push(SlotSpec::new(SlotRole::Beta, vec![channels]));
    out.push(SlotSpec::new(SlotRole::RunningMean, vec![channels]));
    out.push(SlotSpec::new(SlotRole::RunningVar, vec![channels]));
}

impl LayerKind {
    /// Parameter tensors in canonical packing order: weight (row-major) then
    /// bias; batchnorm as gamma, beta, running mean, running variance.
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut out = Vec::new();
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                out.push(SlotSpec::new(SlotRole::Weight, vec![inputs, outputs]));
                out.push(SlotSpec::new(SlotRole::Bias, vec![outputs]));
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                out.push(SlotSpec::new(
                    SlotRole::Weight,
                    vec![out_channels, in_channels, kernel, kernel],
                ));
                if bias {
                    out.push(SlotSpec::new(SlotRole::Bias, vec![out_channels]));
                }
            }
            LayerKind::BatchNorm { channels } => norm_slots(channels, &mut out),
            LayerKind::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                out.push(SlotSpec::new(
                    SlotRole::Weight,
                    vec![out_channels, in_channels, 3, 3],
                ));
                norm_slots(out_channels, &mut out);
                out.push(SlotSpec::new(
                    SlotRole::Weight,
                    vec![out_channels, out_channels, 3, 3],
                ));
                norm_slots(out_channels, &mut out);
                if stride != 1 || in_channels != out_channels {
                    out.push(SlotSpec::new(
                        SlotRole::Weight,
                        vec![out_channels, in_channels, 1, 1],
                    ));
                    norm_slots(out_channels, &mut out);
                }
            }
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::AvgPool { .. } | LayerKind::Flatten => {}
        }
        out
    }

    pub fn has_params(&self) -> bool {
        !self.slots().is_empty()
    }

    /// Shape of one sample after this layer, batch dimension excluded.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::Architecture(msg));
        match *self {
            LayerKind::Dense { inputs, outputs } => match input {
                [n] if *n == inputs => Ok(vec![outputs]),
                _ => bad(format!("dense expects [{inputs}], got {input:?}")),
            },
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => match input {
                [c, h, w] if *c == in_channels => {
                    let g = ConvGeometry::new(stride, padding);
                    match (g.output_size(*h, kernel), g.output_size(*w, kernel)) {
                        (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                        _ => bad(format!("conv kernel {kernel} does not fit {h}x{w}")),
                    }
                }
                _ => bad(format!("conv2d expects [{in_channels}, h, w], got {input:?}")),
            },
            LayerKind::BatchNorm { channels } => match input.first() {
                Some(&c) if c == channels => Ok(input.to_vec()),
                _ => bad(format!("batchnorm expects {channels} channels, got {input:?}")),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => bad(format!("maxpool expects [c, h>=2, w>=2], got {input:?}")),
            },
            LayerKind::AvgPool { kernel } => match input {
                [c, h, w] if kernel >= 1 && *h >= kernel && *w >= kernel => {
                    Ok(vec![*c, h / kernel, w / kernel])
                }
                _ => bad(format!("avgpool {kernel} does not fit {input:?}")),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => match input {
                [c, h, w] if *c == in_channels && stride >= 1 => {
                    let g = ConvGeometry::new(stride, 1);
                    match (g.output_size(*h, 3), g.output_size(*w, 3)) {
                        (Some(oh), Some(ow)) => Ok(vec![out_channels, oh, ow]),
                        _ => bad(format!("residual block does not fit {h}x{w}")),
                    }
                }
                _ => bad(format!("residual block expects [{in_channels}, h, w], got {input:?}")),
            },
        }
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            flags: LayerFlags::default(),
        }
    }

    pub fn local_only(mut self) -> Self {
        self.flags.local_only = true;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.flags.frozen = true;
        self
    }

    pub fn slots(&self) -> Vec<SlotSpec> {
        self.kind.slots()
    }

    /// Whether a given slot of this layer travels in the flat vector.
    pub fn slot_is_packed(&self, role: SlotRole) -> bool {
        !self.flags.local_only && !(self.flags.local_norm && role.is_norm())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Build and statically check that consecutive layer shapes compose.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let arch = Self {
            name: name.into(),
            input_shape,
            classes,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Architecture("class count must be positive".into()));
        }
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            if layer.flags.local_only && layer.flags.local_norm {
                return Err(Error::Architecture(format!(
                    "layer {} cannot be local-only and local-norm at once",
                    layer.name
                )));
            }
            shape = layer
                .kind
                .output_shape(&shape)
                .map_err(|e| Error::Architecture(format!("layer {}: {e}", layer.name)))?;
        }
        if shape != [self.classes] {
            return Err(Error::Architecture(format!(
                "{}: final shape {shape:?} does not match {} classes",
                self.name, self.classes
            )));
        }
        Ok(())
    }

    /// Number of layers that own parameters.
    pub fn parametric_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.has_params()).count()
    }

    pub fn total_param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.slots())
            .map(|s| s.len)
            .sum()
    }

    pub fn set_local_only(&mut self, layer: &str) -> Result<()> {
        self.layer_mut(layer)?.flags.local_only = true;
        Ok(())
    }

    pub fn set_frozen(&mut self, layer: &str) -> Result<()> {
        self.layer_mut(layer)?.flags.frozen = true;
        Ok(())
    }

    fn layer_mut(&mut self, name: &str) -> Result<&mut LayerSpec> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Architecture(format!("no layer named {name}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawArch = toml::from_str(text).map_err(|e| Error::Architecture(e.to_string()))?;
        raw.into_spec()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawArch::from_spec(self);
        toml::to_string(&raw).expect("architecture serializes")
    }
}

// Text schema for architecture files:
//
//   name = "tiny-mlp"
//   input_shape = [64]
//   classes = 10
//   [[layers]]
//   kind = "dense"          # dense | conv2d | batchnorm | relu | maxpool
//   shape = [64, 16]        # | avgpool | flatten | residual-block
//   flags = ["frozen"]      # local | frozen | local-norm | generated
//
// Shapes: dense [in, out]; conv2d [in, out, kernel] (+ stride, padding,
// bias keys); batchnorm [channels]; avgpool [kernel]; residual-block
// [in, out] (+ stride).
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    name: String,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<String>,
}

impl RawArch {
    fn into_spec(self) -> Result<ArchitectureSpec> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, raw) in self.layers.into_iter().enumerate() {
            let name = raw.name.clone().unwrap_or_else(|| format!("{}{}", raw.kind, i));
            let shape_err = |want: &str| {
                Error::Architecture(format!("layer {name}: {} expects shape {want}", raw.kind))
            };
            let kind = match raw.kind.as_str() {
                "dense" => match raw.shape[..] {
                    [inputs, outputs] => LayerKind::Dense { inputs, outputs },
                    _ => return Err(shape_err("[in, out]")),
                },
                "conv2d" => match raw.shape[..] {
                    [in_channels, out_channels, kernel] => LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride: raw.stride.unwrap_or(1),
                        padding: raw.padding.unwrap_or(0),
                        bias: raw.bias.unwrap_or(true),
                    },
                    _ => return Err(shape_err("[in, out, kernel]")),
                },
                "batchnorm" => match raw.shape[..] {
                    [channels] => LayerKind::BatchNorm { channels },
                    _ => return Err(shape_err("[channels]")),
                },
                "avgpool" => match raw.shape[..] {
                    [kernel] => LayerKind::AvgPool { kernel },
                    _ => return Err(shape_err("[kernel]")),
                },
                "residual-block" => match raw.shape[..] {
                    [in_channels, out_channels] => LayerKind::ResidualBlock {
                        in_channels,
                        out_channels,
                        stride: raw.stride.unwrap_or(1),
                    },
                    _ => return Err(shape_err("[in, out]")),
                },
                "relu" => LayerKind::Relu,
                "maxpool" => LayerKind::MaxPool,
                "flatten" => LayerKind::Flatten,
                other => {
                    return Err(Error::Architecture(format!("layer {name}: unknown kind {other:?}")))
                }
            };
            let mut flags = LayerFlags::default();
            let mut generated = false;
            for flag in &raw.flags {
                match flag.as_str() {
                    "local" | "local-only" => flags.local_only = true,
                    "frozen" => flags.frozen = true,
                    "local-norm" => flags.local_norm = true,
                    "generated" => generated = true,
                    other => {
                        return Err(Error::Architecture(format!("layer {name}: unknown flag {other:?}")))
                    }
                }
            }
            if generated && flags.local_only {
                return Err(Error::Architecture(format!(
                    "layer {name} cannot be both generated and local-only"
                )));
            }
            layers.push(LayerSpec { name, kind, flags });
        }
        ArchitectureSpec::new(self.name, self.input_shape, self.classes, layers)
    }

    fn from_spec(spec: &ArchitectureSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let mut raw = RawLayer {
                    name: Some(l.name.clone()),
                    kind: String::new(),
                    shape: vec![],
                    stride: None,
                    padding: None,
                    bias: None,
                    flags: vec![],
                };
                match l.kind {
                    LayerKind::Dense { inputs, outputs } => {
                        raw.kind = "dense".into();
                        raw.shape = vec![inputs, outputs];
                    }
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        bias,
                    } => {
                        raw.kind = "conv2d".into();
                        raw.shape = vec![in_channels, out_channels, kernel];
                        raw.stride = Some(stride);
                        raw.padding = Some(padding);
                        raw.bias = Some(bias);
                    }
                    LayerKind::BatchNorm { channels } => {
                        raw.kind = "batchnorm".into();
                        raw.shape = vec![channels];
                    }
                    LayerKind::AvgPool { kernel } => {
                        raw.kind = "avgpool".into();
                        raw.shape = vec![kernel];
                    }
                    LayerKind::ResidualBlock {
                        in_channels,
                        out_channels,
                        stride,
                    } => {
                        raw.kind = "residual-block".into();
                        raw.shape = vec![in_channels, out_channels];
                        raw.stride = Some(stride);
                    }
                    LayerKind::Relu => raw.kind = "relu".into(),
                    LayerKind::MaxPool => raw.kind = "maxpool".into(),
                    LayerKind::Flatten => raw.kind = "flatten".into(),
                }
                if l.flags.local_only {
                    raw.flags.push("local".into());
                }
                if l.flags.frozen {
                    raw.flags.push("frozen".into());
                }
                if l.flags.local_norm {
                    raw.flags.push("local-norm".into());
                }
                raw
            })
            .collect();
        RawArch {
            name: spec.name.clone(),
            input_shape: spec.input_shape.clone(),
            classes: spec.classes,
            layers,
        }
    }
}
