//! Declarative network descriptions and architecture presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::SimilarityKind;

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn yes() -> bool {
    true
}

/// Diagonal (`HV` outputs) or unconstrained (`HV²` outputs) prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dns,
    Uns,
}

/// Which vectors the predictor's final layer normalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Both,
    XOnly,
    /// No normalization anywhere in the predictor.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// The layer owns its predictor.
    #[default]
    Disjoint,
    /// One predictor shared by every layer so wired, fed through an
    /// adaptation network chosen by input shape.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSpec {
    pub variant: Variant,
    /// Hidden width; 64 for DNS and 128 for UNS when omitted.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub norm: NormMode,
    /// Predict one matrix per sliding window instead of one per feature map.
    #[serde(default)]
    pub per_patch: bool,
    #[serde(default)]
    pub wiring: Wiring,
    #[serde(default = "yes")]
    pub identity_residual: bool,
}

impl PredictorSpec {
    pub fn new(variant: Variant) -> Self {
        PredictorSpec {
            variant,
            hidden: None,
            norm: NormMode::Both,
            per_patch: false,
            wiring: Wiring::Disjoint,
            identity_residual: true,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(match self.variant {
            Variant::Dns => 64,
            Variant::Uns => 128,
        })
    }

    pub fn output_dim(&self, patch: usize) -> usize {
        match self.variant {
            Variant::Dns => patch,
            Variant::Uns => patch * patch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SimilaritySpec {
    Static { kind: SimilarityKind },
    Dynamic { predictor: PredictorSpec },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    NsConv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
        similarity: SimilaritySpec,
    },
    BatchNorm {},
    Relu {},
    MaxPool {
        #[serde(default = "two")]
        size: usize,
        #[serde(default = "two")]
        stride: usize,
    },
    /// Hidden fully-connected layer; flattens its input.
    Fc { out: usize },
    /// The classification head; must be the last layer.
    Classifier { classes: usize },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, pad: usize) -> Self {
        LayerSpec::Conv { out_channels, kernel, stride: 1, pad, bias: true }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::NsConv { .. })
    }
}

/// Activation shape between layers, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dim {
    Map([usize; 3]),
    Flat(usize),
}

impl Dim {
    pub fn numel(&self) -> usize {
        match self {
            Dim::Map(s) => s.iter().product(),
            Dim::Flat(n) => *n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Channel width that adaptation networks map shared-predictor inputs to.
    #[serde(default = "default_adapter_channels")]
    pub adapter_channels: usize,
}

fn default_adapter_channels() -> usize {
    16
}

fn cfg_err<T>(layer: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Configuration(format!("layer {layer}: {msg}")))
}

impl NetworkSpec {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input, layers, adapter_channels: default_adapter_channels() }
    }

    /// Input shape of every layer followed by the output shape of the last.
    pub fn shapes(&self) -> Result<Vec<Dim>> {
        if self.input.contains(&0) {
            return Err(Error::Configuration(format!("input shape {:?} has a zero dimension", self.input)));
        }
        let mut dims = vec![Dim::Map(self.input)];
        let mut cur = Dim::Map(self.input);
        let mut shared: Option<(usize, &PredictorSpec)> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let is_last = i + 1 == self.layers.len();
            cur = match (layer, cur) {
                (LayerSpec::Conv { out_channels, kernel, stride, pad, .. }, Dim::Map([_, h, w]))
                | (LayerSpec::NsConv { out_channels, kernel, stride, pad, .. }, Dim::Map([_, h, w])) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return cfg_err(i, "zero channels, kernel or stride");
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return cfg_err(i, format!("kernel {kernel} does not fit a {h}×{w} map with pad {pad}"));
                    }
                    if let LayerSpec::NsConv { similarity: SimilaritySpec::Dynamic { predictor: p }, .. } = layer {
                        if p.hidden_width() == 0 {
                            return cfg_err(i, "predictor hidden width is zero");
                        }
                        if p.wiring == Wiring::Shared {
                            let hv = kernel * kernel;
                            match shared {
                                Some((s, _)) if s != hv => {
                                    return cfg_err(i, "shared predictor used with different kernel sizes")
                                }
                                Some((_, q)) if q != p => {
                                    return cfg_err(i, "layers sharing a predictor must use the same predictor settings")
                                }
                                _ => shared = Some((hv, p)),
                            }
                        }
                    }
                    Dim::Map([
                        *out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ])
                }
                (LayerSpec::Conv { .. } | LayerSpec::NsConv { .. }, Dim::Flat(_)) => {
                    return cfg_err(i, "convolution after a fully-connected layer");
                }
                (LayerSpec::BatchNorm {} | LayerSpec::Relu {}, d) => d,
                (LayerSpec::MaxPool { size, stride }, Dim::Map([c, h, w])) => {
                    if *size == 0 || *stride == 0 || h < *size || w < *size {
                        return cfg_err(i, format!("{size}×{size} pooling does not fit a {h}×{w} map"));
                    }
                    Dim::Map([c, (h - size) / stride + 1, (w - size) / stride + 1])
                }
                (LayerSpec::MaxPool { .. }, Dim::Flat(_)) => {
                    return cfg_err(i, "pooling after a fully-connected layer");
                }
                (LayerSpec::Fc { out }, _) => {
                    if *out == 0 {
                        return cfg_err(i, "zero-width fully-connected layer");
                    }
                    Dim::Flat(*out)
                }
                (LayerSpec::Classifier { classes }, _) => {
                    if !is_last {
                        return cfg_err(i, "the classifier must be the last layer");
                    }
                    if *classes == 0 {
                        return cfg_err(i, "classifier with zero classes");
                    }
                    Dim::Flat(*classes)
                }
            };
            dims.push(cur);
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Classifier { .. })) {
            return Err(Error::Configuration("network must end with exactly one classifier".into()));
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Classifier { classes }) => *classes,
            _ => 0,
        }
    }

    /// The same network with every similarity convolution replaced by a
    /// plain convolution of identical geometry.
    pub fn plain_twin(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::NsConv { out_channels, kernel, stride, pad, bias, .. } => LayerSpec::Conv {
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                },
                other => other.clone(),
            })
            .collect();
        NetworkSpec { input: self.input, layers, adapter_channels: self.adapter_channels }
    }

    /// The same network with every convolution using `similarity`.
    pub fn with_similarity(&self, similarity: &SimilaritySpec) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { out_channels, kernel, stride, pad, bias }
                | LayerSpec::NsConv { out_channels, kernel, stride, pad, bias, .. } => LayerSpec::NsConv {
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                    similarity: similarity.clone(),
                },
                other => other.clone(),
            })
            .collect();
        NetworkSpec { input: self.input, layers, adapter_channels: self.adapter_channels }
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Cnn4,
    Cnn9,
    Cnn10,
    BaselineCnn,
    BaselineCnnPlus,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn-4" | "cnn4" => Ok(Preset::Cnn4),
            "cnn-9" | "cnn9" => Ok(Preset::Cnn9),
            "cnn-10" | "cnn10" => Ok(Preset::Cnn10),
            "baselinecnn" | "baseline-cnn" => Ok(Preset::BaselineCnn),
            "baselinecnn++" | "baselinecnn++-like" | "baseline-cnn++" => Ok(Preset::BaselineCnnPlus),
            _ => Err(Error::Argument(format!(
                "unknown preset {s:?}; expected CNN-4, CNN-9, CNN-10, baselineCNN or baselineCNN++"
            ))),
        }
    }
}

fn conv_bn_relu(layers: &mut Vec<LayerSpec>, out: usize, kernel: usize, stride: usize) {
    layers.push(LayerSpec::Conv { out_channels: out, kernel, stride, pad: kernel / 2, bias: true });
    layers.push(LayerSpec::BatchNorm {});
    layers.push(LayerSpec::Relu {});
}

fn vgg_like(input: [usize; 3], classes: usize, widths: [usize; 3], per_stage: usize, fc: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    for w in widths {
        for _ in 0..per_stage {
            conv_bn_relu(&mut layers, w, 3, 1);
        }
        layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
    }
    layers.push(LayerSpec::Fc { out: fc });
    layers.push(LayerSpec::BatchNorm {});
    layers.push(LayerSpec::Relu {});
    layers.push(LayerSpec::Classifier { classes });
    NetworkSpec::new(input, layers)
}

/// Build a named architecture for `input` images and `classes` outputs.
pub fn build_preset(preset: Preset, input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    let spec = match preset {
        Preset::Cnn4 => {
            let mut layers = Vec::new();
            for _ in 0..4 {
                conv_bn_relu(&mut layers, 32, 3, 1);
                layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            }
            layers.push(LayerSpec::Classifier { classes });
            NetworkSpec::new(input, layers)
        }
        Preset::Cnn9 | Preset::BaselineCnn => vgg_like(input, classes, [32, 64, 128], 3, 256),
        Preset::BaselineCnnPlus => vgg_like(input, classes, [40, 80, 160], 4, 320),
        Preset::Cnn10 => {
            let mut layers = Vec::new();
            conv_bn_relu(&mut layers, 64, 7, 2);
            layers.push(LayerSpec::MaxPool { size: 3, stride: 2 });
            for w in [64, 128, 256] {
                for _ in 0..3 {
                    conv_bn_relu(&mut layers, w, 3, 1);
                }
                layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
            }
            layers.push(LayerSpec::Fc { out: 512 });
            layers.push(LayerSpec::BatchNorm {});
            layers.push(LayerSpec::Relu {});
            layers.push(LayerSpec::Classifier { classes });
            NetworkSpec::new(input, layers)
        }
    };
    spec.validate()?;
    Ok(spec)
}
