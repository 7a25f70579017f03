use std::fmt;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Dense,
    Conv2D,
    DepthwiseConv2D,
    MaxPool2D,
    AvgPool2D,
    BatchNorm,
    Activation,
    Softmax,
    Flatten,
    UpSample2D,
    Add,
    Concatenate,
}

impl LayerKind {
    pub const ALL: [LayerKind; 13] = [
        LayerKind::Input,
        LayerKind::Dense,
        LayerKind::Conv2D,
        LayerKind::DepthwiseConv2D,
        LayerKind::MaxPool2D,
        LayerKind::AvgPool2D,
        LayerKind::BatchNorm,
        LayerKind::Activation,
        LayerKind::Softmax,
        LayerKind::Flatten,
        LayerKind::UpSample2D,
        LayerKind::Add,
        LayerKind::Concatenate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Dense => "Dense",
            LayerKind::Conv2D => "Conv2D",
            LayerKind::DepthwiseConv2D => "DepthwiseConv2D",
            LayerKind::MaxPool2D => "MaxPool2D",
            LayerKind::AvgPool2D => "AvgPool2D",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::Activation => "Activation",
            LayerKind::Softmax => "Softmax",
            LayerKind::Flatten => "Flatten",
            LayerKind::UpSample2D => "UpSample2D",
            LayerKind::Add => "Add",
            LayerKind::Concatenate => "Concatenate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        LayerKind::ALL.into_iter().find(|k| k.as_str() == name)
    }

    /// Weight roles a layer of this kind must carry. `use_bias = false`
    /// drops the bias.
    pub(crate) fn required_roles(self, use_bias: bool) -> &'static [WeightRole] {
        use WeightRole::*;
        match self {
            LayerKind::Dense | LayerKind::Conv2D | LayerKind::DepthwiseConv2D => {
                if use_bias {
                    &[Kernel, Bias]
                } else {
                    &[Kernel]
                }
            }
            LayerKind::BatchNorm => &[Scale, Offset],
            _ => &[],
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    Same,
    #[default]
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

/// Kind-specific layer parameters. Spatial pairs are `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerConfig {
    Input {
        shape: Vec<usize>,
    },
    Dense {
        units: usize,
        activation: Activation,
        use_bias: bool,
    },
    Conv2D {
        filters: usize,
        kernel_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
        use_bias: bool,
    },
    DepthwiseConv2D {
        kernel_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
        use_bias: bool,
    },
    MaxPool2D {
        pool_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    AvgPool2D {
        pool_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    BatchNorm,
    Activation {
        activation: Activation,
    },
    Softmax,
    Flatten,
    UpSample2D {
        size: [usize; 2],
    },
    Add,
    Concatenate,
}

impl LayerConfig {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerConfig::Input { .. } => LayerKind::Input,
            LayerConfig::Dense { .. } => LayerKind::Dense,
            LayerConfig::Conv2D { .. } => LayerKind::Conv2D,
            LayerConfig::DepthwiseConv2D { .. } => LayerKind::DepthwiseConv2D,
            LayerConfig::MaxPool2D { .. } => LayerKind::MaxPool2D,
            LayerConfig::AvgPool2D { .. } => LayerKind::AvgPool2D,
            LayerConfig::BatchNorm => LayerKind::BatchNorm,
            LayerConfig::Activation { .. } => LayerKind::Activation,
            LayerConfig::Softmax => LayerKind::Softmax,
            LayerConfig::Flatten => LayerKind::Flatten,
            LayerConfig::UpSample2D { .. } => LayerKind::UpSample2D,
            LayerConfig::Add => LayerKind::Add,
            LayerConfig::Concatenate => LayerKind::Concatenate,
        }
    }

    pub(crate) fn use_bias(&self) -> bool {
        match self {
            LayerConfig::Dense { use_bias, .. }
            | LayerConfig::Conv2D { use_bias, .. }
            | LayerConfig::DepthwiseConv2D { use_bias, .. } => *use_bias,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeightRole {
    Kernel,
    Bias,
    Scale,
    Offset,
}

impl WeightRole {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightRole::Kernel => "kernel",
            WeightRole::Bias => "bias",
            WeightRole::Scale => "scale",
            WeightRole::Offset => "offset",
        }
    }
}

/// Location of one weight tensor inside the blob. The role of a weight
/// is the last `/`-separated component of its name (`conv1/kernel`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightRef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub length: usize,
}

impl WeightRef {
    pub fn role(&self) -> Option<WeightRole> {
        match self.name.rsplit('/').next()? {
            "kernel" => Some(WeightRole::Kernel),
            "bias" => Some(WeightRole::Bias),
            "scale" => Some(WeightRole::Scale),
            "offset" => Some(WeightRole::Offset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub inputs: Vec<String>,
    pub config: LayerConfig,
    pub weight_refs: Vec<WeightRef>,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        self.config.kind()
    }

    pub fn weight(&self, role: WeightRole) -> Option<&WeightRef> {
        self.weight_refs.iter().find(|w| w.role() == Some(role))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelManifest {
    pub format_version: u32,
    pub layers: Vec<LayerSpec>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

impl ModelManifest {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn weight_refs(&self) -> impl Iterator<Item = (&LayerSpec, &WeightRef)> {
        self.layers
            .iter()
            .flat_map(|l| l.weight_refs.iter().map(move |w| (l, w)))
    }
}
