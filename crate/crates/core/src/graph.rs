//! Shape-annotated computation graph built from a validated manifest.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use crate::model::{
    Activation, LayerConfig, LayerKind, ModelManifest, Padding, WeightRole, WeightStore,
};
use crate::tensor::{BatchNormParams, TensorShape, WindowAxis};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("layer graph contains a cycle through {layers:?}")]
    CycleDetected { layers: Vec<String> },
    #[error("weight `{weight}` of layer `{layer}` has shape {actual:?}, expected {expected:?}")]
    WeightShapeMismatch {
        layer: String,
        weight: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer `{layer}`: {message}")]
    ShapeMismatch { layer: String, message: String },
    #[error("weight `{0}` is not present in the weight store")]
    MissingWeight(String),
}

/// Identifies the value produced by one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub usize);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Layer semantics with weights resolved from the store.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input {
        shape: TensorShape,
    },
    Dense {
        units: usize,
        activation: Activation,
        /// `(in_features, units)` row-major.
        kernel: Vec<f32>,
        kernel_shape: Vec<usize>,
        bias: Vec<f32>,
    },
    Conv2D {
        filters: usize,
        kernel_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
        /// `(kh, kw, in_channels, filters)` row-major.
        kernel: Vec<f32>,
        kernel_shape: Vec<usize>,
        bias: Vec<f32>,
    },
    DepthwiseConv2D {
        kernel_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
        /// `(kh, kw, channels, 1)` row-major.
        kernel: Vec<f32>,
        kernel_shape: Vec<usize>,
        bias: Vec<f32>,
    },
    Pool {
        kind: PoolKind,
        pool_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    BatchNorm(BatchNormParams),
    Activation(Activation),
    Softmax,
    Flatten,
    UpSample2D {
        size: [usize; 2],
    },
    Add,
    Concatenate,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Input { .. } => LayerKind::Input,
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv2D { .. } => LayerKind::Conv2D,
            LayerOp::DepthwiseConv2D { .. } => LayerKind::DepthwiseConv2D,
            LayerOp::Pool {
                kind: PoolKind::Max,
                ..
            } => LayerKind::MaxPool2D,
            LayerOp::Pool {
                kind: PoolKind::Avg,
                ..
            } => LayerKind::AvgPool2D,
            LayerOp::BatchNorm(_) => LayerKind::BatchNorm,
            LayerOp::Activation(_) => LayerKind::Activation,
            LayerOp::Softmax => LayerKind::Softmax,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::UpSample2D { .. } => LayerKind::UpSample2D,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Concatenate => LayerKind::Concatenate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    pub shape: TensorShape,
}

/// Nodes are kept in manifest order; node `i` produces `TensorId(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    pub nodes: Vec<Node>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl ComputationGraph {
    pub fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> TensorShape {
        self.nodes[id.0].shape
    }

    pub fn input_shapes(&self) -> Vec<TensorShape> {
        self.inputs.iter().map(|&t| self.shape(t)).collect()
    }

    pub fn output_shapes(&self) -> Vec<TensorShape> {
        self.outputs.iter().map(|&t| self.shape(t)).collect()
    }

    /// Number of nodes reading each tensor.
    pub fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for t in &node.inputs {
                counts[t.0] += 1;
            }
        }
        counts
    }
}

pub fn build_graph(
    manifest: &ModelManifest,
    weights: &WeightStore,
) -> Result<ComputationGraph, GraphError> {
    let index: HashMap<&str, usize> = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.as_str(), i))
        .collect();
    let lookup = |name: &str| -> Result<TensorId, GraphError> {
        index
            .get(name)
            .map(|&i| TensorId(i))
            .ok_or_else(|| GraphError::ShapeMismatch {
                layer: name.to_string(),
                message: "undeclared layer".into(),
            })
    };

    let mut nodes = Vec::with_capacity(manifest.layers.len());
    for (i, layer) in manifest.layers.iter().enumerate() {
        let fetch = |role: WeightRole| -> Result<Option<(Vec<f32>, Vec<usize>)>, GraphError> {
            match layer.weight(role) {
                None => Ok(None),
                Some(r) => {
                    let t = weights
                        .get(&r.name)
                        .ok_or_else(|| GraphError::MissingWeight(r.name.clone()))?;
                    Ok(Some((t.data.clone(), t.shape.clone())))
                }
            }
        };
        let kernel = || -> Result<(Vec<f32>, Vec<usize>), GraphError> {
            fetch(WeightRole::Kernel)?
                .ok_or_else(|| GraphError::MissingWeight(format!("{}/kernel", layer.name)))
        };
        let bias = |n: usize| -> Result<Vec<f32>, GraphError> {
            match fetch(WeightRole::Bias)? {
                Some((data, shape)) => {
                    if shape != [n] {
                        return Err(GraphError::WeightShapeMismatch {
                            layer: layer.name.clone(),
                            weight: "bias".into(),
                            expected: vec![n],
                            actual: shape,
                        });
                    }
                    Ok(data)
                }
                None => Ok(vec![0.0; n]),
            }
        };
        let op = match &layer.config {
            LayerConfig::Input { shape } => LayerOp::Input {
                shape: TensorShape::from_dims(shape).ok_or_else(|| GraphError::ShapeMismatch {
                    layer: layer.name.clone(),
                    message: format!("unsupported input shape {shape:?}"),
                })?,
            },
            &LayerConfig::Dense {
                units, activation, ..
            } => {
                let (kernel, kernel_shape) = kernel()?;
                LayerOp::Dense {
                    units,
                    activation,
                    kernel,
                    kernel_shape,
                    bias: bias(units)?,
                }
            }
            &LayerConfig::Conv2D {
                filters,
                kernel_size,
                strides,
                padding,
                activation,
                ..
            } => {
                let (kernel, kernel_shape) = kernel()?;
                LayerOp::Conv2D {
                    filters,
                    kernel_size,
                    strides,
                    padding,
                    activation,
                    kernel,
                    kernel_shape,
                    bias: bias(filters)?,
                }
            }
            &LayerConfig::DepthwiseConv2D {
                kernel_size,
                strides,
                padding,
                activation,
                ..
            } => {
                let (kernel, kernel_shape) = kernel()?;
                let channels = kernel_shape.get(2).copied().unwrap_or(0);
                LayerOp::DepthwiseConv2D {
                    kernel_size,
                    strides,
                    padding,
                    activation,
                    kernel,
                    kernel_shape,
                    bias: bias(channels)?,
                }
            }
            &LayerConfig::MaxPool2D {
                pool_size,
                strides,
                padding,
            } => LayerOp::Pool {
                kind: PoolKind::Max,
                pool_size,
                strides,
                padding,
            },
            &LayerConfig::AvgPool2D {
                pool_size,
                strides,
                padding,
            } => LayerOp::Pool {
                kind: PoolKind::Avg,
                pool_size,
                strides,
                padding,
            },
            LayerConfig::BatchNorm => {
                let missing =
                    |role: &str| GraphError::MissingWeight(format!("{}/{role}", layer.name));
                let (scale, scale_shape) =
                    fetch(WeightRole::Scale)?.ok_or_else(|| missing("scale"))?;
                let (offset, offset_shape) =
                    fetch(WeightRole::Offset)?.ok_or_else(|| missing("offset"))?;
                if offset_shape != scale_shape || scale_shape.len() != 1 {
                    return Err(GraphError::WeightShapeMismatch {
                        layer: layer.name.clone(),
                        weight: "offset".into(),
                        expected: scale_shape,
                        actual: offset_shape,
                    });
                }
                LayerOp::BatchNorm(BatchNormParams { scale, offset })
            }
            &LayerConfig::Activation { activation } => LayerOp::Activation(activation),
            LayerConfig::Softmax => LayerOp::Softmax,
            LayerConfig::Flatten => LayerOp::Flatten,
            &LayerConfig::UpSample2D { size } => LayerOp::UpSample2D { size },
            LayerConfig::Add => LayerOp::Add,
            LayerConfig::Concatenate => LayerOp::Concatenate,
        };
        let inputs = layer
            .inputs
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<Vec<_>, _>>()?;
        nodes.push(Node {
            name: layer.name.clone(),
            op,
            inputs,
            output: TensorId(i),
            shape: TensorShape::Flat(1),
        });
    }

    let graph = ComputationGraph {
        nodes,
        inputs: manifest
            .input_names
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<_, _>>()?,
        outputs: manifest
            .output_names
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<_, _>>()?,
    };
    check_acyclic(&graph)?;
    infer_shapes(&graph)
}

fn check_acyclic(graph: &ComputationGraph) -> Result<(), GraphError> {
    let order = kahn(graph);
    if order.len() == graph.nodes.len() {
        return Ok(());
    }
    let placed: BTreeSet<usize> = order.into_iter().collect();
    Err(GraphError::CycleDetected {
        layers: graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| !placed.contains(i))
            .map(|(_, n)| n.name.clone())
            .collect(),
    })
}

/// Kahn's algorithm; ready nodes are taken in declaration order.
fn kahn(graph: &ComputationGraph) -> Vec<usize> {
    let n = graph.nodes.len();
    let mut pending: Vec<usize> = graph.nodes.iter().map(|node| node.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in graph.nodes.iter().enumerate() {
        for t in &node.inputs {
            consumers[t.0].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            pending[c] -= 1;
            if pending[c] == 0 {
                ready.insert(c);
            }
        }
    }
    order
}

/// A deterministic schedule: every node after its producers, ties broken
/// by manifest declaration order.
pub fn topological_order(graph: &ComputationGraph) -> Vec<usize> {
    let order = kahn(graph);
    debug_assert_eq!(order.len(), graph.nodes.len(), "graph must be acyclic");
    order
}

/// Recomputes every node's output shape from the input shapes, checking
/// weight shapes against the inferred input channel counts.
pub fn infer_shapes(graph: &ComputationGraph) -> Result<ComputationGraph, GraphError> {
    let mut out = graph.clone();
    for i in topological_order(graph) {
        let input_shapes: Vec<TensorShape> = out.nodes[i]
            .inputs
            .iter()
            .map(|t| out.nodes[t.0].shape)
            .collect();
        let shape = node_shape(&out.nodes[i], &input_shapes)?;
        out.nodes[i].shape = shape;
    }
    Ok(out)
}

fn node_shape(node: &Node, inputs: &[TensorShape]) -> Result<TensorShape, GraphError> {
    let mismatch = |message: String| GraphError::ShapeMismatch {
        layer: node.name.clone(),
        message,
    };
    let check_weight = |weight: &str, expected: Vec<usize>, actual: &[usize]| {
        if expected == actual {
            Ok(())
        } else {
            Err(GraphError::WeightShapeMismatch {
                layer: node.name.clone(),
                weight: weight.into(),
                expected,
                actual: actual.to_vec(),
            })
        }
    };
    let spatial = |s: TensorShape| -> Result<(usize, usize, usize), GraphError> {
        match s {
            TensorShape::Spatial {
                height,
                width,
                channels,
            } => Ok((height, width, channels)),
            TensorShape::Flat(_) => Err(mismatch(format!(
                "{} needs a (height, width, channels) input, got {s}",
                node.op.kind()
            ))),
        }
    };
    let window = |(h, w): (usize, usize), k: [usize; 2], s: [usize; 2], p: Padding| {
        if s.contains(&0) {
            return Err(mismatch("zero stride".into()));
        }
        match (
            WindowAxis::new(h, k[0], s[0], p),
            WindowAxis::new(w, k[1], s[1], p),
        ) {
            (Some(y), Some(x)) => Ok((y.output, x.output)),
            _ => Err(mismatch(format!(
                "window {}x{} does not fit input {h}x{w} under valid padding",
                k[0], k[1]
            ))),
        }
    };

    let shape = match &node.op {
        LayerOp::Input { shape } => *shape,
        LayerOp::Dense {
            units,
            kernel_shape,
            ..
        } => {
            let TensorShape::Flat(n) = inputs[0] else {
                return Err(mismatch(format!(
                    "Dense needs a flat input, got {}",
                    inputs[0]
                )));
            };
            check_weight("kernel", vec![n, *units], kernel_shape)?;
            TensorShape::Flat(*units)
        }
        LayerOp::Conv2D {
            filters,
            kernel_size,
            strides,
            padding,
            kernel_shape,
            ..
        } => {
            let (h, w, c) = spatial(inputs[0])?;
            check_weight(
                "kernel",
                vec![kernel_size[0], kernel_size[1], c, *filters],
                kernel_shape,
            )?;
            let (oh, ow) = window((h, w), *kernel_size, *strides, *padding)?;
            TensorShape::spatial(oh, ow, *filters)
        }
        LayerOp::DepthwiseConv2D {
            kernel_size,
            strides,
            padding,
            kernel_shape,
            bias,
            ..
        } => {
            let (h, w, c) = spatial(inputs[0])?;
            check_weight(
                "kernel",
                vec![kernel_size[0], kernel_size[1], c, 1],
                kernel_shape,
            )?;
            check_weight("bias", vec![c], &[bias.len()])?;
            let (oh, ow) = window((h, w), *kernel_size, *strides, *padding)?;
            TensorShape::spatial(oh, ow, c)
        }
        LayerOp::Pool {
            pool_size,
            strides,
            padding,
            ..
        } => {
            let (h, w, c) = spatial(inputs[0])?;
            let (oh, ow) = window((h, w), *pool_size, *strides, *padding)?;
            TensorShape::spatial(oh, ow, c)
        }
        LayerOp::BatchNorm(p) => {
            check_weight("scale", vec![inputs[0].channels()], &[p.channels()])?;
            inputs[0]
        }
        LayerOp::Activation(_) | LayerOp::Softmax => inputs[0],
        LayerOp::Flatten => TensorShape::Flat(inputs[0].element_count()),
        LayerOp::UpSample2D { size } => {
            let (h, w, c) = spatial(inputs[0])?;
            TensorShape::spatial(size[0] * h, size[1] * w, c)
        }
        LayerOp::Add => {
            if let Some(other) = inputs.iter().find(|s| **s != inputs[0]) {
                return Err(mismatch(format!(
                    "Add inputs differ in shape: {} vs {other}",
                    inputs[0]
                )));
            }
            inputs[0]
        }
        LayerOp::Concatenate => {
            let channels = inputs.iter().map(TensorShape::channels).sum();
            match inputs[0] {
                TensorShape::Flat(_) => {
                    if inputs.iter().any(|s| s.rank() != 1) {
                        return Err(mismatch("Concatenate mixes ranks".into()));
                    }
                    TensorShape::Flat(channels)
                }
                TensorShape::Spatial { height, width, .. } => {
                    if inputs.iter().any(|s| {
                        !matches!(*s, TensorShape::Spatial { height: h, width: w, .. } if h == height && w == width)
                    }) {
                        return Err(mismatch(
                            "Concatenate inputs must agree in height and width".into(),
                        ));
                    }
                    TensorShape::spatial(height, width, channels)
                }
            }
        }
    };
    Ok(shape)
}
