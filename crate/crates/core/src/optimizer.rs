//! Lowering of the layer graph to a schedule of compilation units, with
//! activation and batch-norm fusion.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{topological_order, ComputationGraph, LayerOp, PoolKind, TensorId};
use crate::interp::{self, Window};
use crate::model::Activation;
use crate::tensor::{BatchNormParams, Tensor, TensorShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("layer `{layer}` is not supported by the compiler: {reason}")]
    UnsupportedLayer { layer: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub in_features: usize,
    pub units: usize,
    /// `(in_features, units)` row-major.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub window: Window,
    pub in_channels: usize,
    pub filters: usize,
    /// `(kh, kw, in_channels, filters)` row-major.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseParams {
    pub window: Window,
    pub channels: usize,
    /// `(kh, kw, channels)` row-major.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnitKind {
    Dense(DenseParams),
    Conv2D(ConvParams),
    DepthwiseConv2D(DepthwiseParams),
    Pool {
        kind: PoolKind,
        window: Window,
    },
    ElementwiseActivation(Activation),
    /// A batch normalization that could not be merged into a neighbor.
    BatchNorm(BatchNormParams),
    Softmax,
    Upsample {
        size: [usize; 2],
    },
    Add,
    Concat,
    Copy,
}

impl UnitKind {
    pub fn name(&self) -> &'static str {
        match self {
            UnitKind::Dense(_) => "Dense",
            UnitKind::Conv2D(_) => "Conv2D",
            UnitKind::DepthwiseConv2D(_) => "DepthwiseConv2D",
            UnitKind::Pool {
                kind: PoolKind::Max,
                ..
            } => "MaxPool",
            UnitKind::Pool {
                kind: PoolKind::Avg,
                ..
            } => "AvgPool",
            UnitKind::ElementwiseActivation(_) => "Activation",
            UnitKind::BatchNorm(_) => "BatchNorm",
            UnitKind::Softmax => "Softmax",
            UnitKind::Upsample { .. } => "Upsample",
            UnitKind::Add => "Add",
            UnitKind::Concat => "Concat",
            UnitKind::Copy => "Copy",
        }
    }

    fn accepts_fusion(&self) -> bool {
        matches!(
            self,
            UnitKind::Dense(_) | UnitKind::Conv2D(_) | UnitKind::DepthwiseConv2D(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompilationUnit {
    pub kind: UnitKind,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    /// Applied to the result before it is written.
    pub fused_activation: Activation,
    /// Batch normalization applied after the fused activation.
    pub post_affine: Option<BatchNormParams>,
    /// Input whose storage this unit would like to overwrite.
    pub in_place_preference: Option<usize>,
    /// Graph nodes folded into this unit.
    pub origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionPlan {
    pub units: Vec<CompilationUnit>,
    pub shapes: BTreeMap<TensorId, TensorShape>,
    pub inputs: Vec<TensorId>,
    /// Storage tensors backing the network outputs, after Flatten elision.
    pub outputs: Vec<TensorId>,
    /// Shapes the network outputs are exposed with.
    pub output_shapes: Vec<TensorShape>,
    pub node_names: Vec<String>,
}

impl FusionPlan {
    pub fn shape(&self, t: TensorId) -> TensorShape {
        self.shapes[&t]
    }

    /// Units reading `t`, plus one if `t` is a network output.
    pub fn consumer_count(&self, t: TensorId) -> usize {
        let reads = self.units.iter().filter(|u| u.inputs.contains(&t)).count();
        reads + usize::from(self.outputs.contains(&t))
    }

    fn producer(&self, t: TensorId) -> Option<usize> {
        self.units.iter().position(|u| u.output == t)
    }

    fn consumer(&self, t: TensorId) -> Option<usize> {
        self.units.iter().position(|u| u.inputs.contains(&t))
    }

    /// Graph node index → indices of the units it ended up in.
    pub fn node_units(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.units.iter().enumerate() {
            for &n in &u.origin {
                map.entry(n).or_default().push(i);
            }
        }
        map
    }

    /// One line per unit.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, u) in self.units.iter().enumerate() {
            let inputs: Vec<String> = u
                .inputs
                .iter()
                .map(|t| format!("{t}{}", self.shape(*t)))
                .collect();
            let detail = match &u.kind {
                UnitKind::Conv2D(p) => format!(" {}", window_text(&p.window)),
                UnitKind::DepthwiseConv2D(p) => format!(" {}", window_text(&p.window)),
                UnitKind::Pool { window, .. } => format!(" {}", window_text(window)),
                UnitKind::ElementwiseActivation(a) => format!(" {a}"),
                UnitKind::Upsample { size } => format!(" x{}x{}", size[0], size[1]),
                _ => String::new(),
            };
            let names: Vec<&str> = u
                .origin
                .iter()
                .map(|&n| self.node_names[n].as_str())
                .collect();
            let _ = writeln!(
                out,
                "unit {i}: {}{detail} in=[{}] out={}{} act={} post_bn={} in_place={} layers=[{}]",
                u.kind.name(),
                inputs.join(", "),
                u.output,
                self.shape(u.output),
                u.fused_activation,
                if u.post_affine.is_some() { "yes" } else { "no" },
                u.in_place_preference
                    .map_or("-".to_string(), |i| i.to_string()),
                names.join(","),
            );
        }
        out
    }
}

fn window_text(w: &Window) -> String {
    format!(
        "{}x{}/{}x{} {}",
        w.size[0],
        w.size[1],
        w.strides[0],
        w.strides[1],
        w.padding.as_str()
    )
}

/// One unit per node. Flatten becomes a relabel of its input unless both
/// ends are network-facing tensors, in which case a Copy unit keeps the
/// input and output storage apart.
pub fn lower_to_units(graph: &ComputationGraph) -> Result<FusionPlan, OptimizeError> {
    let mut relabel: HashMap<TensorId, TensorId> = HashMap::new();
    let resolve = |relabel: &HashMap<TensorId, TensorId>, t: TensorId| -> TensorId {
        let mut t = t;
        while let Some(&next) = relabel.get(&t) {
            t = next;
        }
        t
    };
    let mut shapes = BTreeMap::new();
    let mut units = Vec::new();

    for i in topological_order(graph) {
        let node = &graph.nodes[i];
        shapes.insert(node.output, node.shape);
        let inputs: Vec<TensorId> = node.inputs.iter().map(|&t| resolve(&relabel, t)).collect();
        let unsupported = |reason: &str| OptimizeError::UnsupportedLayer {
            layer: node.name.clone(),
            reason: reason.to_string(),
        };
        let (kind, fused, in_place) = match &node.op {
            LayerOp::Input { .. } => continue,
            LayerOp::Flatten => {
                let src = inputs[0];
                let network_facing = |t: TensorId| {
                    graph.inputs.contains(&t)
                        || graph.outputs.iter().any(|&o| resolve(&relabel, o) == t)
                };
                if graph.outputs.contains(&node.output) && network_facing(src) {
                    (UnitKind::Copy, Activation::Linear, None)
                } else {
                    relabel.insert(node.output, src);
                    continue;
                }
            }
            LayerOp::Dense {
                units: n_units,
                activation,
                kernel,
                bias,
                ..
            } => (
                UnitKind::Dense(DenseParams {
                    in_features: kernel.len() / n_units,
                    units: *n_units,
                    kernel: kernel.clone(),
                    bias: bias.clone(),
                }),
                *activation,
                None,
            ),
            LayerOp::Conv2D {
                filters,
                kernel_size,
                strides,
                padding,
                activation,
                kernel,
                bias,
                ..
            } => (
                UnitKind::Conv2D(ConvParams {
                    window: Window {
                        size: *kernel_size,
                        strides: *strides,
                        padding: *padding,
                    },
                    in_channels: graph.shape(node.inputs[0]).channels(),
                    filters: *filters,
                    kernel: kernel.clone(),
                    bias: bias.clone(),
                }),
                *activation,
                None,
            ),
            LayerOp::DepthwiseConv2D {
                kernel_size,
                strides,
                padding,
                activation,
                kernel,
                bias,
                ..
            } => (
                UnitKind::DepthwiseConv2D(DepthwiseParams {
                    window: Window {
                        size: *kernel_size,
                        strides: *strides,
                        padding: *padding,
                    },
                    channels: bias.len(),
                    kernel: kernel.clone(),
                    bias: bias.clone(),
                }),
                *activation,
                None,
            ),
            LayerOp::Pool {
                kind,
                pool_size,
                strides,
                padding,
            } => (
                UnitKind::Pool {
                    kind: *kind,
                    window: Window {
                        size: *pool_size,
                        strides: *strides,
                        padding: *padding,
                    },
                },
                Activation::Linear,
                None,
            ),
            LayerOp::BatchNorm(p) => (UnitKind::BatchNorm(p.clone()), Activation::Linear, Some(0)),
            LayerOp::Activation(tag) => (
                UnitKind::ElementwiseActivation(*tag),
                Activation::Linear,
                Some(0),
            ),
            LayerOp::Softmax => {
                if node.shape.rank() != 1 {
                    return Err(unsupported("softmax is only compiled for flat inputs"));
                }
                (UnitKind::Softmax, Activation::Linear, Some(0))
            }
            LayerOp::UpSample2D { size } => {
                (UnitKind::Upsample { size: *size }, Activation::Linear, None)
            }
            LayerOp::Add => (UnitKind::Add, Activation::Linear, Some(0)),
            LayerOp::Concatenate => (UnitKind::Concat, Activation::Linear, None),
        };
        units.push(CompilationUnit {
            kind,
            inputs,
            output: node.output,
            fused_activation: fused,
            post_affine: None,
            in_place_preference: in_place,
            origin: vec![i],
        });
    }

    Ok(FusionPlan {
        units,
        shapes,
        inputs: graph.inputs.clone(),
        outputs: graph
            .outputs
            .iter()
            .map(|&t| resolve(&relabel, t))
            .collect(),
        output_shapes: graph.output_shapes(),
        node_names: graph.nodes.iter().map(|n| n.name.clone()).collect(),
    })
}

/// Attaches standalone activations to the Dense/Conv unit producing their
/// input, when that unit's result has no other reader.
pub fn fuse_activation(plan: &FusionPlan) -> FusionPlan {
    let mut plan = plan.clone();
    loop {
        let candidate = plan.units.iter().enumerate().find_map(|(ai, unit)| {
            let UnitKind::ElementwiseActivation(tag) = unit.kind else {
                return None;
            };
            let pi = plan.producer(unit.inputs[0])?;
            let producer = &plan.units[pi];
            let ok = producer.kind.accepts_fusion()
                && producer.fused_activation == Activation::Linear
                && producer.post_affine.is_none()
                && plan.consumer_count(unit.inputs[0]) == 1;
            ok.then_some((ai, pi, tag))
        });
        let Some((ai, pi, tag)) = candidate else {
            return plan;
        };
        let act = plan.units.remove(ai);
        let pi = if pi > ai { pi - 1 } else { pi };
        let producer = &mut plan.units[pi];
        producer.fused_activation = tag;
        producer.output = act.output;
        producer.origin.extend(act.origin);
    }
}

enum BnRewrite {
    /// Fold into the weights of the producing unit.
    IntoProducer(usize),
    /// Attach as a post-activation affine of the producing unit.
    AfterActivation(usize),
    /// Fold into the input side of the single consuming unit.
    IntoConsumer(usize),
}

/// Removes batch normalizations adjacent to Dense/Conv units.
pub fn fuse_batchnorm(plan: &FusionPlan) -> FusionPlan {
    let mut plan = plan.clone();
    loop {
        let candidate = plan.units.iter().enumerate().find_map(|(bi, unit)| {
            let UnitKind::BatchNorm(params) = &unit.kind else {
                return None;
            };
            let src = unit.inputs[0];
            if let Some(pi) = plan.producer(src) {
                let p = &plan.units[pi];
                if p.kind.accepts_fusion()
                    && p.post_affine.is_none()
                    && output_channels(&p.kind) == Some(params.channels())
                    && plan.consumer_count(src) == 1
                {
                    return Some(if p.fused_activation == Activation::Linear {
                        (bi, BnRewrite::IntoProducer(pi))
                    } else {
                        (bi, BnRewrite::AfterActivation(pi))
                    });
                }
            }
            if plan.consumer_count(unit.output) == 1 {
                let ci = plan.consumer(unit.output)?;
                let c = &plan.units[ci];
                let offsets_zero = params.offset.iter().all(|&o| o == 0.0);
                let sound = match &c.kind {
                    UnitKind::Dense(_) => true,
                    UnitKind::Conv2D(p) => {
                        offsets_zero || !is_padded(&p.window, plan.shape(unit.output))
                    }
                    UnitKind::DepthwiseConv2D(p) => {
                        offsets_zero || !is_padded(&p.window, plan.shape(unit.output))
                    }
                    _ => false,
                };
                if sound && c.inputs.len() == 1 {
                    return Some((bi, BnRewrite::IntoConsumer(ci)));
                }
            }
            None
        });
        let Some((bi, rewrite)) = candidate else {
            return plan;
        };
        let bn = plan.units.remove(bi);
        let UnitKind::BatchNorm(p) = bn.kind else {
            unreachable!()
        };
        let shift = |i: usize| if i > bi { i - 1 } else { i };
        match rewrite {
            BnRewrite::IntoProducer(pi) => {
                let u = &mut plan.units[shift(pi)];
                scale_outputs(&mut u.kind, &p);
                u.output = bn.output;
                u.origin.extend(bn.origin);
            }
            BnRewrite::AfterActivation(pi) => {
                let u = &mut plan.units[shift(pi)];
                u.post_affine = Some(p);
                u.output = bn.output;
                u.origin.extend(bn.origin);
            }
            BnRewrite::IntoConsumer(ci) => {
                let u = &mut plan.units[shift(ci)];
                scale_inputs(&mut u.kind, &p);
                u.inputs[0] = bn.inputs[0];
                let mut origin = bn.origin;
                origin.append(&mut u.origin);
                u.origin = origin;
            }
        }
    }
}

/// Channel count of a weighted unit's natural output layout.
fn output_channels(kind: &UnitKind) -> Option<usize> {
    match kind {
        UnitKind::Dense(d) => Some(d.units),
        UnitKind::Conv2D(c) => Some(c.filters),
        UnitKind::DepthwiseConv2D(d) => Some(d.channels),
        _ => None,
    }
}

fn is_padded(window: &Window, input: TensorShape) -> bool {
    let (ay, ax) = window.axes(input);
    let full =
        |a: &crate::tensor::WindowAxis| (0..a.output).all(|o| a.valid_taps(o).len() == a.kernel);
    !(full(&ay) && full(&ax))
}

/// `w[.., j] *= s_j`, `b_j = s_j * b_j + o_j`.
fn scale_outputs(kind: &mut UnitKind, p: &BatchNormParams) {
    let (kernel, bias, n) = match kind {
        UnitKind::Dense(d) => (&mut d.kernel, &mut d.bias, d.units),
        UnitKind::Conv2D(c) => (&mut c.kernel, &mut c.bias, c.filters),
        UnitKind::DepthwiseConv2D(d) => (&mut d.kernel, &mut d.bias, d.channels),
        _ => unreachable!("only weighted units fold batch norm"),
    };
    for (i, w) in kernel.iter_mut().enumerate() {
        *w *= p.scale[i % n];
    }
    for (j, b) in bias.iter_mut().enumerate() {
        *b = p.scale[j] * *b + p.offset[j];
    }
}

/// `b_j += sum_i w_ij * o_i` over every kernel entry touching input
/// channel `i`, then `w_ij *= s_i`.
fn scale_inputs(kind: &mut UnitKind, p: &BatchNormParams) {
    let c = p.channels();
    match kind {
        UnitKind::Dense(d) => {
            for i in 0..d.in_features {
                for j in 0..d.units {
                    let w = &mut d.kernel[i * d.units + j];
                    d.bias[j] += *w * p.offset[i % c];
                    *w *= p.scale[i % c];
                }
            }
        }
        UnitKind::Conv2D(conv) => {
            let (cin, cout) = (conv.in_channels, conv.filters);
            for (idx, w) in conv.kernel.iter_mut().enumerate() {
                let ci = (idx / cout) % cin;
                conv.bias[idx % cout] += *w * p.offset[ci];
                *w *= p.scale[ci];
            }
        }
        UnitKind::DepthwiseConv2D(d) => {
            for (idx, w) in d.kernel.iter_mut().enumerate() {
                let ch = idx % d.channels;
                d.bias[ch] += *w * p.offset[ch];
                *w *= p.scale[ch];
            }
        }
        _ => unreachable!("only weighted units fold batch norm"),
    }
}

/// Full pipeline: lower, then alternate activation and batch-norm fusion
/// until neither changes the plan.
pub fn optimize(graph: &ComputationGraph) -> Result<FusionPlan, OptimizeError> {
    let mut plan = lower_to_units(graph)?;
    loop {
        let next = fuse_batchnorm(&fuse_activation(&plan));
        if next == plan {
            return Ok(plan);
        }
        plan = next;
    }
}

/// Evaluates the plan unit by unit with the reference kernels.
pub fn evaluate_plan(plan: &FusionPlan, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut values: HashMap<TensorId, Tensor> = HashMap::new();
    for (&id, t) in plan.inputs.iter().zip(inputs) {
        values.insert(id, t.clone());
    }
    for unit in &plan.units {
        let args: Vec<&Tensor> = unit.inputs.iter().map(|t| &values[t]).collect();
        let out_shape = plan.shape(unit.output);
        // a relabeled Flatten leaves the spatial shape on its storage
        let as_out = |t: &Tensor| Tensor::new(out_shape, t.data.clone());
        let flat = |t: &&Tensor| Tensor::new(TensorShape::Flat(t.data.len()), t.data.clone());
        let raw = match &unit.kind {
            UnitKind::Dense(d) => {
                let x = Tensor::new(TensorShape::Flat(d.in_features), args[0].data.clone());
                interp::dense_forward(&x, &d.kernel, &d.bias)
            }
            UnitKind::Conv2D(c) => interp::conv2d_forward(args[0], &c.kernel, &c.bias, c.window),
            UnitKind::DepthwiseConv2D(d) => {
                interp::depthwise_conv2d_forward(args[0], &d.kernel, &d.bias, d.window)
            }
            UnitKind::Pool { kind, window } => interp::pool_forward(args[0], *kind, *window),
            UnitKind::ElementwiseActivation(tag) => interp::activation_forward(args[0], *tag),
            UnitKind::BatchNorm(p) => interp::batchnorm_forward(&as_out(args[0]), p),
            UnitKind::Softmax => interp::softmax_forward(&as_out(args[0])),
            UnitKind::Upsample { size } => interp::upsample_forward(args[0], *size),
            UnitKind::Add => interp::add_forward(&args),
            UnitKind::Concat if out_shape.rank() == 1 => {
                let flat: Vec<Tensor> = args.iter().map(flat).collect();
                interp::concat_forward(&flat.iter().collect::<Vec<_>>())
            }
            UnitKind::Concat => interp::concat_forward(&args),
            UnitKind::Copy => Tensor::new(out_shape, args[0].data.clone()),
        };
        let mut out = interp::activation_forward(&raw, unit.fused_activation);
        if let Some(p) = &unit.post_affine {
            out = interp::batchnorm_forward(&out, p);
        }
        values.insert(unit.output, Tensor::new(out_shape, out.data));
    }
    plan.outputs
        .iter()
        .zip(&plan.output_shapes)
        .map(|(t, &shape)| Tensor::new(shape, values[t].data.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::model::{LayerConfig, Model, ModelBuilder, Padding};

    fn graph_of(model: &Model) -> ComputationGraph {
        build_graph(&model.manifest, &model.weights).unwrap()
    }

    fn eye(n: usize) -> Vec<f32> {
        (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect()
    }

    fn act(tag: Activation) -> LayerConfig {
        LayerConfig::Activation { activation: tag }
    }

    #[test]
    fn flatten_is_elided() {
        let mut b = ModelBuilder::new();
        b.input("x", &[4, 4, 1]);
        b.conv2d(
            "c",
            "x",
            [3, 3],
            [1, 1],
            Padding::Valid,
            Activation::Linear,
            vec![0.1; 18],
            vec![0.0; 2],
        );
        b.simple("f", LayerConfig::Flatten, &["c"]);
        b.dense("d", "f", Activation::Linear, vec![0.5; 8 * 3], vec![0.0; 3]);
        let g = graph_of(&b.build(&["d"]).unwrap());
        let plan = lower_to_units(&g).unwrap();
        assert_eq!(plan.units.len(), 2);
        assert_eq!(plan.units[1].inputs, vec![plan.units[0].output]);
    }

    #[test]
    fn flatten_of_input_to_output_copies() {
        let mut b = ModelBuilder::new();
        b.input("x", &[2, 2, 1]);
        b.simple("f", LayerConfig::Flatten, &["x"]);
        let plan = lower_to_units(&graph_of(&b.build(&["f"]).unwrap())).unwrap();
        assert_eq!(plan.units.len(), 1);
        assert_eq!(plan.units[0].kind, UnitKind::Copy);
    }

    #[test]
    fn softmax_over_image_is_unsupported() {
        let mut b = ModelBuilder::new();
        b.input("x", &[2, 2, 3]);
        b.simple("s", LayerConfig::Softmax, &["x"]);
        let err = lower_to_units(&graph_of(&b.build(&["s"]).unwrap())).unwrap_err();
        assert!(matches!(err, OptimizeError::UnsupportedLayer { layer, .. } if layer == "s"));
    }

    #[test]
    fn dense_relu_fuses_and_softmax_does_not() {
        let mut b = ModelBuilder::new();
        b.input("x", &[4]);
        b.dense("d", "x", Activation::Linear, eye(4), vec![0.0; 4]);
        b.simple("r", act(Activation::Relu), &["d"]);
        b.dense("d2", "r", Activation::Linear, eye(4), vec![0.0; 4]);
        b.simple("s", LayerConfig::Softmax, &["d2"]);
        let plan = optimize(&graph_of(&b.build(&["s"]).unwrap())).unwrap();
        let kinds: Vec<&str> = plan.units.iter().map(|u| u.kind.name()).collect();
        assert_eq!(kinds, vec!["Dense", "Dense", "Softmax"]);
        assert_eq!(plan.units[0].fused_activation, Activation::Relu);
    }

    #[test]
    fn shared_intermediate_blocks_activation_fusion() {
        let mut b = ModelBuilder::new();
        b.input("x", &[4]);
        b.dense("d", "x", Activation::Linear, eye(4), vec![0.0; 4]);
        b.simple("r", act(Activation::Relu), &["d"]);
        b.simple("s", LayerConfig::Add, &["r", "d"]);
        let plan = optimize(&graph_of(&b.build(&["s"]).unwrap())).unwrap();
        assert_eq!(plan.units.len(), 3);
        assert_eq!(plan.units[0].fused_activation, Activation::Linear);
    }

    #[test]
    fn dense_then_bn_folds_into_weights() {
        let mut b = ModelBuilder::new();
        b.input("x", &[3]);
        b.dense("d", "x", Activation::Linear, eye(3), vec![0.0; 3]);
        b.batch_norm("bn", "d", vec![2.0; 3], vec![1.0; 3]);
        let plan = optimize(&graph_of(&b.build(&["bn"]).unwrap())).unwrap();
        assert_eq!(plan.units.len(), 1);
        let UnitKind::Dense(d) = &plan.units[0].kind else {
            panic!()
        };
        let expected: Vec<f32> = eye(3).iter().map(|v| v * 2.0).collect();
        assert_eq!(d.kernel, expected);
        assert_eq!(d.bias, vec![1.0; 3]);
        assert_eq!(plan.node_units()[&2], vec![0]);
    }

    #[test]
    fn bn_before_dense_folds_into_consumer() {
        let mut b = ModelBuilder::new();
        b.input("x", &[2]);
        b.batch_norm("bn", "x", vec![2.0, 3.0], vec![1.0, -1.0]);
        b.dense(
            "d",
            "bn",
            Activation::Linear,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.5, 0.5],
        );
        let g = graph_of(&b.build(&["d"]).unwrap());
        let plan = optimize(&g).unwrap();
        assert_eq!(plan.units.len(), 1);
        let UnitKind::Dense(d) = &plan.units[0].kind else {
            panic!()
        };
        // rows scaled by (2, 3); bias += (1*1 + 3*-1, 2*1 + 4*-1)
        assert_eq!(d.kernel, vec![2.0, 4.0, 9.0, 12.0]);
        assert_eq!(d.bias, vec![-1.5, -1.5]);
        let x = Tensor::new(TensorShape::Flat(2), vec![0.25, -4.0]);
        assert_eq!(
            evaluate_plan(&plan, std::slice::from_ref(&x)),
            interp::interpret(&g, &[x]).unwrap()
        );
    }

    #[test]
    fn conv_relu_bn_attaches_post_affine() {
        let mut b = ModelBuilder::new();
        b.input("x", &[5, 5, 2]);
        let k: Vec<f32> = (0..9 * 2 * 3)
            .map(|i| ((i * 7 % 11) as f32 - 5.0) / 10.0)
            .collect();
        b.conv2d(
            "c",
            "x",
            [3, 3],
            [1, 1],
            Padding::Same,
            Activation::Relu,
            k,
            vec![0.1, -0.2, 0.3],
        );
        b.batch_norm("bn", "c", vec![1.5, 0.5, -1.0], vec![0.25, 0.0, 1.0]);
        let g = graph_of(&b.build(&["bn"]).unwrap());
        let plan = optimize(&g).unwrap();
        assert_eq!(plan.units.len(), 1);
        assert_eq!(plan.units[0].fused_activation, Activation::Relu);
        assert!(plan.units[0].post_affine.is_some());
        let x = Tensor::new(
            TensorShape::spatial(5, 5, 2),
            (0..50).map(|i| (i as f32 * 0.37).sin()).collect(),
        );
        let fused = evaluate_plan(&plan, std::slice::from_ref(&x));
        let reference = interp::interpret(&g, &[x]).unwrap();
        for (a, b) in fused[0].data.iter().zip(&reference[0].data) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn bn_before_padded_conv_stays() {
        let mut b = ModelBuilder::new();
        b.input("x", &[4, 4, 1]);
        b.batch_norm("bn", "x", vec![2.0], vec![1.0]);
        b.conv2d(
            "c",
            "bn",
            [3, 3],
            [1, 1],
            Padding::Same,
            Activation::Linear,
            vec![1.0; 9],
            vec![0.0],
        );
        let plan = optimize(&graph_of(&b.build(&["c"]).unwrap())).unwrap();
        assert_eq!(plan.units.len(), 2);
    }

    #[test]
    fn passes_are_idempotent() {
        let mut b = ModelBuilder::new();
        b.input("x", &[4]);
        b.batch_norm("bn0", "x", vec![2.0; 4], vec![0.5; 4]);
        b.dense("d", "bn0", Activation::Linear, eye(4), vec![0.0; 4]);
        b.simple("r", act(Activation::Tanh), &["d"]);
        b.batch_norm("bn1", "r", vec![2.0; 4], vec![0.5; 4]);
        let plan = lower_to_units(&graph_of(&b.build(&["bn1"]).unwrap())).unwrap();
        let a = fuse_activation(&plan);
        assert_eq!(fuse_activation(&a), a);
        let n = fuse_batchnorm(&plan);
        assert_eq!(fuse_batchnorm(&n), n);
        assert!(a.units.len() <= plan.units.len());
        assert!(n.units.len() <= plan.units.len());
    }

    #[test]
    fn dump_has_one_line_per_unit() {
        let mut b = ModelBuilder::new();
        b.input("x", &[4]);
        b.dense("d", "x", Activation::Relu, eye(4), vec![0.0; 4]);
        b.simple("s", LayerConfig::Softmax, &["d"]);
        let plan = optimize(&graph_of(&b.build(&["s"]).unwrap())).unwrap();
        let dump = plan.dump();
        assert_eq!(dump.lines().count(), 2);
        assert!(dump.lines().next().unwrap().contains("act=relu"));
    }
}
