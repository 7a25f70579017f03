use super::manifest::*;
use super::weights::{encode_blob, load_weights, WeightStore, WeightTensor};
use super::{parse_manifest, serialize_manifest, FormatError, Model};

/// Assembles a [`Model`] in code, assigning blob offsets as weights are
/// added. Used by tests, fixture generation and small tools.
#[derive(Debug, Default)]
pub struct ModelBuilder {
    layers: Vec<LayerSpec>,
    inputs: Vec<String>,
    weights: WeightStore,
    next_offset: usize,
}

impl ModelBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> String {
        self.inputs.push(name.to_string());
        self.layer(
            name,
            LayerConfig::Input {
                shape: shape.to_vec(),
            },
            &[],
            Vec::new(),
        )
    }

    /// Adds a layer. Each weight is `(role, shape, values)`.
    pub fn layer(
        &mut self,
        name: &str,
        config: LayerConfig,
        inputs: &[&str],
        weights: Vec<(WeightRole, Vec<usize>, Vec<f32>)>,
    ) -> String {
        let mut weight_refs = Vec::with_capacity(weights.len());
        for (role, shape, data) in weights {
            let wname = format!("{name}/{}", role.as_str());
            weight_refs.push(WeightRef {
                name: wname.clone(),
                shape: shape.clone(),
                offset: self.next_offset,
                length: data.len(),
            });
            self.next_offset += 4 * data.len();
            self.weights.insert(wname, WeightTensor { shape, data });
        }
        self.layers.push(LayerSpec {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            config,
            weight_refs,
        });
        name.to_string()
    }

    pub fn dense(
        &mut self,
        name: &str,
        input: &str,
        activation: Activation,
        kernel: Vec<f32>,
        bias: Vec<f32>,
    ) -> String {
        let units = bias.len();
        let in_features = kernel.len() / units.max(1);
        self.layer(
            name,
            LayerConfig::Dense {
                units,
                activation,
                use_bias: true,
            },
            &[input],
            vec![
                (WeightRole::Kernel, vec![in_features, units], kernel),
                (WeightRole::Bias, vec![units], bias),
            ],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        input: &str,
        kernel_size: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        activation: Activation,
        kernel: Vec<f32>,
        bias: Vec<f32>,
    ) -> String {
        let filters = bias.len();
        let in_channels = kernel.len() / (kernel_size[0] * kernel_size[1] * filters.max(1));
        self.layer(
            name,
            LayerConfig::Conv2D {
                filters,
                kernel_size,
                strides,
                padding,
                activation,
                use_bias: true,
            },
            &[input],
            vec![
                (
                    WeightRole::Kernel,
                    vec![kernel_size[0], kernel_size[1], in_channels, filters],
                    kernel,
                ),
                (WeightRole::Bias, vec![filters], bias),
            ],
        )
    }

    pub fn batch_norm(
        &mut self,
        name: &str,
        input: &str,
        scale: Vec<f32>,
        offset: Vec<f32>,
    ) -> String {
        let c = scale.len();
        self.layer(
            name,
            LayerConfig::BatchNorm,
            &[input],
            vec![
                (WeightRole::Scale, vec![c], scale),
                (WeightRole::Offset, vec![c], offset),
            ],
        )
    }

    pub fn simple(&mut self, name: &str, config: LayerConfig, inputs: &[&str]) -> String {
        self.layer(name, config, inputs, Vec::new())
    }

    /// Finishes the model. The result is pushed through the same
    /// serialize/parse/load path a file goes through, so every
    /// format invariant holds.
    pub fn build(self, outputs: &[&str]) -> Result<Model, FormatError> {
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            layers: self.layers,
            input_names: self.inputs,
            output_names: outputs.iter().map(|s| s.to_string()).collect(),
        };
        let text = serialize_manifest(&manifest);
        let manifest = parse_manifest(text.as_bytes())?;
        let blob = encode_blob(&manifest, &self.weights)?;
        let weights = load_weights(&manifest, &blob)?;
        Ok(Model { manifest, weights })
    }
}
