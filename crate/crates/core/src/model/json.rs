use std::collections::HashSet;

use serde_json::{json, Map, Value};

use super::manifest::*;
use super::FormatError;

type Result<T> = std::result::Result<T, FormatError>;

fn schema(path: impl Into<String>, message: impl Into<String>) -> FormatError {
    FormatError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a manifest document.
pub fn parse_manifest(bytes: &[u8]) -> Result<ModelManifest> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| FormatError::Syntax(format!("manifest is not UTF-8: {e}")))?;
    let root: Value = serde_json::from_str(text).map_err(|e| FormatError::Syntax(e.to_string()))?;
    let root = as_object(&root, "$")?;
    check_keys(
        root,
        "$",
        &["format_version", "layers", "inputs", "outputs"],
    )?;

    let version = required_uint(root, "$", "format_version")?;
    if version != FORMAT_VERSION as usize {
        return Err(schema(
            "$.format_version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }

    let layers_value = root
        .get("layers")
        .ok_or_else(|| schema("$", "missing field `layers`"))?;
    let layers_array = layers_value
        .as_array()
        .ok_or_else(|| schema("$.layers", "expected an array"))?;
    let layers = layers_array
        .iter()
        .enumerate()
        .map(|(i, v)| parse_layer(v, &format!("$.layers[{i}]")))
        .collect::<Result<Vec<_>>>()?;

    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        layers,
        input_names: string_list(root, "$", "inputs")?,
        output_names: string_list(root, "$", "outputs")?,
    };
    validate(&manifest)?;
    Ok(manifest)
}

fn validate(manifest: &ModelManifest) -> Result<()> {
    let mut names = HashSet::new();
    for (i, layer) in manifest.layers.iter().enumerate() {
        if layer.name.is_empty() {
            return Err(schema(format!("$.layers[{i}].name"), "layer name is empty"));
        }
        if !names.insert(layer.name.as_str()) {
            return Err(schema(
                format!("$.layers[{i}].name"),
                format!("duplicate layer name `{}`", layer.name),
            ));
        }
    }

    let mut weight_names = HashSet::new();
    for (i, layer) in manifest.layers.iter().enumerate() {
        let path = format!("$.layers[{i}]");
        let kind = layer.kind();
        let arity_ok = match kind {
            LayerKind::Input => layer.inputs.is_empty(),
            LayerKind::Add | LayerKind::Concatenate => layer.inputs.len() >= 2,
            _ => layer.inputs.len() == 1,
        };
        if !arity_ok {
            return Err(schema(
                format!("{path}.inputs"),
                format!(
                    "{kind} layer `{}` has {} inputs",
                    layer.name,
                    layer.inputs.len()
                ),
            ));
        }
        for input in &layer.inputs {
            if !names.contains(input.as_str()) {
                return Err(FormatError::DanglingReference {
                    name: input.clone(),
                    context: format!("inputs of layer `{}`", layer.name),
                });
            }
        }
        if let LayerConfig::Input { shape } = &layer.config {
            if !(shape.len() == 1 || shape.len() == 3) || shape.contains(&0) {
                return Err(schema(
                    format!("{path}.config.shape"),
                    "input shape must be (features) or (height, width, channels) with positive dims",
                ));
            }
        }

        let mut roles = HashSet::new();
        for (j, w) in layer.weight_refs.iter().enumerate() {
            let wpath = format!("{path}.weights[{j}]");
            let role = w
                .role()
                .filter(|r| kind.required_roles(true).contains(r))
                .ok_or_else(|| {
                    schema(
                        format!("{wpath}.name"),
                        format!("weight `{}` has no valid role for a {kind} layer", w.name),
                    )
                })?;
            if !roles.insert(role) {
                return Err(schema(&wpath, format!("second `{}` weight", role.as_str())));
            }
            if !weight_names.insert(w.name.as_str()) {
                return Err(schema(
                    &wpath,
                    format!("duplicate weight name `{}`", w.name),
                ));
            }
            if w.shape.is_empty() || w.shape.contains(&0) {
                return Err(schema(
                    format!("{wpath}.shape"),
                    "shape dims must be positive",
                ));
            }
            if w.shape.iter().product::<usize>() != w.length {
                return Err(schema(
                    format!("{wpath}.length"),
                    format!("length {} does not match shape {:?}", w.length, w.shape),
                ));
            }
            if w.offset % 4 != 0 {
                return Err(schema(
                    format!("{wpath}.offset"),
                    "offset is not 4-byte aligned",
                ));
            }
        }
    }

    for (list, key) in [
        (&manifest.input_names, "inputs"),
        (&manifest.output_names, "outputs"),
    ] {
        for name in list {
            if !names.contains(name.as_str()) {
                return Err(FormatError::DanglingReference {
                    name: name.clone(),
                    context: format!("model {key}"),
                });
            }
        }
    }
    if manifest.output_names.is_empty() {
        return Err(schema("$.outputs", "model declares no outputs"));
    }
    for layer in &manifest.layers {
        let is_input = layer.kind() == LayerKind::Input;
        let listed = manifest.input_names.contains(&layer.name);
        if is_input != listed {
            return Err(schema(
                "$.inputs",
                format!(
                    "`{}` must be listed in inputs if and only if it is an Input layer",
                    layer.name
                ),
            ));
        }
    }
    Ok(())
}

fn parse_layer(value: &Value, path: &str) -> Result<LayerSpec> {
    let obj = as_object(value, path)?;
    check_keys(obj, path, &["name", "kind", "inputs", "config", "weights"])?;
    let name = required_str(obj, path, "name")?.to_string();
    let kind_name = required_str(obj, path, "kind")?;
    let kind = LayerKind::from_name(kind_name).ok_or_else(|| FormatError::UnknownLayerKind {
        layer: name.clone(),
        kind: kind_name.to_string(),
    })?;
    let inputs = match obj.get("inputs") {
        Some(_) => string_list(obj, path, "inputs")?,
        None => Vec::new(),
    };
    let empty = Map::new();
    let config_path = format!("{path}.config");
    let config_obj = match obj.get("config") {
        Some(v) => as_object(v, &config_path)?,
        None => &empty,
    };
    let config = parse_config(kind, config_obj, &config_path)?;
    let weight_refs = match obj.get("weights") {
        None => Vec::new(),
        Some(v) => v
            .as_array()
            .ok_or_else(|| schema(format!("{path}.weights"), "expected an array"))?
            .iter()
            .enumerate()
            .map(|(i, w)| parse_weight_ref(w, &format!("{path}.weights[{i}]")))
            .collect::<Result<_>>()?,
    };
    Ok(LayerSpec {
        name,
        inputs,
        config,
        weight_refs,
    })
}

fn parse_config(kind: LayerKind, obj: &Map<String, Value>, path: &str) -> Result<LayerConfig> {
    let config = match kind {
        LayerKind::Input => {
            check_keys(obj, path, &["shape"])?;
            LayerConfig::Input {
                shape: uint_list(obj, path, "shape")?,
            }
        }
        LayerKind::Dense => {
            check_keys(obj, path, &["units", "activation", "use_bias"])?;
            LayerConfig::Dense {
                units: positive(required_uint(obj, path, "units")?, path, "units")?,
                activation: activation(obj, path)?,
                use_bias: optional_bool(obj, path, "use_bias", true)?,
            }
        }
        LayerKind::Conv2D => {
            check_keys(
                obj,
                path,
                &[
                    "filters",
                    "kernel_size",
                    "strides",
                    "padding",
                    "activation",
                    "use_bias",
                ],
            )?;
            LayerConfig::Conv2D {
                filters: positive(required_uint(obj, path, "filters")?, path, "filters")?,
                kernel_size: required_pair(obj, path, "kernel_size")?,
                strides: optional_pair(obj, path, "strides", [1, 1])?,
                padding: padding(obj, path)?,
                activation: activation(obj, path)?,
                use_bias: optional_bool(obj, path, "use_bias", true)?,
            }
        }
        LayerKind::DepthwiseConv2D => {
            check_keys(
                obj,
                path,
                &[
                    "kernel_size",
                    "strides",
                    "padding",
                    "activation",
                    "use_bias",
                ],
            )?;
            LayerConfig::DepthwiseConv2D {
                kernel_size: required_pair(obj, path, "kernel_size")?,
                strides: optional_pair(obj, path, "strides", [1, 1])?,
                padding: padding(obj, path)?,
                activation: activation(obj, path)?,
                use_bias: optional_bool(obj, path, "use_bias", true)?,
            }
        }
        LayerKind::MaxPool2D | LayerKind::AvgPool2D => {
            check_keys(obj, path, &["pool_size", "strides", "padding"])?;
            let pool_size = required_pair(obj, path, "pool_size")?;
            let strides = optional_pair(obj, path, "strides", pool_size)?;
            let padding = padding(obj, path)?;
            if kind == LayerKind::MaxPool2D {
                LayerConfig::MaxPool2D {
                    pool_size,
                    strides,
                    padding,
                }
            } else {
                LayerConfig::AvgPool2D {
                    pool_size,
                    strides,
                    padding,
                }
            }
        }
        LayerKind::BatchNorm => {
            check_keys(obj, path, &[])?;
            LayerConfig::BatchNorm
        }
        LayerKind::Activation => {
            check_keys(obj, path, &["activation"])?;
            if !obj.contains_key("activation") {
                return Err(schema(path, "missing field `activation`"));
            }
            LayerConfig::Activation {
                activation: activation(obj, path)?,
            }
        }
        LayerKind::Softmax => {
            check_keys(obj, path, &["axis"])?;
            last_axis_only(obj, path)?;
            LayerConfig::Softmax
        }
        LayerKind::Flatten => {
            check_keys(obj, path, &[])?;
            LayerConfig::Flatten
        }
        LayerKind::UpSample2D => {
            check_keys(obj, path, &["size"])?;
            LayerConfig::UpSample2D {
                size: optional_pair(obj, path, "size", [2, 2])?,
            }
        }
        LayerKind::Add => {
            check_keys(obj, path, &[])?;
            LayerConfig::Add
        }
        LayerKind::Concatenate => {
            check_keys(obj, path, &["axis"])?;
            last_axis_only(obj, path)?;
            LayerConfig::Concatenate
        }
    };
    Ok(config)
}

fn parse_weight_ref(value: &Value, path: &str) -> Result<WeightRef> {
    let obj = as_object(value, path)?;
    check_keys(obj, path, &["name", "shape", "offset", "length"])?;
    Ok(WeightRef {
        name: required_str(obj, path, "name")?.to_string(),
        shape: uint_list(obj, path, "shape")?,
        offset: required_uint(obj, path, "offset")?,
        length: required_uint(obj, path, "length")?,
    })
}

fn as_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| schema(path, "expected an object"))
}

fn check_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(key) => Err(schema(path, format!("unknown key `{key}`"))),
        None => Ok(()),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| schema(path, format!("missing field `{key}`")))
}

fn required_str<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a str> {
    field(obj, path, key)?
        .as_str()
        .ok_or_else(|| schema(format!("{path}.{key}"), "expected a string"))
}

fn to_uint(value: &Value, path: &str) -> Result<usize> {
    value
        .as_u64()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| schema(path, "expected a non-negative integer"))
}

fn required_uint(obj: &Map<String, Value>, path: &str, key: &str) -> Result<usize> {
    to_uint(field(obj, path, key)?, &format!("{path}.{key}"))
}

fn positive(v: usize, path: &str, key: &str) -> Result<usize> {
    if v == 0 {
        Err(schema(format!("{path}.{key}"), "must be positive"))
    } else {
        Ok(v)
    }
}

fn uint_list(obj: &Map<String, Value>, path: &str, key: &str) -> Result<Vec<usize>> {
    let p = format!("{path}.{key}");
    field(obj, path, key)?
        .as_array()
        .ok_or_else(|| schema(&p, "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| to_uint(v, &format!("{p}[{i}]")))
        .collect()
}

fn string_list(obj: &Map<String, Value>, path: &str, key: &str) -> Result<Vec<String>> {
    let p = format!("{path}.{key}");
    field(obj, path, key)?
        .as_array()
        .ok_or_else(|| schema(&p, "expected an array"))?
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(format!("{p}[{i}]"), "expected a string"))
        })
        .collect()
}

fn pair(value: &Value, path: &str) -> Result<[usize; 2]> {
    let items = value
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| schema(path, "expected a [height, width] pair"))?;
    let a = to_uint(&items[0], path)?;
    let b = to_uint(&items[1], path)?;
    if a == 0 || b == 0 {
        return Err(schema(path, "pair entries must be positive"));
    }
    Ok([a, b])
}

fn required_pair(obj: &Map<String, Value>, path: &str, key: &str) -> Result<[usize; 2]> {
    pair(field(obj, path, key)?, &format!("{path}.{key}"))
}

fn optional_pair(
    obj: &Map<String, Value>,
    path: &str,
    key: &str,
    default: [usize; 2],
) -> Result<[usize; 2]> {
    match obj.get(key) {
        Some(v) => pair(v, &format!("{path}.{key}")),
        None => Ok(default),
    }
}

fn optional_bool(obj: &Map<String, Value>, path: &str, key: &str, default: bool) -> Result<bool> {
    match obj.get(key) {
        Some(v) => v
            .as_bool()
            .ok_or_else(|| schema(format!("{path}.{key}"), "expected a boolean")),
        None => Ok(default),
    }
}

fn activation(obj: &Map<String, Value>, path: &str) -> Result<Activation> {
    match obj.get("activation") {
        None => Ok(Activation::Linear),
        Some(v) => {
            let p = format!("{path}.activation");
            let name = v.as_str().ok_or_else(|| schema(&p, "expected a string"))?;
            Activation::from_name(name)
                .ok_or_else(|| schema(&p, format!("unknown activation `{name}`")))
        }
    }
}

fn padding(obj: &Map<String, Value>, path: &str) -> Result<Padding> {
    match obj.get("padding") {
        None => Ok(Padding::Valid),
        Some(v) => match v.as_str() {
            Some("same") => Ok(Padding::Same),
            Some("valid") => Ok(Padding::Valid),
            _ => Err(schema(
                format!("{path}.padding"),
                "expected \"same\" or \"valid\"",
            )),
        },
    }
}

fn last_axis_only(obj: &Map<String, Value>, path: &str) -> Result<()> {
    match obj.get("axis") {
        None => Ok(()),
        Some(v) if v.as_i64() == Some(-1) => Ok(()),
        Some(_) => Err(schema(format!("{path}.axis"), "only axis -1 is supported")),
    }
}

/// Renders a manifest as pretty-printed JSON. Every optional config key is
/// written out explicitly.
pub fn serialize_manifest(manifest: &ModelManifest) -> String {
    let layers: Vec<Value> = manifest.layers.iter().map(layer_to_json).collect();
    let root = json!({
        "format_version": manifest.format_version,
        "layers": layers,
        "inputs": manifest.input_names,
        "outputs": manifest.output_names,
    });
    let mut text = serde_json::to_string_pretty(&root).expect("manifest values are serializable");
    text.push('\n');
    text
}

fn layer_to_json(layer: &LayerSpec) -> Value {
    let config = match &layer.config {
        LayerConfig::Input { shape } => json!({ "shape": shape }),
        LayerConfig::Dense {
            units,
            activation,
            use_bias,
        } => json!({
            "units": units,
            "activation": activation.as_str(),
            "use_bias": use_bias,
        }),
        LayerConfig::Conv2D {
            filters,
            kernel_size,
            strides,
            padding,
            activation,
            use_bias,
        } => json!({
            "filters": filters,
            "kernel_size": kernel_size,
            "strides": strides,
            "padding": padding.as_str(),
            "activation": activation.as_str(),
            "use_bias": use_bias,
        }),
        LayerConfig::DepthwiseConv2D {
            kernel_size,
            strides,
            padding,
            activation,
            use_bias,
        } => json!({
            "kernel_size": kernel_size,
            "strides": strides,
            "padding": padding.as_str(),
            "activation": activation.as_str(),
            "use_bias": use_bias,
        }),
        LayerConfig::MaxPool2D {
            pool_size,
            strides,
            padding,
        }
        | LayerConfig::AvgPool2D {
            pool_size,
            strides,
            padding,
        } => json!({
            "pool_size": pool_size,
            "strides": strides,
            "padding": padding.as_str(),
        }),
        LayerConfig::Activation { activation } => json!({ "activation": activation.as_str() }),
        LayerConfig::UpSample2D { size } => json!({ "size": size }),
        LayerConfig::BatchNorm
        | LayerConfig::Softmax
        | LayerConfig::Flatten
        | LayerConfig::Add
        | LayerConfig::Concatenate => json!({}),
    };
    let weights: Vec<Value> = layer
        .weight_refs
        .iter()
        .map(|w| {
            json!({
                "name": w.name,
                "shape": w.shape,
                "offset": w.offset,
                "length": w.length,
            })
        })
        .collect();
    json!({
        "name": layer.name,
        "kind": layer.kind().as_str(),
        "inputs": layer.inputs,
        "config": config,
        "weights": weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DENSE: &str = r#"{
        "format_version": 1,
        "inputs": ["in"],
        "outputs": ["fc"],
        "layers": [
            {"name": "in", "kind": "Input", "config": {"shape": [8]}},
            {"name": "fc", "kind": "Dense", "inputs": ["in"],
             "config": {"units": 4, "activation": "relu"},
             "weights": [
                {"name": "fc/kernel", "shape": [8, 4], "offset": 0, "length": 32},
                {"name": "fc/bias", "shape": [4], "offset": 128, "length": 4}
             ]}
        ]
    }"#;

    #[test]
    fn minimal_dense_manifest() {
        let m = parse_manifest(DENSE.as_bytes()).unwrap();
        assert_eq!(m.layers.len(), 2);
        let fc = &m.layers[1];
        assert_eq!(
            fc.config,
            LayerConfig::Dense {
                units: 4,
                activation: Activation::Relu,
                use_bias: true
            }
        );
        assert_eq!(fc.weight(WeightRole::Kernel).unwrap().shape, vec![8, 4]);
        assert_eq!(fc.weight(WeightRole::Bias).unwrap().shape, vec![4]);
    }

    #[test]
    fn dangling_input_reference() {
        let text = DENSE.replace(
            r#""inputs": ["in"],
             "config""#,
            r#""inputs": ["conv_999"],
             "config""#,
        );
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::DanglingReference { name, .. }) if name == "conv_999"
        ));
    }

    #[test]
    fn dangling_output_reference() {
        let text = DENSE.replace(r#""outputs": ["fc"]"#, r#""outputs": ["nope"]"#);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::DanglingReference { .. })
        ));
    }

    #[test]
    fn unknown_kind_and_keys() {
        let text = DENSE.replace(r#""kind": "Dense""#, r#""kind": "LSTM""#);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::UnknownLayerKind { kind, .. }) if kind == "LSTM"
        ));
        let text = DENSE.replace(r#""units": 4"#, r#""units": 4, "dropout": 0.5"#);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::Schema { message, .. }) if message.contains("dropout")
        ));
    }

    #[test]
    fn syntax_and_schema_errors() {
        assert!(matches!(
            parse_manifest(b"{\"format_version\": 1,"),
            Err(FormatError::Syntax(_))
        ));
        assert!(matches!(
            parse_manifest(&[0xff, 0xfe, 0x00]),
            Err(FormatError::Syntax(_))
        ));
        let text = DENSE.replace(r#""units": 4"#, r#""units": "four""#);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::Schema { .. })
        ));
        let text = DENSE.replace(r#""format_version": 1"#, r#""format_version": 2"#);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::Schema { .. })
        ));
    }

    #[test]
    fn weight_ref_invariants() {
        let text = DENSE.replace(r#""length": 32"#, r#""length": 31"#);
        assert!(parse_manifest(text.as_bytes()).is_err());
        let text = DENSE.replace(r#""offset": 128"#, r#""offset": 130"#);
        assert!(parse_manifest(text.as_bytes()).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let text = DENSE.replace(r#""name": "fc", "kind""#, r#""name": "in", "kind""#);
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::Schema { .. })
        ));
    }

    #[test]
    fn arity_checked() {
        let text = r#"{"format_version": 1, "inputs": ["a"], "outputs": ["s"], "layers": [
            {"name": "a", "kind": "Input", "config": {"shape": [4]}},
            {"name": "s", "kind": "Add", "inputs": ["a"]}]}"#;
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(FormatError::Schema { .. })
        ));
    }

    #[test]
    fn serialize_round_trip() {
        let m = parse_manifest(DENSE.as_bytes()).unwrap();
        let again = parse_manifest(serialize_manifest(&m).as_bytes()).unwrap();
        assert_eq!(m, again);
    }
}
