//! Declarative network description, read from JSON.
//!
//! A document has exactly the keys `input`, `layers`, `attach_point`,
//! `guided_layers`, `heads`, `selective_cfg` and `supervision`; anything else
//! is rejected. Layers form a DAG in list order: `inputs` names earlier layers
//! (or `input` for the image) and defaults to the previous layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::AnchorSpec;
use crate::error::{Error, Result};
use crate::selective::SelectiveConfig;

/// Name that refers to the network input.
pub const INPUT: &str = "input";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn one() -> usize {
    1
}

fn bn_eps() -> f64 {
    1e-5
}

fn head_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        name: String,
        #[serde(default)]
        inputs: Vec<String>,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        dilation: usize,
        /// Fused ReLU on the output.
        #[serde(default)]
        relu: bool,
    },
    Deconv {
        name: String,
        #[serde(default)]
        inputs: Vec<String>,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        relu: bool,
    },
    Maxpool {
        name: String,
        #[serde(default)]
        inputs: Vec<String>,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        ceil_mode: bool,
    },
    Avgpool {
        name: String,
        #[serde(default)]
        inputs: Vec<String>,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        ceil_mode: bool,
    },
    Relu {
        name: String,
        #[serde(default)]
        inputs: Vec<String>,
    },
    Batchnorm {
        name: String,
        #[serde(default)]
        inputs: Vec<String>,
        #[serde(default = "bn_eps")]
        eps: f64,
    },
    Concat {
        name: String,
        inputs: Vec<String>,
    },
    Add {
        name: String,
        inputs: Vec<String>,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::Deconv { name, .. }
            | LayerSpec::Maxpool { name, .. }
            | LayerSpec::Avgpool { name, .. }
            | LayerSpec::Relu { name, .. }
            | LayerSpec::Batchnorm { name, .. }
            | LayerSpec::Concat { name, .. }
            | LayerSpec::Add { name, .. } => name,
        }
    }

    pub fn inputs(&self) -> &[String] {
        match self {
            LayerSpec::Conv { inputs, .. }
            | LayerSpec::Deconv { inputs, .. }
            | LayerSpec::Maxpool { inputs, .. }
            | LayerSpec::Avgpool { inputs, .. }
            | LayerSpec::Relu { inputs, .. }
            | LayerSpec::Batchnorm { inputs, .. }
            | LayerSpec::Concat { inputs, .. }
            | LayerSpec::Add { inputs, .. } => inputs,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Deconv { .. } => "deconv",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::Avgpool { .. } => "avgpool",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::Add { .. } => "add",
        }
    }
}

/// A detection head: one conv for class logits and one for box offsets,
/// both reading the `source` layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub source: String,
    /// Object classes, background excluded.
    pub num_classes: usize,
    pub anchors: AnchorSpec,
    #[serde(default = "head_kernel")]
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    Direct,
    Indirect,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Supervision::Direct),
            "indirect" => Ok(Supervision::Indirect),
            other => Err(Error::schema("strategy", format!("expected direct or indirect, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub attach_point: Option<String>,
    pub guided_layers: Vec<String>,
    pub heads: Vec<HeadSpec>,
    pub selective_cfg: Option<SelectiveConfig>,
    pub supervision: Supervision,
}

impl NetworkSpec {
    /// Parses a JSON document; errors name the offending path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path.is_empty() || path == "." { "spec".to_string() } else { path };
            Error::schema(field, e.into_inner().to_string())
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Same network without guidance: no selective module, no guided layers.
    pub fn baseline(&self) -> Self {
        Self {
            attach_point: None,
            guided_layers: Vec::new(),
            selective_cfg: None,
            ..self.clone()
        }
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }
}
