//! Serialized graph topology (`graph.json`).
//!
//! Parameter tensors use Keras layouts: convolution kernels are
//! `[kh, kw, in, out]`, depthwise kernels `[kh, kw, in, multiplier]`.

use serde::{Deserialize, Serialize};

pub const GRAPH_FORMAT: &str = "mpox-screen-graph/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    HardSigmoid,
    HardSwish,
    Sigmoid,
    Swish,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input {
        height: usize,
        width: usize,
        channels: usize,
    },
    Rescaling {
        scale: f32,
        offset: f32,
    },
    Conv2d {
        kernel: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        dilation: [usize; 2],
        filters: usize,
        use_bias: bool,
        activation: Activation,
    },
    DepthwiseConv2d {
        kernel: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
        dilation: [usize; 2],
        multiplier: usize,
        use_bias: bool,
        activation: Activation,
    },
    BatchNorm {
        epsilon: f32,
        center: bool,
        scale: bool,
    },
    Activation {
        kind: Activation,
    },
    Relu {
        max_value: Option<f32>,
        negative_slope: f32,
        threshold: f32,
    },
    ZeroPad {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    Crop {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    MaxPool {
        pool: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    AvgPool {
        pool: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    GlobalAvgPool {
        keepdims: bool,
    },
    Add,
    Multiply,
    Concat,
    /// `inputs[0] + scale * inputs[1]`
    ScaleSum {
        scale: f32,
    },
    AddScalar {
        value: f32,
    },
    MulScalar {
        value: f32,
    },
}

impl Op {
    pub fn is_convolution(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::DepthwiseConv2d { .. })
    }

    /// Parameter names this op expects, in storage order.
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Op::Conv2d { use_bias, .. } => {
                if *use_bias {
                    vec!["kernel", "bias"]
                } else {
                    vec!["kernel"]
                }
            }
            Op::DepthwiseConv2d { use_bias, .. } => {
                if *use_bias {
                    vec!["depthwise_kernel", "bias"]
                } else {
                    vec!["depthwise_kernel"]
                }
            }
            Op::BatchNorm { center, scale, .. } => {
                let mut v = Vec::new();
                if *scale {
                    v.push("gamma");
                }
                if *center {
                    v.push("beta");
                }
                v.extend(["moving_mean", "moving_variance"]);
                v
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default)]
    pub params: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub format: String,
    pub name: String,
    pub output: String,
    pub nodes: Vec<NodeSpec>,
}

impl GraphSpec {
    pub fn parameter_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter())
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}
