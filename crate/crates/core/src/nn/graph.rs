//! Compiled inference graph with input-gradient backpropagation.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::ops::{self, Tensor, Window};
use super::spec::{Activation, GraphSpec, NodeSpec, Op, GRAPH_FORMAT};
use crate::error::{Error, Result};

type Shape = (usize, usize, usize);

#[derive(Debug, Clone)]
enum Kind {
    Input,
    Affine { scale: Vec<f32>, shift: Vec<f32> },
    Conv { kernel: Vec<f32>, bias: Option<Vec<f32>>, win: Window },
    Depthwise { kernel: Vec<f32>, bias: Option<Vec<f32>>, win: Window, multiplier: usize },
    Act(Activation),
    Relu { max_value: Option<f32>, negative_slope: f32, threshold: f32 },
    Pad { top: usize, left: usize },
    Crop { top: usize, left: usize },
    MaxPool(Window),
    AvgPool(Window),
    GlobalAvgPool,
    Add,
    Multiply,
    Concat,
    ScaleSum(f32),
    AddScalar(f32),
    MulScalar(f32),
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    inputs: Vec<usize>,
    kind: Kind,
    shape: Shape,
}

/// Executable network built from a [`GraphSpec`] and its raw parameters.
///
/// Raw parameters are retained so the network can be re-serialized and
/// digested; batch normalization is folded into per-channel affine maps and
/// convolutions with a fused activation are split into two nodes, the
/// activation keeping the original layer name.
#[derive(Debug, Clone)]
pub struct Graph {
    spec: GraphSpec,
    params: Vec<Vec<f32>>,
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    output: usize,
    last_use: Vec<usize>,
}

/// Split a flat little-endian f32 buffer into the spec's parameter tensors.
pub fn split_params(spec: &GraphSpec, bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let total = spec.parameter_count();
    if bytes.len() != total * 4 {
        return Err(Error::Graph(format!(
            "weights hold {} bytes, topology needs {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    Ok(spec
        .nodes
        .iter()
        .flat_map(|n| n.params.iter())
        .map(|(_, shape)| values.by_ref().take(shape.iter().product()).collect())
        .collect())
}

pub fn params_to_bytes(params: &[Vec<f32>]) -> Vec<u8> {
    params.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
}

/// SHA-256 over the parameter bytes, hex encoded.
pub fn params_digest(params: &[Vec<f32>]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Graph {
    /// Compile `spec`. `input_hw` overrides the declared input resolution.
    pub fn new(spec: GraphSpec, params: Vec<Vec<f32>>, input_hw: Option<(usize, usize)>) -> Result<Self> {
        if spec.format != GRAPH_FORMAT {
            return Err(Error::Graph(format!("unsupported graph format {:?}", spec.format)));
        }
        let n_tensors: usize = spec.nodes.iter().map(|n| n.params.len()).sum();
        if params.len() != n_tensors {
            return Err(Error::Graph(format!("expected {n_tensors} parameter tensors, got {}", params.len())));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(spec.nodes.len());
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut cursor = 0;
        for ns in &spec.nodes {
            let p = &params[cursor..cursor + ns.params.len()];
            cursor += ns.params.len();
            check_param_names(ns)?;
            for ((pname, shape), values) in ns.params.iter().zip(p) {
                if shape.iter().product::<usize>() != values.len() {
                    return Err(Error::Graph(format!("{}: parameter {pname} has wrong length", ns.name)));
                }
            }
            let inputs = ns
                .inputs
                .iter()
                .map(|i| {
                    index
                        .get(i)
                        .copied()
                        .ok_or_else(|| Error::Graph(format!("{}: unknown or later input {i:?}", ns.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            let in_shapes: Vec<Shape> = inputs.iter().map(|&i| nodes[i].shape).collect();
            let compiled = compile(ns, &inputs, &in_shapes, p, input_hw)?;
            for mut node in compiled {
                if node.inputs.is_empty() && !matches!(node.kind, Kind::Input) {
                    node.inputs = vec![nodes.len() - 1];
                }
                if index.insert(node.name.clone(), nodes.len()).is_some() {
                    return Err(Error::Graph(format!("duplicate node name {:?}", node.name)));
                }
                nodes.push(node);
            }
        }
        let output = *index
            .get(&spec.output)
            .ok_or_else(|| Error::Graph(format!("output node {:?} missing", spec.output)))?;
        if !matches!(nodes.first().map(|n| &n.kind), Some(Kind::Input))
            || nodes.iter().filter(|n| matches!(n.kind, Kind::Input)).count() != 1
        {
            return Err(Error::Graph("graph must start with its single input node".into()));
        }
        let mut last_use: Vec<usize> = (0..nodes.len()).collect();
        for (i, n) in nodes.iter().enumerate() {
            for &j in &n.inputs {
                last_use[j] = last_use[j].max(i);
            }
        }
        Ok(Self {
            spec,
            params,
            nodes,
            index,
            output,
            last_use,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn digest(&self) -> String {
        params_digest(&self.params)
    }

    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes[self.output].shape
    }

    pub fn output_name(&self) -> &str {
        &self.nodes[self.output].name
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node_shape(&self, node: usize) -> Shape {
        self.nodes[node].shape
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    /// Name of the last node (in execution order) that is a convolution or
    /// the activation applied to one.
    pub fn last_conv_name(&self) -> Option<&str> {
        let mut last = None;
        for (i, n) in self.nodes.iter().enumerate().take(self.output + 1) {
            if matches!(n.kind, Kind::Conv { .. } | Kind::Depthwise { .. }) {
                last = Some(i);
            }
        }
        let i = last?;
        // a fused activation node directly follows its convolution
        let follow = self.nodes.get(i + 1).filter(|n| n.inputs == [i] && matches!(n.kind, Kind::Act(_)));
        Some(follow.map_or(&self.nodes[i].name, |n| &n.name))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            let (h, w, c) = self.input_shape();
            return Err(Error::Shape {
                expected: format!("{h}x{w}x{c}"),
                actual: format!("{}x{}x{}", x.h, x.w, x.c),
            });
        }
        Ok(())
    }

    /// Run the network, releasing intermediates as soon as possible.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.output + 1];
        values[0] = Some(x.clone());
        for i in 1..=self.output {
            let y = self.eval(i, &values);
            for &j in &self.nodes[i].inputs {
                if self.last_use[j] <= i && j != self.output {
                    values[j] = None;
                }
            }
            values[i] = Some(y);
        }
        Ok(values[self.output].take().expect("output evaluated"))
    }

    /// Run the network keeping every intermediate value.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.output + 1];
        values[0] = Some(x.clone());
        for i in 1..=self.output {
            values[i] = Some(self.eval(i, &values));
        }
        Ok(values.into_iter().map(|v| v.expect("evaluated")).collect())
    }

    fn eval(&self, i: usize, values: &[Option<Tensor>]) -> Tensor {
        let node = &self.nodes[i];
        let arg = |k: usize| values[node.inputs[k]].as_ref().expect("input computed");
        let (h, w, c) = node.shape;
        match &node.kind {
            Kind::Input => unreachable!("input is not evaluated"),
            Kind::Affine { scale, shift } => {
                let mut y = arg(0).clone();
                for px in y.data.chunks_exact_mut(c) {
                    for ((v, a), b) in px.iter_mut().zip(scale).zip(shift) {
                        *v = *v * a + b;
                    }
                }
                y
            }
            Kind::Conv { kernel, bias, win } => ops::conv2d(arg(0), kernel, bias.as_deref(), win, c),
            Kind::Depthwise {
                kernel,
                bias,
                win,
                multiplier,
            } => ops::depthwise_conv2d(arg(0), kernel, bias.as_deref(), win, *multiplier),
            Kind::Act(kind) => map(arg(0), |v| ops::activation(*kind, v)),
            Kind::Relu {
                max_value,
                negative_slope,
                threshold,
            } => map(arg(0), |v| ops::relu_general(v, *max_value, *negative_slope, *threshold)),
            Kind::Pad { top, left } => {
                let x = arg(0);
                let mut y = Tensor::zeros(h, w, c);
                for r in 0..x.h {
                    let dst = ((r + top) * w + left) * c;
                    y.data[dst..dst + x.w * c].copy_from_slice(&x.data[r * x.w * c..(r + 1) * x.w * c]);
                }
                y
            }
            Kind::Crop { top, left } => {
                let x = arg(0);
                let mut y = Tensor::zeros(h, w, c);
                for r in 0..h {
                    let src = ((r + top) * x.w + left) * c;
                    y.data[r * w * c..(r + 1) * w * c].copy_from_slice(&x.data[src..src + w * c]);
                }
                y
            }
            Kind::MaxPool(win) => ops::max_pool(arg(0), win),
            Kind::AvgPool(win) => ops::avg_pool(arg(0), win),
            Kind::GlobalAvgPool => ops::global_avg_pool(arg(0)),
            Kind::Add | Kind::Multiply | Kind::ScaleSum(_) => {
                let mut y = Tensor::zeros(h, w, c);
                let n = y.data.len();
                let first = arg(0);
                for (idx, v) in y.data.iter_mut().enumerate() {
                    *v = ops::bcast_get(first, idx);
                }
                for k in 1..node.inputs.len() {
                    let t = arg(k);
                    match node.kind {
                        Kind::Add => (0..n).for_each(|i| y.data[i] += ops::bcast_get(t, i)),
                        Kind::Multiply => (0..n).for_each(|i| y.data[i] *= ops::bcast_get(t, i)),
                        Kind::ScaleSum(s) => (0..n).for_each(|i| y.data[i] += s * ops::bcast_get(t, i)),
                        _ => unreachable!(),
                    }
                }
                y
            }
            Kind::Concat => {
                let mut y = Tensor::zeros(h, w, c);
                let mut off = 0;
                for k in 0..node.inputs.len() {
                    let t = arg(k);
                    for (dst, src) in y.data.chunks_exact_mut(c).zip(t.data.chunks_exact(t.c)) {
                        dst[off..off + t.c].copy_from_slice(src);
                    }
                    off += t.c;
                }
                y
            }
            Kind::AddScalar(s) => map(arg(0), |v| v + s),
            Kind::MulScalar(s) => map(arg(0), |v| v * s),
        }
    }

    /// Gradient of a scalar function of node `from` with respect to node
    /// `to`, given `grad` = d f / d value(from) and a full forward trace.
    pub fn backward(&self, trace: &[Tensor], from: usize, grad: Tensor, to: usize) -> Result<Tensor> {
        if to > from || from > self.output || trace.len() <= from {
            return Err(Error::Graph("invalid backward range".into()));
        }
        if grad.shape() != self.nodes[from].shape {
            return Err(Error::Graph("gradient shape does not match node".into()));
        }
        let mut reach = vec![false; from + 1];
        reach[to] = true;
        for i in to + 1..=from {
            reach[i] = self.nodes[i].inputs.iter().any(|&j| reach[j]);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; from + 1];
        grads[from] = Some(grad);
        for i in (to + 1..=from).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !reach[i] {
                continue;
            }
            let node = &self.nodes[i];
            for (k, dx) in self.input_grads(i, &g, trace).into_iter().enumerate() {
                let j = node.inputs[k];
                if !reach[j] {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.data.iter_mut().zip(&dx.data).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(grads[to].take().unwrap_or_else(|| {
            let (h, w, c) = self.nodes[to].shape;
            Tensor::zeros(h, w, c)
        }))
    }

    fn input_grads(&self, i: usize, g: &Tensor, trace: &[Tensor]) -> Vec<Tensor> {
        let node = &self.nodes[i];
        let x = |k: usize| &trace[node.inputs[k]];
        let (h, w, c) = node.shape;
        match &node.kind {
            Kind::Input => Vec::new(),
            Kind::Affine { scale, .. } => {
                let mut d = g.clone();
                for px in d.data.chunks_exact_mut(c) {
                    px.iter_mut().zip(scale).for_each(|(v, a)| *v *= a);
                }
                vec![d]
            }
            Kind::Conv { kernel, win, .. } => vec![ops::conv2d_backward(g, kernel, win, x(0).shape())],
            Kind::Depthwise {
                kernel,
                win,
                multiplier,
                ..
            } => vec![ops::depthwise_conv2d_backward(g, kernel, win, x(0).shape(), *multiplier)],
            Kind::Act(kind) => vec![zip_map(g, x(0), |gv, xv| gv * ops::activation_grad(*kind, xv))],
            Kind::Relu {
                max_value,
                negative_slope,
                threshold,
            } => vec![zip_map(g, x(0), |gv, xv| {
                gv * ops::relu_general_grad(xv, *max_value, *negative_slope, *threshold)
            })],
            Kind::Pad { top, left } => {
                let s = x(0).shape();
                let mut d = Tensor::zeros(s.0, s.1, s.2);
                for r in 0..s.0 {
                    let src = ((r + top) * w + left) * c;
                    d.data[r * s.1 * c..(r + 1) * s.1 * c].copy_from_slice(&g.data[src..src + s.1 * c]);
                }
                vec![d]
            }
            Kind::Crop { top, left } => {
                let s = x(0).shape();
                let mut d = Tensor::zeros(s.0, s.1, s.2);
                for r in 0..h {
                    let dst = ((r + top) * s.1 + left) * c;
                    d.data[dst..dst + w * c].copy_from_slice(&g.data[r * w * c..(r + 1) * w * c]);
                }
                vec![d]
            }
            Kind::MaxPool(win) => vec![ops::max_pool_backward(g, x(0), win)],
            Kind::AvgPool(win) => vec![ops::avg_pool_backward(g, x(0).shape(), win)],
            Kind::GlobalAvgPool => vec![ops::global_avg_pool_backward(g, x(0).shape())],
            Kind::Add | Kind::ScaleSum(_) => (0..node.inputs.len())
                .map(|k| {
                    let s = if k > 0 {
                        match node.kind {
                            Kind::ScaleSum(s) => s,
                            _ => 1.0,
                        }
                    } else {
                        1.0
                    };
                    let full: Vec<f32> = g.data.iter().map(|v| v * s).collect();
                    ops::reduce_to(full, x(k).shape(), node.shape)
                })
                .collect(),
            Kind::Multiply => (0..node.inputs.len())
                .map(|k| {
                    let full: Vec<f32> = (0..g.data.len())
                        .map(|idx| {
                            let mut v = g.data[idx];
                            for o in (0..node.inputs.len()).filter(|&o| o != k) {
                                v *= ops::bcast_get(x(o), idx);
                            }
                            v
                        })
                        .collect();
                    ops::reduce_to(full, x(k).shape(), node.shape)
                })
                .collect(),
            Kind::Concat => {
                let mut off = 0;
                (0..node.inputs.len())
                    .map(|k| {
                        let s = x(k).shape();
                        let mut d = Tensor::zeros(s.0, s.1, s.2);
                        for (dst, src) in d.data.chunks_exact_mut(s.2).zip(g.data.chunks_exact(c)) {
                            dst.copy_from_slice(&src[off..off + s.2]);
                        }
                        off += s.2;
                        d
                    })
                    .collect()
            }
            Kind::AddScalar(_) => vec![g.clone()],
            Kind::MulScalar(s) => vec![map(g, |v| v * s)],
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        h: x.h,
        w: x.w,
        c: x.c,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor {
        h: g.h,
        w: g.w,
        c: g.c,
        data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

fn check_param_names(ns: &NodeSpec) -> Result<()> {
    let want = ns.op.param_names();
    let got: Vec<&str> = ns.params.iter().map(|(n, _)| n.as_str()).collect();
    if want != got {
        return Err(Error::Graph(format!("{}: expected parameters {want:?}, found {got:?}", ns.name)));
    }
    Ok(())
}

fn arity(ns: &NodeSpec, in_shapes: &[Shape], n: usize) -> Result<()> {
    if in_shapes.len() != n {
        return Err(Error::Graph(format!("{}: expected {n} inputs, found {}", ns.name, in_shapes.len())));
    }
    Ok(())
}

fn expect_shape(ns: &NodeSpec, k: usize, want: &[usize]) -> Result<()> {
    if ns.params[k].1 != want {
        return Err(Error::Graph(format!(
            "{}: parameter {} has shape {:?}, expected {want:?}",
            ns.name, ns.params[k].0, ns.params[k].1
        )));
    }
    Ok(())
}

fn compile(
    ns: &NodeSpec,
    inputs: &[usize],
    in_shapes: &[Shape],
    p: &[Vec<f32>],
    input_hw: Option<(usize, usize)>,
) -> Result<Vec<Node>> {
    let single = |kind: Kind, shape: Shape| {
        vec![Node {
            name: ns.name.clone(),
            inputs: inputs.to_vec(),
            kind,
            shape,
        }]
    };
    if !matches!(ns.op, Op::Input { .. }) && in_shapes.is_empty() {
        return Err(Error::Graph(format!("{}: missing inputs", ns.name)));
    }
    let s0 = in_shapes.first().copied().unwrap_or((0, 0, 0));
    Ok(match &ns.op {
        Op::Input {
            height,
            width,
            channels,
        } => {
            arity(ns, in_shapes, 0)?;
            let (h, w) = input_hw.unwrap_or((*height, *width));
            if h == 0 || w == 0 || *channels == 0 {
                return Err(Error::Graph("empty input".into()));
            }
            single(Kind::Input, (h, w, *channels))
        }
        Op::Rescaling { scale, offset } => {
            arity(ns, in_shapes, 1)?;
            single(
                Kind::Affine {
                    scale: vec![*scale; s0.2],
                    shift: vec![*offset; s0.2],
                },
                s0,
            )
        }
        Op::Conv2d {
            kernel,
            strides,
            padding,
            dilation,
            filters,
            use_bias,
            activation,
        } => {
            arity(ns, in_shapes, 1)?;
            expect_shape(ns, 0, &[kernel[0], kernel[1], s0.2, *filters])?;
            if *use_bias {
                expect_shape(ns, 1, &[*filters])?;
            }
            let win = Window::new(s0.0, s0.1, *kernel, *strides, *dilation, *padding)?;
            let kind = Kind::Conv {
                kernel: p[0].clone(),
                bias: use_bias.then(|| p[1].clone()),
                win,
            };
            with_activation(ns, inputs, kind, (win.out_h, win.out_w, *filters), *activation)
        }
        Op::DepthwiseConv2d {
            kernel,
            strides,
            padding,
            dilation,
            multiplier,
            use_bias,
            activation,
        } => {
            arity(ns, in_shapes, 1)?;
            expect_shape(ns, 0, &[kernel[0], kernel[1], s0.2, *multiplier])?;
            let cout = s0.2 * multiplier;
            if *use_bias {
                expect_shape(ns, 1, &[cout])?;
            }
            let win = Window::new(s0.0, s0.1, *kernel, *strides, *dilation, *padding)?;
            let kind = Kind::Depthwise {
                kernel: p[0].clone(),
                bias: use_bias.then(|| p[1].clone()),
                win,
                multiplier: *multiplier,
            };
            with_activation(ns, inputs, kind, (win.out_h, win.out_w, cout), *activation)
        }
        Op::BatchNorm { epsilon, center, scale } => {
            arity(ns, in_shapes, 1)?;
            for k in 0..ns.params.len() {
                expect_shape(ns, k, &[s0.2])?;
            }
            let mut it = p.iter();
            let gamma = if *scale { it.next().cloned() } else { None };
            let beta = if *center { it.next().cloned() } else { None };
            let mean = it.next().expect("checked");
            let var = it.next().expect("checked");
            let mut a = vec![0.0; s0.2];
            let mut b = vec![0.0; s0.2];
            for ch in 0..s0.2 {
                let inv = 1.0 / (f64::from(var[ch]) + f64::from(*epsilon)).sqrt();
                let g = gamma.as_ref().map_or(1.0, |g| f64::from(g[ch]));
                let sc = g * inv;
                a[ch] = sc as f32;
                b[ch] = (beta.as_ref().map_or(0.0, |b| f64::from(b[ch])) - f64::from(mean[ch]) * sc) as f32;
            }
            single(Kind::Affine { scale: a, shift: b }, s0)
        }
        Op::Activation { kind } => {
            arity(ns, in_shapes, 1)?;
            single(Kind::Act(*kind), s0)
        }
        Op::Relu {
            max_value,
            negative_slope,
            threshold,
        } => {
            arity(ns, in_shapes, 1)?;
            single(
                Kind::Relu {
                    max_value: *max_value,
                    negative_slope: *negative_slope,
                    threshold: *threshold,
                },
                s0,
            )
        }
        Op::ZeroPad {
            top,
            bottom,
            left,
            right,
        } => {
            arity(ns, in_shapes, 1)?;
            single(
                Kind::Pad { top: *top, left: *left },
                (s0.0 + top + bottom, s0.1 + left + right, s0.2),
            )
        }
        Op::Crop {
            top,
            bottom,
            left,
            right,
        } => {
            arity(ns, in_shapes, 1)?;
            if top + bottom >= s0.0 || left + right >= s0.1 {
                return Err(Error::Graph(format!("{}: crop removes the whole map", ns.name)));
            }
            single(
                Kind::Crop { top: *top, left: *left },
                (s0.0 - top - bottom, s0.1 - left - right, s0.2),
            )
        }
        Op::MaxPool { pool, strides, padding } | Op::AvgPool { pool, strides, padding } => {
            arity(ns, in_shapes, 1)?;
            let win = Window::new(s0.0, s0.1, *pool, *strides, [1, 1], *padding)?;
            let kind = if matches!(ns.op, Op::MaxPool { .. }) {
                Kind::MaxPool(win)
            } else {
                Kind::AvgPool(win)
            };
            single(kind, (win.out_h, win.out_w, s0.2))
        }
        Op::GlobalAvgPool { .. } => {
            arity(ns, in_shapes, 1)?;
            single(Kind::GlobalAvgPool, (1, 1, s0.2))
        }
        Op::Add | Op::Multiply => {
            if in_shapes.len() < 2 {
                return Err(Error::Graph(format!("{}: needs at least two inputs", ns.name)));
            }
            let shape = ops::broadcast_shape(in_shapes)?;
            single(if matches!(ns.op, Op::Add) { Kind::Add } else { Kind::Multiply }, shape)
        }
        Op::ScaleSum { scale } => {
            arity(ns, in_shapes, 2)?;
            single(Kind::ScaleSum(*scale), ops::broadcast_shape(in_shapes)?)
        }
        Op::Concat => {
            if in_shapes.iter().any(|s| (s.0, s.1) != (s0.0, s0.1)) {
                return Err(Error::Graph(format!("{}: concat inputs differ spatially", ns.name)));
            }
            single(Kind::Concat, (s0.0, s0.1, in_shapes.iter().map(|s| s.2).sum()))
        }
        Op::AddScalar { value } => {
            arity(ns, in_shapes, 1)?;
            single(Kind::AddScalar(*value), s0)
        }
        Op::MulScalar { value } => {
            arity(ns, in_shapes, 1)?;
            single(Kind::MulScalar(*value), s0)
        }
    })
}

fn with_activation(ns: &NodeSpec, inputs: &[usize], kind: Kind, shape: Shape, act: Activation) -> Vec<Node> {
    if act == Activation::Linear {
        return vec![Node {
            name: ns.name.clone(),
            inputs: inputs.to_vec(),
            kind,
            shape,
        }];
    }
    // the conv node lands at the next index; the activation consumes it
    vec![
        Node {
            name: format!("{}/conv", ns.name),
            inputs: inputs.to_vec(),
            kind,
            shape,
        },
        Node {
            name: ns.name.clone(),
            inputs: Vec::new(),
            kind: Kind::Act(act),
            shape,
        },
    ]
}
