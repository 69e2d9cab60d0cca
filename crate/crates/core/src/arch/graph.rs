//! Executable network: an ordered DAG of layer nodes plus parameter storage.

use crate::arch::config::ArchConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::norm::DEFAULT_EPS;
use crate::rng::Rng;
use crate::tensor::{ConvSpec, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Input,
    Conv { spec: ConvSpec, weight: ParamId, bias: Option<ParamId> },
    BatchNorm { gamma: ParamId, beta: ParamId },
    Relu,
    Dropout { p: f64 },
    ReplicatePad { bottom: usize, right: usize },
    MaxPool2x2S1,
    BlurPool2x2S2,
    /// Bilinear resize of `inputs[0]` to the spatial size of `inputs[1]`.
    ResizeLike,
    Concat,
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input => "input",
            Layer::Conv { spec, .. } if spec.is_depthwise() && spec.groups > 1 => "dwconv",
            Layer::Conv { .. } => "conv",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::ReplicatePad { .. } => "pad",
            Layer::MaxPool2x2S1 => "maxpool",
            Layer::BlurPool2x2S2 => "blurpool",
            Layer::ResizeLike => "bilinear",
            Layer::Concat => "concat",
            Layer::GlobalAvgPool => "gap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
    /// Declared output channel count.
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Weight decay applies to convolution kernels only.
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::ConvWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Kernel fan-in for convolution weights, 0 otherwise.
    pub fan_in: usize,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub(crate) config: Option<ArchConfig>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<Param>,
    pub(crate) output: NodeId,
}

/// Per-evaluation state: the dropout stream and whether dropout is active.
pub struct ForwardCtx<'a> {
    pub rng: &'a mut Rng,
    pub dropout: bool,
    /// Record parameters as differentiable leaves.
    pub train: bool,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Tape handle of every parameter, indexed like [`Graph::params`].
    pub params: Vec<Var>,
}

impl Graph {
    pub fn config(&self) -> Option<&ArchConfig> {
        self.config.as_ref()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_channels(&self) -> usize {
        self.nodes.first().map(|n| n.channels).unwrap_or(0)
    }

    pub fn output_channels(&self) -> usize {
        self.nodes[self.output].channels
    }

    /// Number of trainable scalars, from the stored tensors.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Checks ordering, channel arithmetic and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.nodes.is_empty() || self.nodes[0].layer != Layer::Input {
            errs.push("node 0 must be the input".to_string());
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= id) {
                errs.push(format!("{}: input {bad} does not precede node {id}", node.name));
                continue;
            }
            let ch = |i: usize| self.nodes[node.inputs[i]].channels;
            let arity = match node.layer {
                Layer::Input => 0,
                Layer::ResizeLike => 2,
                Layer::Concat => node.inputs.len().max(1),
                _ => 1,
            };
            if node.inputs.len() != arity {
                errs.push(format!("{}: expected {arity} inputs, got {}", node.name, node.inputs.len()));
                continue;
            }
            let expected_in = match &node.layer {
                Layer::Input => None,
                Layer::Concat => Some(node.inputs.iter().map(|&i| self.nodes[i].channels).sum()),
                _ => Some(ch(0)),
            };
            let expected_out = match &node.layer {
                Layer::Conv { spec, .. } => {
                    if let Some(e) = expected_in.filter(|&e| e != spec.in_channels) {
                        errs.push(format!("{}: conv expects {} input channels, receives {e}", node.name, spec.in_channels));
                    }
                    spec.out_channels
                }
                _ => expected_in.unwrap_or(node.channels),
            };
            if node.channels != expected_out {
                errs.push(format!(
                    "{}: declares {} channels, inputs give {expected_out}",
                    node.name, node.channels
                ));
            }
            match &node.layer {
                Layer::Conv { spec, weight, bias } => {
                    if let Err(e) = spec.validate() {
                        errs.push(format!("{}: {e}", node.name));
                    }
                    let ws = spec.weight_shape();
                    match self.params.get(*weight) {
                        Some(p) if p.tensor.shape() == ws => {}
                        _ => errs.push(format!("{}: weight parameter does not have shape {ws:?}", node.name)),
                    }
                    if spec.has_bias != bias.is_some() {
                        errs.push(format!("{}: bias flag and bias parameter disagree", node.name));
                    }
                    if let Some(b) = bias {
                        if self.params.get(*b).map(|p| p.tensor.len()) != Some(spec.out_channels) {
                            errs.push(format!("{}: bias parameter has wrong length", node.name));
                        }
                    }
                }
                Layer::BatchNorm { gamma, beta } => {
                    for p in [gamma, beta] {
                        if self.params.get(*p).map(|p| p.tensor.len()) != Some(node.channels) {
                            errs.push(format!("{}: affine parameter has wrong length", node.name));
                        }
                    }
                }
                Layer::Dropout { p } if !(0.0..1.0).contains(p) => {
                    errs.push(format!("{}: dropout rate {p} outside [0, 1)", node.name));
                }
                _ => {}
            }
        }
        if self.output >= self.nodes.len() {
            errs.push(format!("output node {} does not exist", self.output));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Output shape of every node for an N×C×H×W input, without evaluating.
    pub fn infer_shapes(&self, input: [usize; 4]) -> Result<Vec<[usize; 4]>> {
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inp = |i: usize| shapes[node.inputs[i]];
            let s = match &node.layer {
                Layer::Input => {
                    if input[1] != node.channels {
                        return Err(Error::invalid(format!(
                            "input has {} channels, network expects {}",
                            input[1], node.channels
                        )));
                    }
                    input
                }
                Layer::Conv { spec, .. } => {
                    let [n, _, h, w] = inp(0);
                    let (ho, wo) = spec
                        .output_hw(h, w)
                        .map_err(|e| Error::invalid(format!("{}: {e}", node.name)))?;
                    [n, spec.out_channels, ho, wo]
                }
                Layer::ReplicatePad { bottom, right } => {
                    let [n, c, h, w] = inp(0);
                    [n, c, h + bottom, w + right]
                }
                Layer::MaxPool2x2S1 | Layer::BlurPool2x2S2 => {
                    let [n, c, h, w] = inp(0);
                    if h < 2 || w < 2 {
                        return Err(Error::invalid(format!("{}: spatial size {h}×{w} below 2", node.name)));
                    }
                    if node.layer == Layer::MaxPool2x2S1 {
                        [n, c, h - 1, w - 1]
                    } else {
                        [n, c, h / 2, w / 2]
                    }
                }
                Layer::ResizeLike => {
                    let [n, c, _, _] = inp(0);
                    let [_, _, h, w] = inp(1);
                    [n, c, h, w]
                }
                Layer::Concat => {
                    let [n, _, h, w] = inp(0);
                    let mut c = 0;
                    for &i in &node.inputs {
                        let [_, ci, hi, wi] = shapes[i];
                        if (hi, wi) != (h, w) {
                            return Err(Error::invalid(format!(
                                "{}: concatenating {h}×{w} with {hi}×{wi}; input size must be a multiple of the downsampling factor",
                                node.name
                            )));
                        }
                        c += ci;
                    }
                    [n, c, h, w]
                }
                Layer::GlobalAvgPool => {
                    let [n, c, _, _] = inp(0);
                    [n, c, 1, 1]
                }
                Layer::BatchNorm { .. } | Layer::Relu | Layer::Dropout { .. } => inp(0),
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Records one forward pass on `tape`, returning the logits.
    pub fn forward(&self, tape: &mut Tape, input: Var, ctx: &mut ForwardCtx<'_>) -> Result<ForwardOutput> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), ctx.train))
            .collect();
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let x = |i: usize| vars[node.inputs[i]];
            let v = match &node.layer {
                Layer::Input => {
                    let [_, c, _, _] = tape.value(input).dims4()?;
                    if c != node.channels {
                        return Err(Error::invalid(format!(
                            "input has {c} channels, network expects {}",
                            node.channels
                        )));
                    }
                    input
                }
                Layer::Conv { spec, weight, bias } => {
                    tape.conv2d(x(0), params[*weight], bias.map(|b| params[b]), spec)?
                }
                Layer::BatchNorm { gamma, beta } => {
                    tape.batchnorm2d(x(0), params[*gamma], params[*beta], DEFAULT_EPS)?
                }
                Layer::Relu => tape.relu(x(0))?,
                Layer::Dropout { p } => tape.dropout2d(x(0), *p, ctx.rng, ctx.dropout)?,
                Layer::ReplicatePad { bottom, right } => tape.replicate_pad(x(0), *bottom, *right)?,
                Layer::MaxPool2x2S1 => tape.maxpool2x2_s1(x(0))?,
                Layer::BlurPool2x2S2 => tape.blurpool2x2_s2(x(0))?,
                Layer::ResizeLike => {
                    let [_, _, h, w] = tape.value(x(1)).dims4()?;
                    tape.bilinear_resize(x(0), h, w)?
                }
                Layer::Concat => {
                    let ins: Vec<Var> = node.inputs.iter().map(|&i| vars[i]).collect();
                    if ins.len() == 1 {
                        ins[0]
                    } else {
                        tape.concat_channels(&ins)?
                    }
                }
                Layer::GlobalAvgPool => tape.global_avg_pool(x(0))?,
            };
            vars.push(v);
        }
        Ok(ForwardOutput { logits: vars[self.output], params })
    }

    /// Forward pass without a tape. Activations are released after their last
    /// consumer, and dropout draws match [`Graph::forward`] exactly.
    pub fn infer(&self, input: &Tensor, rng: &mut Rng, dropout: bool) -> Result<Tensor> {
        use crate::ops::{self, pointwise};
        let mut last_use = vec![0usize; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = id;
            }
        }
        last_use[self.output] = usize::MAX;
        let mut vals: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            let get = |i: usize| vals[node.inputs[i]].as_ref().expect("live activation");
            let p = |i: ParamId| &self.params[i].tensor;
            let out = match &node.layer {
                Layer::Input => {
                    let [_, c, _, _] = input.dims4()?;
                    if c != node.channels {
                        return Err(Error::invalid(format!(
                            "input has {c} channels, network expects {}",
                            node.channels
                        )));
                    }
                    input.clone()
                }
                Layer::Conv { spec, weight, bias } => ops::conv2d(get(0), p(*weight), bias.map(p), spec)?,
                Layer::BatchNorm { gamma, beta } => ops::batchnorm2d(get(0), p(*gamma), p(*beta), DEFAULT_EPS)?,
                Layer::Relu => ops::relu(get(0)),
                Layer::Dropout { p } => {
                    pointwise::check_rate(*p)?;
                    let x = get(0);
                    if dropout {
                        let [n, c, _, _] = x.dims4()?;
                        let scales = pointwise::dropout_scales(n * c, *p, rng)?;
                        if scales.iter().all(|&s| s == 1.0) {
                            x.clone()
                        } else {
                            pointwise::apply_plane_scales(x, &scales)?
                        }
                    } else {
                        x.clone()
                    }
                }
                Layer::ReplicatePad { bottom, right } => ops::replicate_pad(get(0), *bottom, *right)?,
                Layer::MaxPool2x2S1 => ops::maxpool2x2_s1(get(0))?,
                Layer::BlurPool2x2S2 => ops::blurpool2x2_s2(get(0))?,
                Layer::ResizeLike => {
                    let [_, _, h, w] = get(1).dims4()?;
                    ops::bilinear_resize(get(0), h, w)?
                }
                Layer::Concat => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| vals[i].as_ref().expect("live activation")).collect();
                    ops::concat_channels(&ins)?
                }
                Layer::GlobalAvgPool => ops::global_avg_pool(get(0))?,
            };
            vals[id] = Some(out);
            for &i in &node.inputs {
                if last_use[i] == id {
                    vals[i] = None;
                }
            }
        }
        Ok(vals[self.output].take().expect("output computed"))
    }
}
