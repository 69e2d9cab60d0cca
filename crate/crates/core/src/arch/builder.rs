//! Declarative construction of the U-shaped network from its building blocks.

use crate::arch::config::ArchConfig;
use crate::arch::graph::{Graph, Layer, Node, NodeId, Param, ParamId, ParamKind};
use crate::error::Result;
use crate::tensor::{ConvSpec, Tensor};

/// Appends nodes and their (zero / unit initialised) parameters.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<Param>,
}

impl GraphBuilder {
    /// Starts a graph whose node 0 is an input with `input_channels`.
    pub fn new(input_channels: usize) -> (Self, NodeId) {
        let b = GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                layer: Layer::Input,
                inputs: vec![],
                channels: input_channels,
            }],
            params: Vec::new(),
        };
        (b, 0)
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    fn add(&mut self, name: String, layer: Layer, inputs: Vec<NodeId>, channels: usize) -> NodeId {
        self.nodes.push(Node { name, layer, inputs, channels });
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let fill = if kind == ParamKind::BnGamma { 1.0 } else { 0.0 };
        self.params.push(Param { name, kind, fan_in, tensor: Tensor::full(shape, fill) });
        self.params.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> NodeId {
        let weight = self.param(format!("{name}.weight"), ParamKind::ConvWeight, spec.weight_shape().to_vec(), spec.fan_in());
        let bias = spec
            .has_bias
            .then(|| self.param(format!("{name}.bias"), ParamKind::ConvBias, vec![spec.out_channels], 0));
        self.add(name.into(), Layer::Conv { spec, weight, bias }, vec![x], spec.out_channels)
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId) -> NodeId {
        let c = self.channels(x);
        let gamma = self.param(format!("{name}.gamma"), ParamKind::BnGamma, vec![c], 0);
        let beta = self.param(format!("{name}.beta"), ParamKind::BnBeta, vec![c], 0);
        self.add(name.into(), Layer::BatchNorm { gamma, beta }, vec![x], c)
    }

    fn unary(&mut self, name: &str, layer: Layer, x: NodeId) -> NodeId {
        let c = self.channels(x);
        self.add(name.into(), layer, vec![x], c)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> NodeId {
        self.unary(name, Layer::Relu, x)
    }

    pub fn dropout(&mut self, name: &str, x: NodeId, p: f64) -> NodeId {
        self.unary(name, Layer::Dropout { p }, x)
    }

    pub fn replicate_pad(&mut self, name: &str, x: NodeId, bottom: usize, right: usize) -> NodeId {
        self.unary(name, Layer::ReplicatePad { bottom, right }, x)
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId) -> NodeId {
        self.unary(name, Layer::MaxPool2x2S1, x)
    }

    pub fn blurpool(&mut self, name: &str, x: NodeId) -> NodeId {
        self.unary(name, Layer::BlurPool2x2S2, x)
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> NodeId {
        self.unary(name, Layer::GlobalAvgPool, x)
    }

    pub fn resize_like(&mut self, name: &str, x: NodeId, like: NodeId) -> NodeId {
        let c = self.channels(x);
        self.add(name.into(), Layer::ResizeLike, vec![x, like], c)
    }

    /// Channel concatenation; a single input is passed through unchanged.
    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> NodeId {
        if let [only] = xs {
            return *only;
        }
        let c = xs.iter().map(|&x| self.channels(x)).sum();
        self.add(name.into(), Layer::Concat, xs.to_vec(), c)
    }

    /// BN → ReLU → depthwise 1×3 → depthwise 3×1 → pointwise (→ k) → dropout.
    pub fn basic_layer(&mut self, prefix: &str, x: NodeId, k: usize, p: f64) -> NodeId {
        let c = self.channels(x);
        let y = self.batchnorm(&format!("{prefix}.bn"), x);
        let y = self.relu(&format!("{prefix}.relu"), y);
        let y = self.conv(&format!("{prefix}.dw1x3"), y, ConvSpec::depthwise(c, 1, 3));
        let y = self.conv(&format!("{prefix}.dw3x1"), y, ConvSpec::depthwise(c, 3, 1));
        let y = self.conv(&format!("{prefix}.pw"), y, ConvSpec::pointwise(c, k));
        self.dropout(&format!("{prefix}.drop"), y, p)
    }

    /// Each Basic Layer sees the block input concatenated with all earlier
    /// layer outputs. The block emits the layer outputs, prefixed by the block
    /// input when `include_input` is set.
    pub fn dense_block(
        &mut self,
        prefix: &str,
        x: NodeId,
        num_bls: usize,
        k: usize,
        p: f64,
        include_input: bool,
    ) -> NodeId {
        let mut outs: Vec<NodeId> = Vec::with_capacity(num_bls);
        for i in 1..=num_bls {
            let mut feed = vec![x];
            feed.extend(&outs);
            let inp = self.concat(&format!("{prefix}.in{i}"), &feed);
            outs.push(self.basic_layer(&format!("{prefix}.bl{i}"), inp, k, p));
        }
        let mut emit = Vec::with_capacity(num_bls + 1);
        if include_input {
            emit.push(x);
        }
        emit.extend(outs);
        self.concat(&format!("{prefix}.out"), &emit)
    }

    /// BN → ReLU → 1×1 conv → dropout → replicate pad → 2×2 max (s1) → 2×2 blur (s2).
    /// The one-pixel bottom/right pad makes even sizes halve exactly and odd
    /// sizes floor.
    pub fn downsample(&mut self, prefix: &str, x: NodeId, out_channels: usize, p: f64) -> NodeId {
        let c = self.channels(x);
        let y = self.batchnorm(&format!("{prefix}.bn"), x);
        let y = self.relu(&format!("{prefix}.relu"), y);
        let y = self.conv(&format!("{prefix}.conv"), y, ConvSpec::pointwise(c, out_channels));
        let y = self.dropout(&format!("{prefix}.drop"), y, p);
        let y = self.replicate_pad(&format!("{prefix}.pad"), y, 1, 1);
        let y = self.maxpool(&format!("{prefix}.maxpool"), y);
        self.blurpool(&format!("{prefix}.blur"), y)
    }

    /// Bilinear resize to the resolution of `like`, then a 1×1 convolution.
    pub fn upsample(&mut self, prefix: &str, x: NodeId, out_channels: usize, like: NodeId) -> NodeId {
        let c = self.channels(x);
        let y = self.resize_like(&format!("{prefix}.resize"), x, like);
        self.conv(&format!("{prefix}.conv"), y, ConvSpec::pointwise(c, out_channels))
    }

    /// Five parallel branches of `partial` channels (1×1, three dilated 3×3,
    /// and image pooling), each convolution preceded by BN and ReLU, then a
    /// 1×1 projection and dropout.
    pub fn aspp(
        &mut self,
        prefix: &str,
        x: NodeId,
        out_channels: usize,
        dilations: [usize; 3],
        partial: usize,
        p: f64,
    ) -> NodeId {
        let c = self.channels(x);
        let mut branches = Vec::with_capacity(5);
        let y = self.batchnorm(&format!("{prefix}.b0.bn"), x);
        let y = self.relu(&format!("{prefix}.b0.relu"), y);
        branches.push(self.conv(&format!("{prefix}.b0.conv"), y, ConvSpec::pointwise(c, partial)));
        for (i, d) in dilations.into_iter().enumerate() {
            let name = format!("{prefix}.b{}", i + 1);
            let y = self.batchnorm(&format!("{name}.bn"), x);
            let y = self.relu(&format!("{name}.relu"), y);
            branches.push(self.conv(&format!("{name}.conv"), y, ConvSpec::dilated3x3(c, partial, d)));
        }
        let g = self.global_avg_pool(&format!("{prefix}.pool.gap"), x);
        let g = self.conv(&format!("{prefix}.pool.conv"), g, ConvSpec::pointwise(c, partial));
        branches.push(self.resize_like(&format!("{prefix}.pool.broadcast"), g, x));
        let cat = self.concat(&format!("{prefix}.cat"), &branches);
        let y = self.conv(&format!("{prefix}.proj"), cat, ConvSpec::pointwise(5 * partial, out_channels));
        self.dropout(&format!("{prefix}.drop"), y, p)
    }

    /// Repeat block at `level` (1 = outermost), recursing inwards until the
    /// bottom dense block.
    pub fn repeat_block(&mut self, level: usize, config: &ArchConfig, x: NodeId) -> NodeId {
        let k = config.growth_rate_k;
        let p = config.dropout_p;
        let rb = format!("rb{level}");
        let enc = self.dense_block(&format!("{rb}.enc"), x, config.blocks.down[level - 1], k, p, true);
        let enc_c = self.channels(enc);
        let skip = match config.dilations_at(level) {
            Some(d) => self.aspp(&format!("{rb}.aspp"), enc, enc_c, d, config.aspp.partial_channels, p),
            None => enc,
        };
        let down_c = ((enc_c as f64 * config.downsample_compression).round() as usize).max(1);
        let down = self.downsample(&format!("{rb}.down"), enc, down_c, p);
        let inner = if level < config.num_repeat_blocks {
            self.repeat_block(level + 1, config, down)
        } else {
            self.dense_block("bottom", down, config.blocks.bottom, k, p, false)
        };
        let inner_c = self.channels(inner);
        let up = self.upsample(&format!("{rb}.up"), inner, inner_c, skip);
        let cat = self.concat(&format!("{rb}.skipcat"), &[skip, up]);
        self.dense_block(&format!("{rb}.dec"), cat, config.blocks.up[level - 1], k, p, false)
    }

    /// Freezes the builder into a validated graph.
    pub fn finish(self, output: NodeId, config: Option<ArchConfig>) -> Result<Graph> {
        let g = Graph { config, nodes: self.nodes, params: self.params, output };
        g.validate()?;
        Ok(g)
    }
}

/// Builds and He-initialises the full network for `config`.
pub fn build_combinet(config: &ArchConfig, seed: u64) -> Result<Graph> {
    config.validate()?;
    let (mut b, input) = GraphBuilder::new(config.input_channels);
    let stem = b.conv("pre.conv", input, ConvSpec::square(config.input_channels, config.stem_channels, 3));
    let body = b.repeat_block(1, config, stem);
    let c = b.channels(body);
    let logits = b.conv("post.conv", body, ConvSpec::pointwise(c, config.num_classes).with_bias(true));
    let mut g = b.finish(logits, Some(config.clone()))?;
    crate::trainer::he_uniform_init(&mut g, seed);
    Ok(g)
}
