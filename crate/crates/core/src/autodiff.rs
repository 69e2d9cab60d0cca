//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the data its
//! adjoint needs. Nodes only reference earlier nodes, so the tape is stored in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, conv, norm, pointwise, pool, resize};
use crate::rng::Rng;
use crate::tensor::{ConvSpec, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { input: usize, weight: usize, bias: Option<usize>, spec: ConvSpec },
    BatchNorm { input: usize, gamma: usize, beta: usize, stats: norm::BatchStats },
    Relu { input: usize },
    Dropout { input: usize, scales: Vec<f64> },
    MaxPool { input: usize, argmax: Vec<u32> },
    BlurPool { input: usize },
    ReplicatePad { input: usize },
    Resize { input: usize },
    Concat { inputs: Vec<usize> },
    GlobalAvgPool { input: usize },
    Softmax { input: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { input: usize },
    /// Scalar whose derivative w.r.t. `input` was computed in the forward pass.
    Fused { input: usize, local_grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::MissingTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.rg(i)).unwrap_or(false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let out = ops::conv2d(
            &self.nodes[i].value,
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
            spec,
        )?;
        let rg = self.rg(i) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { input: i, weight: w, bias: b, spec: *spec }, rg))
    }

    /// Depthwise 1×3, depthwise 3×1, pointwise 1×1; recorded as three convolutions.
    pub fn separable_conv3x3(&mut self, input: Var, w_1x3: Var, w_3x1: Var, w_pointwise: Var) -> Result<Var> {
        let [r, c] = conv::separable_specs(self.value(input), self.value(w_1x3), self.value(w_3x1))?;
        let p = conv::pointwise_spec(self.value(w_pointwise), r.out_channels)?;
        let x = self.conv2d(input, w_1x3, None, &r)?;
        let x = self.conv2d(x, w_3x1, None, &c)?;
        self.conv2d(x, w_pointwise, None, &p)
    }

    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (i, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, stats) = norm::batchnorm2d_with_stats(
            &self.nodes[i].value,
            &self.nodes[g].value,
            &self.nodes[b].value,
            eps,
        )?;
        let rg = self.rg(i) || self.rg(g) || self.rg(b);
        Ok(self.push(out, Op::BatchNorm { input: i, gamma: g, beta: b, stats }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = pointwise::relu(&self.nodes[i].value);
        Ok(self.push(out, Op::Relu { input: i }, self.rg(i)))
    }

    pub fn dropout2d(&mut self, input: Var, p: f64, rng: &mut Rng, active: bool) -> Result<Var> {
        let i = self.idx(input)?;
        pointwise::check_rate(p)?;
        let [n, c, _, _] = self.nodes[i].value.dims4()?;
        let scales = if active {
            pointwise::dropout_scales(n * c, p, rng)?
        } else {
            vec![1.0; n * c]
        };
        let out = if scales.iter().all(|&s| s == 1.0) {
            self.nodes[i].value.clone()
        } else {
            pointwise::apply_plane_scales(&self.nodes[i].value, &scales)?
        };
        Ok(self.push(out, Op::Dropout { input: i, scales }, self.rg(i)))
    }

    pub fn maxpool2x2_s1(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let (out, argmax) = pool::maxpool2x2_s1_with_argmax(&self.nodes[i].value)?;
        Ok(self.push(out, Op::MaxPool { input: i, argmax }, self.rg(i)))
    }

    pub fn blurpool2x2_s2(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = pool::blurpool2x2_s2(&self.nodes[i].value)?;
        Ok(self.push(out, Op::BlurPool { input: i }, self.rg(i)))
    }

    pub fn replicate_pad(&mut self, input: Var, bottom: usize, right: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let out = pool::replicate_pad(&self.nodes[i].value, bottom, right)?;
        Ok(self.push(out, Op::ReplicatePad { input: i }, self.rg(i)))
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let out = resize::bilinear_resize(&self.nodes[i].value, out_h, out_w)?;
        Ok(self.push(out, Op::Resize { input: i }, self.rg(i)))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let vals: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = pointwise::concat_channels(&vals)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::Concat { inputs: idx }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = pointwise::global_avg_pool(&self.nodes[i].value)?;
        Ok(self.push(out, Op::GlobalAvgPool { input: i }, self.rg(i)))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let out = pointwise::softmax_channels(&self.nodes[i].value)?;
        Ok(self.push(out, Op::Softmax { input: i }, self.rg(i)))
    }

    fn same_shape(&self, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::invalid(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b)?;
        let va = &self.nodes[a].value;
        let data = va.data().iter().zip(self.nodes[b].value.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b)?;
        let va = &self.nodes[a].value;
        let data = va.data().iter().zip(self.nodes[b].value.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let s = ops::sum(self.nodes[i].value.data());
        Ok(self.push(Tensor::scalar(s), Op::Sum { input: i }, self.rg(i)))
    }

    /// Records a scalar `value` computed outside the tape together with its
    /// gradient with respect to `input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        let i = self.idx(input)?;
        if local_grad.shape() != self.nodes[i].value.shape() {
            return Err(Error::invalid("fused gradient must match its input shape"));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { input: i, local_grad }, self.rg(i)))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recorded adjoints; a
    /// second call without recording a new tape fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[root] = Some(Tensor::scalar(1.0));
        for i in (0..=root).rev() {
            if !self.rg(i) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (j, gj) in self.adjoint(i, &g)? {
                if !self.rg(j) {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => ops::axpy(acc.data_mut(), 1.0, gj.data()),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    /// Gradients flowing from node `i` into its inputs.
    fn adjoint(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |j: usize| &self.nodes[j].value;
        let shape = |j: usize| self.nodes[j].value.shape().to_vec();
        Ok(match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv { input, weight, bias, spec } => {
                let grads = conv::conv2d_backward(val(*input), val(*weight), spec, g, self.rg(*input), self.rg(*weight))?;
                let mut out = Vec::with_capacity(3);
                out.extend(grads.input.map(|t| (*input, t)));
                out.extend(grads.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, stats } => {
                let grads = norm::batchnorm2d_backward(val(*input), val(*gamma), stats, g)?;
                vec![(*input, grads.input), (*gamma, grads.gamma), (*beta, grads.beta)]
            }
            Op::Relu { input } => vec![(*input, pointwise::relu_backward(val(*input), g))],
            Op::Dropout { input, scales } => {
                vec![(*input, pointwise::apply_plane_scales(g, scales)?)]
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, pool::maxpool2x2_s1_backward(&shape(*input), argmax, g))]
            }
            Op::BlurPool { input } => vec![(*input, pool::blurpool2x2_s2_backward(&shape(*input), g))],
            Op::ReplicatePad { input } => {
                vec![(*input, pool::replicate_pad_backward(&shape(*input), g))]
            }
            Op::Resize { input } => vec![(*input, resize::bilinear_resize_backward(&shape(*input), g)?)],
            Op::Concat { inputs } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &j in inputs {
                    let c = val(j).shape()[1];
                    out.push((j, g.slice_channels(start, start + c)?));
                    start += c;
                }
                out
            }
            Op::GlobalAvgPool { input } => {
                vec![(*input, pointwise::global_avg_pool_backward(&shape(*input), g))]
            }
            Op::Softmax { input } => {
                vec![(*input, pointwise::softmax_channels_backward(&self.nodes[i].value, g)?)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul { a, b } => {
                let ga = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![
                    (*a, Tensor::from_parts(shape(*a), ga)),
                    (*b, Tensor::from_parts(shape(*b), gb)),
                ]
            }
            Op::Sum { input } => vec![(*input, Tensor::full(shape(*input), g.data()[0]))],
            Op::Fused { input, local_grad } => {
                let s = g.data()[0];
                let data = local_grad.data().iter().map(|v| v * s).collect();
                vec![(*input, Tensor::from_parts(shape(*input), data))]
            }
        })
    }
}

/// Result of [`Tape::backward`]: gradients of the recorded leaves.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gradient_at_fixture() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![-1.0, 2.0]).unwrap(), true);
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_twice_fails() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_and_foreign_losses_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([3]), true);
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(tape.backward(y), Err(Error::MissingTape)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([2], 1.0), true);
        let c = tape.leaf(Tensor::full([2], 4.0), false);
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
