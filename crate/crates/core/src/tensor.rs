//! Dense row-major tensors. Activations are laid out N×C×H×W and convolution
//! kernels Cout×(Cin/groups)×Kh×Kw.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Constructor for shapes the caller has already checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets the tensor as N×C×H×W.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::invalid(format!(
                "expected a 4-d N×C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channels `start..end` of an N×C×H×W tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "channel range {start}..{end} outside 0..{c}"
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor::from_parts(vec![n, end - start, h, w], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a 2-d convolution. Padding is zero padding applied
/// symmetrically per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Plain `k×k` convolution with "same" padding for odd `k` and no bias.
    pub fn square(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            dilation: 1,
            groups: 1,
            pad_h: k / 2,
            pad_w: k / 2,
            has_bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::square(in_channels, out_channels, 1)
    }

    /// Depthwise `kh×kw` kernel with padding that preserves spatial size.
    pub fn depthwise(channels: usize, kh: usize, kw: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel_h: kh,
            kernel_w: kw,
            stride: 1,
            dilation: 1,
            groups: channels,
            pad_h: kh / 2,
            pad_w: kw / 2,
            has_bias: false,
        }
    }

    /// 3×3 dilated convolution padded by the dilation rate.
    pub fn dilated3x3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        ConvSpec {
            dilation,
            pad_h: dilation,
            pad_w: dilation,
            ..Self::square(in_channels, out_channels, 3)
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("conv {name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "conv channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.has_bias { self.out_channels } else { 0 }
    }

    fn extent(k: usize, d: usize) -> usize {
        (k - 1) * d + 1
    }

    /// Output spatial size, or an error naming the axis that is too small.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let eh = Self::extent(self.kernel_h, self.dilation);
        let ew = Self::extent(self.kernel_w, self.dilation);
        if h + 2 * self.pad_h < eh {
            return Err(Error::invalid(format!(
                "conv height axis: padded size {} < kernel extent {eh}",
                h + 2 * self.pad_h
            )));
        }
        if w + 2 * self.pad_w < ew {
            return Err(Error::invalid(format!(
                "conv width axis: padded size {} < kernel extent {ew}",
                w + 2 * self.pad_w
            )));
        }
        Ok((
            (h + 2 * self.pad_h - eh) / self.stride + 1,
            (w + 2 * self.pad_w - ew) / self.stride + 1,
        ))
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (h_out * w_out * self.out_channels * self.fan_in()) as u64
    }
}
