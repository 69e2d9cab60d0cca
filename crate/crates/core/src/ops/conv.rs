//! Direct 2-d cross-correlation with grouping, dilation, stride and zero
//! padding. Inner loops run along output rows so the stride-1 case reduces to
//! contiguous `axpy`/`dot` calls.

use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{ConvSpec, Tensor};

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(input: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let [n, cin, h, w] = input.dims4()?;
        if cin != spec.in_channels {
            return Err(Error::invalid(format!(
                "conv channel axis: input has {cin} channels, spec expects {}",
                spec.in_channels
            )));
        }
        let ws = spec.weight_shape();
        if weight.shape() != ws {
            return Err(Error::invalid(format!(
                "conv weight shape {:?} does not match spec {ws:?}",
                weight.shape()
            )));
        }
        let (ho, wo) = spec.output_hw(h, w)?;
        Ok(Geometry {
            n,
            cin,
            cout: spec.out_channels,
            h,
            w,
            ho,
            wo,
            cin_g: cin / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            spec: *spec,
        })
    }

    /// Signed input offset of kernel tap `k` along an axis.
    fn offset(&self, k: usize, pad: usize) -> isize {
        (k * self.spec.dilation) as isize - pad as isize
    }

    /// Output indices `o` for which `o·stride + off` lands inside `0..len`.
    fn valid(&self, off: isize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let room = len as isize - off;
        let hi = if room <= 0 { 0 } else { ((room + s - 1) / s).min(out_len as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn weight_index(&self, oc: usize, icg: usize, kh: usize, kw: usize) -> usize {
        ((oc * self.cin_g + icg) * self.spec.kernel_h + kh) * self.spec.kernel_w + kw
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = Geometry::new(input, weight, spec)?;
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.len() == g.cout => {}
        (false, None) => {}
        (true, _) => {
            return Err(Error::invalid(format!(
                "conv bias must have {} elements",
                g.cout
            )))
        }
        (false, Some(_)) => return Err(Error::invalid("conv spec has no bias but one was given")),
    }
    let x = input.data();
    let wt = weight.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let stride = spec.stride;
    let mut out = vec![0.0; g.n * g.cout * plane_out];
    par::for_each_chunk(&mut out, plane_out, |idx, plane| {
        let (b, oc) = (idx / g.cout, idx % g.cout);
        if let Some(bias) = bias {
            plane.fill(bias.data()[oc]);
        }
        let group = oc / g.cout_g;
        for icg in 0..g.cin_g {
            let ic = group * g.cin_g + icg;
            let xp = &x[(b * g.cin + ic) * plane_in..][..plane_in];
            for kh in 0..spec.kernel_h {
                let offh = g.offset(kh, spec.pad_h);
                let (oh_lo, oh_hi) = g.valid(offh, g.h, g.ho);
                for kw in 0..spec.kernel_w {
                    let wv = wt[g.weight_index(oc, icg, kh, kw)];
                    let offw = g.offset(kw, spec.pad_w);
                    let (ow_lo, ow_hi) = g.valid(offw, g.w, g.wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * stride) as isize + offh;
                        let xrow = &xp[ih as usize * g.w..][..g.w];
                        let orow = &mut plane[oh * g.wo..][..g.wo];
                        if stride == 1 {
                            let iw0 = (ow_lo as isize + offw) as usize;
                            axpy(&mut orow[ow_lo..ow_hi], wv, &xrow[iw0..iw0 + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * stride) as isize + offw) as usize;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Adjoint of [`conv2d`]. Only the requested gradients are computed.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    want_input: bool,
    want_weight: bool,
) -> Result<ConvGrads> {
    let g = Geometry::new(input, weight, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::invalid(format!(
            "conv output gradient shape {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let stride = spec.stride;

    let grad_input = want_input.then(|| {
        let mut gx = vec![0.0; x.len()];
        par::for_each_chunk(&mut gx, plane_in, |idx, plane| {
            let (b, ic) = (idx / g.cin, idx % g.cin);
            let group = ic / g.cin_g;
            let icg = ic % g.cin_g;
            for ocg in 0..g.cout_g {
                let oc = group * g.cout_g + ocg;
                let gp = &go[(b * g.cout + oc) * plane_out..][..plane_out];
                for kh in 0..spec.kernel_h {
                    let offh = g.offset(kh, spec.pad_h);
                    let (oh_lo, oh_hi) = g.valid(offh, g.h, g.ho);
                    for kw in 0..spec.kernel_w {
                        let wv = wt[g.weight_index(oc, icg, kh, kw)];
                        let offw = g.offset(kw, spec.pad_w);
                        let (ow_lo, ow_hi) = g.valid(offw, g.w, g.wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * stride) as isize + offh) as usize;
                            let grow = &gp[oh * g.wo..][..g.wo];
                            let xrow = &mut plane[ih * g.w..][..g.w];
                            if stride == 1 {
                                let iw0 = (ow_lo as isize + offw) as usize;
                                axpy(&mut xrow[iw0..iw0 + (ow_hi - ow_lo)], wv, &grow[ow_lo..ow_hi]);
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * stride) as isize + offw) as usize;
                                    xrow[iw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        });
        Tensor::from_parts(input.shape().to_vec(), gx)
    });

    let grad_weight = want_weight.then(|| {
        let per_oc = g.cin_g * spec.kernel_h * spec.kernel_w;
        let mut gw = vec![0.0; wt.len()];
        par::for_each_chunk(&mut gw, per_oc, |oc, chunk| {
            let group = oc / g.cout_g;
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                for kh in 0..spec.kernel_h {
                    let offh = g.offset(kh, spec.pad_h);
                    let (oh_lo, oh_hi) = g.valid(offh, g.h, g.ho);
                    for kw in 0..spec.kernel_w {
                        let offw = g.offset(kw, spec.pad_w);
                        let (ow_lo, ow_hi) = g.valid(offw, g.w, g.wo);
                        let mut acc = 0.0;
                        if ow_lo < ow_hi {
                            for b in 0..g.n {
                                let xp = &x[(b * g.cin + ic) * plane_in..][..plane_in];
                                let gp = &go[(b * g.cout + oc) * plane_out..][..plane_out];
                                for oh in oh_lo..oh_hi {
                                    let ih = ((oh * stride) as isize + offh) as usize;
                                    let grow = &gp[oh * g.wo..][..g.wo];
                                    let xrow = &xp[ih * g.w..][..g.w];
                                    if stride == 1 {
                                        let iw0 = (ow_lo as isize + offw) as usize;
                                        acc += dot(
                                            &grow[ow_lo..ow_hi],
                                            &xrow[iw0..iw0 + (ow_hi - ow_lo)],
                                        );
                                    } else {
                                        for ow in ow_lo..ow_hi {
                                            let iw = ((ow * stride) as isize + offw) as usize;
                                            acc += grow[ow] * xrow[iw];
                                        }
                                    }
                                }
                            }
                        }
                        chunk[(icg * spec.kernel_h + kh) * spec.kernel_w + kw] = acc;
                    }
                }
            }
        });
        Tensor::from_parts(weight.shape().to_vec(), gw)
    });

    let grad_bias = spec.has_bias.then(|| {
        let sums = par::map_indices(g.cout, |oc| {
            (0..g.n)
                .map(|b| super::sum(&go[(b * g.cout + oc) * plane_out..][..plane_out]))
                .fold(0.0, |a, v| a + v)
        });
        Tensor::from_parts(vec![g.cout], sums)
    });

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Completely separable 3×3 convolution: depthwise 1×3, depthwise 3×1, then a
/// pointwise 1×1 channel mixer. All three stages are biasless.
pub fn separable_conv3x3(
    input: &Tensor,
    w_1x3: &Tensor,
    w_3x1: &Tensor,
    w_pointwise: &Tensor,
) -> Result<Tensor> {
    let [r, c] = separable_specs(input, w_1x3, w_3x1)?;
    let p = pointwise_spec(w_pointwise, r.out_channels)?;
    let x = conv2d(input, w_1x3, None, &r)?;
    let x = conv2d(&x, w_3x1, None, &c)?;
    conv2d(&x, w_pointwise, None, &p)
}

pub(crate) fn separable_specs(
    input: &Tensor,
    w_1x3: &Tensor,
    w_3x1: &Tensor,
) -> Result<[ConvSpec; 2]> {
    let [_, ch, _, _] = input.dims4()?;
    if w_1x3.shape() != [ch, 1, 1, 3] {
        return Err(Error::invalid(format!(
            "separable 1×3 stage must be depthwise [{ch}, 1, 1, 3], got {:?}",
            w_1x3.shape()
        )));
    }
    if w_3x1.shape() != [ch, 1, 3, 1] {
        return Err(Error::invalid(format!(
            "separable 3×1 stage must be depthwise [{ch}, 1, 3, 1], got {:?}",
            w_3x1.shape()
        )));
    }
    Ok([ConvSpec::depthwise(ch, 1, 3), ConvSpec::depthwise(ch, 3, 1)])
}

pub(crate) fn pointwise_spec(w: &Tensor, in_channels: usize) -> Result<ConvSpec> {
    match w.shape() {
        &[out, cin, 1, 1] if cin == in_channels => Ok(ConvSpec::pointwise(cin, out)),
        s => Err(Error::invalid(format!(
            "pointwise weight must be [out, {in_channels}, 1, 1], got {s:?}"
        ))),
    }
}
