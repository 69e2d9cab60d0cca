//! Bilinear resampling with half-pixel centres (align-corners off). Source
//! coordinates are clamped to the image, so constant maps stay constant.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// For each output index: the two source taps and the weight of the second.
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_taps(in_len: usize, out_len: usize) -> AxisTaps {
    let scale = in_len as f64 / out_len as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("resize target {out_h}×{out_w} must be positive")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let x = input.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    par::for_each_chunk(&mut out, out_h * out_w, |idx, o| {
        let p = &x[idx * h * w..][..h * w];
        for i in 0..out_h {
            let (r0, r1, fy) = (&p[ty.lo[i] * w..][..w], &p[ty.hi[i] * w..][..w], ty.frac[i]);
            let row = &mut o[i * out_w..][..out_w];
            for j in 0..out_w {
                let (a, b, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
                let top = r0[a] * (1.0 - fx) + r0[b] * fx;
                let bot = r1[a] * (1.0 - fx) + r1[b] * fx;
                row[j] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub fn bilinear_resize_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let [_, _, out_h, out_w] = grad_out.dims4()?;
    if (out_h, out_w) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let g = grad_out.data();
    let mut gx = vec![0.0; input_shape.iter().product()];
    par::for_each_chunk(&mut gx, h * w, |idx, plane| {
        let go = &g[idx * out_h * out_w..][..out_h * out_w];
        for i in 0..out_h {
            let (r0, r1, fy) = (ty.lo[i] * w, ty.hi[i] * w, ty.frac[i]);
            for j in 0..out_w {
                let (a, b, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
                let v = go[i * out_w + j];
                let top = v * (1.0 - fy);
                let bot = v * fy;
                plane[r0 + a] += top * (1.0 - fx);
                plane[r0 + b] += top * fx;
                plane[r1 + a] += bot * (1.0 - fx);
                plane[r1 + b] += bot * fx;
            }
        }
    });
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}
