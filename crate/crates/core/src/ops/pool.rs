//! Anti-aliased downsampling pieces: stride-1 max pooling followed by a fixed
//! 2×2 box blur with stride 2, plus the replicate padding used to make the
//! pair halve even sizes exactly.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

fn check_spatial(input: &Tensor, op: &str) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    if dims[2] < 2 {
        return Err(Error::invalid(format!("{op}: height {} < 2", dims[2])));
    }
    if dims[3] < 2 {
        return Err(Error::invalid(format!("{op}: width {} < 2", dims[3])));
    }
    Ok(dims)
}

/// 2×2 max pooling with stride 1. Returns the output and, per output cell,
/// the in-plane index of the selected input (first maximum in row-major order).
pub fn maxpool2x2_s1_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = check_spatial(input, "maxpool")?;
    let (ho, wo) = (h - 1, w - 1);
    let x = input.data();
    let planes = n * c;
    let results = par::map_indices(planes, |idx| {
        let p = &x[idx * h * w..][..h * w];
        let mut out = Vec::with_capacity(ho * wo);
        let mut arg = Vec::with_capacity(ho * wo);
        for i in 0..ho {
            for j in 0..wo {
                let cands = [i * w + j, i * w + j + 1, (i + 1) * w + j, (i + 1) * w + j + 1];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                out.push(p[best]);
                arg.push(best as u32);
            }
        }
        (out, arg)
    });
    let mut data = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for (o, a) in results {
        data.extend(o);
        argmax.extend(a);
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], data), argmax))
}

pub fn maxpool2x2_s1(input: &Tensor) -> Result<Tensor> {
    maxpool2x2_s1_with_argmax(input).map(|(t, _)| t)
}

pub fn maxpool2x2_s1_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let plane_in = input_shape[2] * input_shape[3];
    let plane_out = (input_shape[2] - 1) * (input_shape[3] - 1);
    let g = grad_out.data();
    let mut gx = vec![0.0; input_shape.iter().product()];
    par::for_each_chunk(&mut gx, plane_in, |idx, plane| {
        let go = &g[idx * plane_out..][..plane_out];
        let am = &argmax[idx * plane_out..][..plane_out];
        for (&a, &v) in am.iter().zip(go) {
            plane[a as usize] += v;
        }
    });
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Normalised 2×2 box blur, stride 2, no padding: output ⌊H/2⌋ × ⌊W/2⌋.
pub fn blurpool2x2_s2(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = check_spatial(input, "blurpool")?;
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; n * c * ho * wo];
    par::for_each_chunk(&mut out, ho * wo, |idx, o| {
        let p = &x[idx * h * w..][..h * w];
        for i in 0..ho {
            let r0 = &p[2 * i * w..][..w];
            let r1 = &p[(2 * i + 1) * w..][..w];
            for j in 0..wo {
                o[i * wo + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * 0.25;
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn blurpool2x2_s2_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let g = grad_out.data();
    let mut gx = vec![0.0; input_shape.iter().product()];
    par::for_each_chunk(&mut gx, h * w, |idx, plane| {
        let go = &g[idx * ho * wo..][..ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let v = go[i * wo + j] * 0.25;
                plane[2 * i * w + 2 * j] += v;
                plane[2 * i * w + 2 * j + 1] += v;
                plane[(2 * i + 1) * w + 2 * j] += v;
                plane[(2 * i + 1) * w + 2 * j + 1] += v;
            }
        }
    });
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Repeats the last row `bottom` times and the last column `right` times.
pub fn replicate_pad(input: &Tensor, bottom: usize, right: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let (hp, wp) = (h + bottom, w + right);
    let x = input.data();
    let mut out = vec![0.0; n * c * hp * wp];
    par::for_each_chunk(&mut out, hp * wp, |idx, o| {
        let p = &x[idx * h * w..][..h * w];
        for i in 0..hp {
            let src = &p[i.min(h - 1) * w..][..w];
            let dst = &mut o[i * wp..][..wp];
            dst[..w].copy_from_slice(src);
            dst[w..].fill(src[w - 1]);
        }
    });
    Ok(Tensor::from_parts(vec![n, c, hp, wp], out))
}

pub fn replicate_pad_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let [_, _, hp, wp] = grad_out.dims4().expect("padded gradient is 4-d");
    let g = grad_out.data();
    let mut gx = vec![0.0; input_shape.iter().product()];
    par::for_each_chunk(&mut gx, h * w, |idx, plane| {
        let go = &g[idx * hp * wp..][..hp * wp];
        for i in 0..hp {
            let row = &go[i * wp..][..wp];
            let dst = &mut plane[i.min(h - 1) * w..][..w];
            for j in 0..wp {
                dst[j.min(w - 1)] += row[j];
            }
        }
    });
    Tensor::from_parts(input_shape.to_vec(), gx)
}
