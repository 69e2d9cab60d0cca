use rand::Rng as _;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Gradient is passed only where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

pub(crate) fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Draws one multiplier per (sample, channel): 0 with probability `p`,
/// otherwise `1/(1-p)`. With `p == 0` no randomness is consumed.
pub fn dropout_scales(planes: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_rate(p)?;
    if p == 0.0 {
        return Ok(vec![1.0; planes]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..planes)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn apply_plane_scales(input: &Tensor, scales: &[f64]) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if scales.len() != n * c {
        return Err(Error::invalid("one dropout scale per channel map required"));
    }
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, plane, |idx, o| {
        let s = scales[idx];
        for (o, &v) in o.iter_mut().zip(&x[idx * plane..][..plane]) {
            *o = v * s;
        }
    });
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Channel-wise ("2-d") dropout with inverted scaling. When `active` is false
/// the input is returned unchanged.
pub fn dropout2d(input: &Tensor, p: f64, rng: &mut Rng, active: bool) -> Result<Tensor> {
    check_rate(p)?;
    if !active || p == 0.0 {
        return Ok(input.clone());
    }
    let [n, c, _, _] = input.dims4()?;
    let scales = dropout_scales(n * c, p, rng)?;
    apply_plane_scales(input, &scales)
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for (i, t) in inputs.iter().enumerate() {
        let [tn, tc, th, tw] = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::invalid(format!(
                "concat input 0 is {n}×·×{h}×{w} but input {i} is {tn}×·×{th}×{tw}"
            )));
        }
        total_c += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * plane..][..c * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total_c, h, w], out))
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let means = input
        .data()
        .chunks_exact(plane)
        .map(|p| super::sum(p) / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1], means))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane: usize = input_shape[2] * input_shape[3];
    let scale = 1.0 / plane as f64;
    let mut data = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// Softmax over the channel axis of every pixel, with max subtraction.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, c * plane, |b, o| {
        let xb = &x[b * c * plane..][..c * plane];
        let mut max = vec![f64::NEG_INFINITY; plane];
        for ch in 0..c {
            for (m, &v) in max.iter_mut().zip(&xb[ch * plane..][..plane]) {
                *m = m.max(v);
            }
        }
        let mut denom = vec![0.0; plane];
        for ch in 0..c {
            let src = &xb[ch * plane..][..plane];
            let dst = &mut o[ch * plane..][..plane];
            for i in 0..plane {
                let e = (src[i] - max[i]).exp();
                dst[i] = e;
                denom[i] += e;
            }
        }
        for ch in 0..c {
            for (d, &z) in o[ch * plane..][..plane].iter_mut().zip(&denom) {
                *d /= z;
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Adjoint of softmax given its output `probs`.
pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = probs.dims4()?;
    let plane = h * w;
    let p = probs.data();
    let g = grad_out.data();
    let mut out = vec![0.0; p.len()];
    par::for_each_chunk(&mut out, c * plane, |b, o| {
        let pb = &p[b * c * plane..][..c * plane];
        let gb = &g[b * c * plane..][..c * plane];
        let mut inner = vec![0.0; plane];
        for ch in 0..c {
            for i in 0..plane {
                inner[i] += pb[ch * plane + i] * gb[ch * plane + i];
            }
        }
        for ch in 0..c {
            for i in 0..plane {
                let k = ch * plane + i;
                o[k] = pb[k] * (gb[k] - inner[i]);
            }
        }
    });
    Ok(Tensor::from_parts(probs.shape().to_vec(), out))
}
