//! Batch normalisation that always normalises with the statistics of the
//! current batch. There are no running averages.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel statistics saved by the forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    let c = dims[1];
    if gamma.len() != c || beta.len() != c {
        return Err(Error::invalid(format!(
            "batchnorm over {c} channels got gamma/beta of length {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if dims[0] * dims[2] * dims[3] == 1 {
        return Err(Error::DegenerateStatistics(format!(
            "one value per channel in a {dims:?} batch"
        )));
    }
    Ok(dims)
}

pub fn batchnorm2d(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    batchnorm2d_with_stats(input, gamma, beta, eps).map(|(y, _)| y)
}

/// Biased mean / variance over N, H, W of each channel.
pub fn batch_stats(input: &Tensor, eps: f64) -> Result<BatchStats> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let x = input.data();
    let stats = par::map_indices(c, |ch| {
        let mut total = 0.0;
        for b in 0..n {
            total += super::sum(&x[(b * c + ch) * plane..][..plane]);
        }
        let mean = total / count;
        let mut sq = 0.0;
        for b in 0..n {
            let p = &x[(b * c + ch) * plane..][..plane];
            let mut acc = [0.0f64; 4];
            let chunks = p.chunks_exact(4);
            let rem = chunks.remainder();
            for v in chunks {
                for i in 0..4 {
                    let d = v[i] - mean;
                    acc[i] += d * d;
                }
            }
            let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
            for v in rem {
                s += (v - mean) * (v - mean);
            }
            sq += s;
        }
        (mean, 1.0 / (sq / count + eps).sqrt())
    });
    let (mean, inv_std) = stats.into_iter().unzip();
    Ok(BatchStats { mean, inv_std })
}

pub fn batchnorm2d_with_stats(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchStats)> {
    let [_, c, h, w] = check(input, gamma, beta)?;
    let stats = batch_stats(input, eps)?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk(&mut out, plane, |idx, o| {
        let ch = idx % c;
        let scale = gamma.data()[ch] * stats.inv_std[ch];
        let shift = beta.data()[ch] - stats.mean[ch] * scale;
        for (o, &v) in o.iter_mut().zip(&x[idx * plane..][..plane]) {
            *o = v * scale + shift;
        }
    });
    Ok((Tensor::from_parts(input.shape().to_vec(), out), stats))
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm2d_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &BatchStats,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let [n, c, h, w] = input.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let x = input.data();
    let go = grad_out.data();
    // Σ g and Σ g·x̂ per channel.
    let sums = par::map_indices(c, |ch| {
        let (mean, inv) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            let gp = &go[off..][..plane];
            let xp = &x[off..][..plane];
            let s = super::sum(gp);
            sg += s;
            sgx += (super::dot(gp, xp) - mean * s) * inv;
        }
        (sg, sgx)
    });
    let mut gx = vec![0.0; x.len()];
    par::for_each_chunk(&mut gx, plane, |idx, out| {
        let ch = idx % c;
        let (sg, sgx) = sums[ch];
        let (mean, inv) = (stats.mean[ch], stats.inv_std[ch]);
        let k = gamma.data()[ch] * inv / count;
        let gp = &go[idx * plane..][..plane];
        let xp = &x[idx * plane..][..plane];
        for ((o, &g), &v) in out.iter_mut().zip(gp).zip(xp) {
            let xhat = (v - mean) * inv;
            *o = k * (count * g - sg - xhat * sgx);
        }
    });
    Ok(BatchNormGrads {
        input: Tensor::from_parts(input.shape().to_vec(), gx),
        gamma: Tensor::from_parts(vec![c], sums.iter().map(|s| s.1).collect()),
        beta: Tensor::from_parts(vec![c], sums.iter().map(|s| s.0).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalises_to_zero_mean_unit_variance() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 31 % 23) as f64) * 0.7 - 3.0).collect();
        let x = Tensor::new([2, 3, 4, 5], data).unwrap();
        let y = batchnorm2d(&x, &Tensor::full([3], 1.0), &Tensor::zeros([3]), DEFAULT_EPS).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 3 + ch) * 20..][..20].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 40.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::full([2, 1, 3, 3], 4.2);
        let y = batchnorm2d(&x, &Tensor::full([1], 1.0), &Tensor::full([1], 5.0), DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-5));
    }

    #[test]
    fn two_values_without_eps() {
        let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = batchnorm2d(&x, &Tensor::full([1], 1.0), &Tensor::zeros([1]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let x = Tensor::zeros([1, 2, 1, 1]);
        let err = batchnorm2d(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), DEFAULT_EPS).unwrap_err();
        assert!(matches!(err, Error::DegenerateStatistics(_)));
    }

    #[test]
    fn parameter_length_checked() {
        let x = Tensor::zeros([1, 2, 2, 2]);
        assert!(batchnorm2d(&x, &Tensor::full([3], 1.0), &Tensor::zeros([2]), DEFAULT_EPS).is_err());
    }
}
