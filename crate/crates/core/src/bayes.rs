//! Monte Carlo dropout inference: repeated stochastic passes, their mean
//! softmax, pixel-wise predictive entropy, argmax masks and overlap metrics.

use crate::arch::Graph;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::ops::softmax_channels;
use crate::par;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McOptions {
    pub samples: usize,
    pub seed: u64,
    /// Sample dropout masks; when off every pass is the deterministic network.
    pub dropout: bool,
    /// Keep every per-sample probability map.
    pub keep_samples: bool,
}

impl McOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        McOptions { samples, seed, dropout: true, keep_samples: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    /// `S` tensors shaped like the logits, when requested.
    pub sample_probs: Option<Vec<Tensor>>,
    /// N×C×H×W mean of the per-sample softmax outputs.
    pub mean_probs: Tensor,
    /// N×C×H×W population variance of the per-sample probabilities.
    pub variance: Tensor,
    /// One argmax mask per image.
    pub masks: Vec<Mask>,
    /// N×1×H×W predictive entropy in nats.
    pub entropy: Tensor,
}

/// Running mean and sum of squared deviations over a set of samples.
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn leaf(p: &Tensor) -> Self {
        Moments { count: 1.0, mean: p.data().to_vec(), m2: vec![0.0; p.len()] }
    }

    fn merge(mut self, other: Moments) -> Self {
        let n = self.count + other.count;
        let wb = other.count / n;
        let cross = self.count * other.count / n;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * wb;
            self.m2[i] += other.m2[i] + d * d * cross;
        }
        self.count = n;
        self
    }
}

/// Pairwise reduction over a stream: the merge tree depends only on the
/// stream length, never on how leaves are batched.
#[derive(Default)]
struct PairwiseStack {
    stack: Vec<(u32, Moments)>,
}

impl PairwiseStack {
    fn push(&mut self, m: Moments) {
        let mut cur = (0u32, m);
        while let Some((level, _)) = self.stack.last() {
            if *level != cur.0 {
                break;
            }
            let (level, prev) = self.stack.pop().expect("non-empty");
            cur = (level + 1, prev.merge(cur.1));
        }
        self.stack.push(cur);
    }

    fn finish(mut self) -> Option<Moments> {
        let (_, mut acc) = self.stack.pop()?;
        while let Some((_, prev)) = self.stack.pop() {
            acc = prev.merge(acc);
        }
        Some(acc)
    }
}

/// Runs `S` passes with independent dropout streams derived from the seed.
/// Passes are evaluated in parallel batches; aggregation is deterministic.
pub fn mc_predict(graph: &Graph, input: &Tensor, opts: McOptions) -> Result<PredictiveResult> {
    if opts.samples == 0 {
        return Err(Error::invalid("sample count S must be at least 1"));
    }
    let batch = par::current_threads().max(1);
    let mut acc = PairwiseStack::default();
    let mut kept = opts.keep_samples.then(|| Vec::with_capacity(opts.samples));
    let mut start = 0;
    while start < opts.samples {
        let len = batch.min(opts.samples - start);
        let probs = par::map_indices(len, |i| {
            let mut rng = substream(opts.seed, "mc", (start + i) as u64);
            graph.infer(input, &mut rng, opts.dropout).and_then(|l| softmax_channels(&l))
        });
        for p in probs {
            let p = p?;
            acc.push(Moments::leaf(&p));
            if let Some(k) = kept.as_mut() {
                k.push(p);
            }
        }
        start += len;
    }
    let m = acc.finish().expect("at least one sample");
    let [n, _, h, w] = input.dims4()?;
    let shape = [n, graph.output_channels(), h, w];
    let s = m.count;
    let mean_probs = Tensor::new(shape, m.mean)?;
    let variance = Tensor::new(shape, m.m2.into_iter().map(|v| v / s).collect())?;
    let entropy = entropy_map(&mean_probs)?;
    let masks = predict_mask(&mean_probs)?;
    Ok(PredictiveResult { sample_probs: kept, mean_probs, variance, masks, entropy })
}

/// `−Σ_c p_c ln p_c` per pixel, with `0·ln 0 = 0`. Returns N×1×H×W.
pub fn entropy_map(probs: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = probs.dims4()?;
    let plane = h * w;
    let p = probs.data();
    let mut out = vec![0.0; n * plane];
    for b in 0..n {
        let pb = &p[b * c * plane..][..c * plane];
        for i in 0..plane {
            let mut total = 0.0;
            let mut e = 0.0;
            for ch in 0..c {
                let v = pb[ch * plane + i];
                total += v;
                if v > 0.0 {
                    e -= v * v.ln();
                }
            }
            if !(total - 1.0).abs().le(&1e-4) || pb.iter().skip(i).step_by(plane).any(|&v| v < 0.0) {
                return Err(Error::invalid(format!(
                    "pixel ({}, {}) of image {b} is not a probability vector (sum {total})",
                    i / w,
                    i % w
                )));
            }
            out[b * plane + i] = e.max(0.0);
        }
    }
    Tensor::new([n, 1, h, w], out)
}

/// Per-pixel argmax; ties resolve to the lowest class id.
pub fn predict_mask(probs: &Tensor) -> Result<Vec<Mask>> {
    let [n, c, h, w] = probs.dims4()?;
    if c > 256 {
        return Err(Error::invalid(format!("{c} classes do not fit 8-bit masks")));
    }
    let plane = h * w;
    let p = probs.data();
    (0..n)
        .map(|b| {
            let pb = &p[b * c * plane..][..c * plane];
            let ids = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for ch in 1..c {
                        if pb[ch * plane + i] > pb[best * plane + i] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask::new(h, w, ids)
        })
        .collect()
}

/// Class confusion counts, `counts[target * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    num_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &Mask, target: &Mask, ignore_index: Option<u8>) -> Result<()> {
        if (pred.height(), pred.width()) != (target.height(), target.width()) {
            return Err(Error::invalid(format!(
                "prediction is {}×{}, target is {}×{}",
                pred.height(),
                pred.width(),
                target.height(),
                target.width()
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            if Some(t) == ignore_index {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::invalid(format!("class id {} outside 0..{k}", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU, `None` for classes absent from both prediction and target.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let row: u64 = self.counts[c * k..][..k].iter().sum();
                let col: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes that occur; 0 when nothing was counted.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

pub fn miou(pred: &Mask, target: &Mask, num_classes: usize, ignore_index: Option<u8>) -> Result<f64> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, target, ignore_index)?;
    Ok(c.miou())
}

/// Mean over pixels whose `ignore` flag is unset.
pub fn mean_entropy(entropy: &[f64], ignore: Option<&[bool]>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &e) in entropy.iter().enumerate() {
        if ignore.is_some_and(|m| m[i]) {
            continue;
        }
        sum += e;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyReduction("every pixel is ignored".into()));
    }
    Ok(sum / n as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fractions as percentages with one decimal, e.g. `67.9±0.1`.
pub fn format_percent(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s)
}

/// Two decimals, e.g. `0.69±0.02`.
pub fn format_plain(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.2}±{s:.2}")
}
