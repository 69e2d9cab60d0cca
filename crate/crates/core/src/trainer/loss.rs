use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::ops::softmax_channels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    /// Weight of the cross-entropy term; the Dice term gets `1 − alpha`.
    pub alpha: f64,
    pub dice_eps: f64,
    /// Add `−ln(softDice)`.
    pub log_dice: bool,
    pub ignore_index: Option<u8>,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { alpha: 0.5, dice_eps: 1.0, log_dice: false, ignore_index: Some(255) }
    }
}

/// Median-frequency class weights over the non-ignored pixels of `masks`.
/// Absent classes get weight 0.
pub fn class_weights(masks: &[Mask], num_classes: usize, ignore_index: Option<u8>) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        for &id in m.data() {
            if Some(id) == ignore_index {
                continue;
            }
            let slot = counts
                .get_mut(id as usize)
                .ok_or_else(|| Error::invalid(format!("class id {id} outside 0..{num_classes}")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset("every pixel is ignored".into()));
    }
    let mut freq: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64).collect();
    freq.sort_by(f64::total_cmp);
    let mid = freq.len() / 2;
    let median = if freq.len().is_multiple_of(2) { 0.5 * (freq[mid - 1] + freq[mid]) } else { freq[mid] };
    Ok(counts.iter().map(|&c| if c == 0 { 0.0 } else { median * total as f64 / c as f64 }).collect())
}

/// Combo loss of N×C×H×W logits against per-image masks, with its gradient
/// with respect to the logits.
///
/// `L = α·WCE + (1−α)·(1 − D) [− ln D]`, where WCE is the class-weighted
/// cross-entropy normalised by the total weight of the counted pixels and
/// `D` the soft Dice score `(2Σpt + ε)/(Σp + Σt + ε)` averaged over classes
/// with positive weight.
pub fn combo_loss(logits: &Tensor, targets: &[Mask], weights: &[f64], opts: &LossOptions) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = logits.dims4()?;
    if targets.len() != n || weights.len() != c {
        return Err(Error::invalid(format!(
            "{n} images / {c} classes but {} masks / {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::invalid(format!("alpha {} outside [0, 1]", opts.alpha)));
    }
    let plane = h * w;
    for (b, m) in targets.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::invalid(format!("mask {b} is {}×{}, logits are {h}×{w}", m.height(), m.width())));
        }
        if let Some(&bad) = m.data().iter().find(|&&id| Some(id) != opts.ignore_index && id as usize >= c) {
            return Err(Error::invalid(format!("mask {b} holds class id {bad} but there are {c} classes")));
        }
    }
    let probs = softmax_channels(logits)?;
    let p = probs.data();

    // Accumulate cross-entropy and per-class Dice sums over valid pixels.
    let mut wsum = 0.0;
    let mut ce = 0.0;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut tsum = vec![0.0; c];
    for (b, m) in targets.iter().enumerate() {
        let pb = &p[b * c * plane..][..c * plane];
        for (i, &t) in m.data().iter().enumerate() {
            if Some(t) == opts.ignore_index {
                continue;
            }
            let t = t as usize;
            let wt = weights[t];
            wsum += wt;
            if wt > 0.0 {
                ce -= wt * pb[t * plane + i].max(f64::MIN_POSITIVE).ln();
            }
            for k in 0..c {
                psum[k] += pb[k * plane + i];
            }
            inter[t] += pb[t * plane + i];
            tsum[t] += 1.0;
        }
    }
    let counted: Vec<usize> = (0..c).filter(|&k| weights[k] > 0.0).collect();
    let eps = opts.dice_eps;
    let dice_c: Vec<f64> = (0..c).map(|k| (2.0 * inter[k] + eps) / (psum[k] + tsum[k] + eps)).collect();
    let wce = if wsum > 0.0 { ce / wsum } else { 0.0 };
    let dice = if counted.is_empty() {
        1.0
    } else {
        counted.iter().map(|&k| dice_c[k]).sum::<f64>() / counted.len() as f64
    };
    let mut loss = opts.alpha * wce + (1.0 - opts.alpha) * (1.0 - dice);
    let mut dl_ddice = -(1.0 - opts.alpha);
    if opts.log_dice {
        loss -= dice.ln();
        dl_ddice -= 1.0 / dice;
    }

    // dD/dp_ki for valid pixels: (2t·den − num)/den² / |counted|, split into
    // a per-class constant and a target-dependent part.
    let mut base = vec![0.0; c];
    let mut on_target = vec![0.0; c];
    for &k in &counted {
        let den = psum[k] + tsum[k] + eps;
        let num = 2.0 * inter[k] + eps;
        let scale = dl_ddice / counted.len() as f64;
        base[k] = -scale * num / (den * den);
        on_target[k] = scale * 2.0 / den;
    }
    let mut grad = vec![0.0; p.len()];
    let mut g = vec![0.0; c];
    for (b, m) in targets.iter().enumerate() {
        let pb = &p[b * c * plane..][..c * plane];
        let gb = &mut grad[b * c * plane..][..c * plane];
        for (i, &t) in m.data().iter().enumerate() {
            if Some(t) == opts.ignore_index {
                continue;
            }
            let t = t as usize;
            // Dice part through the softmax Jacobian.
            g.copy_from_slice(&base);
            g[t] += on_target[t];
            let dot: f64 = (0..c).map(|k| pb[k * plane + i] * g[k]).sum();
            let ce_scale = if wsum > 0.0 { opts.alpha * weights[t] / wsum } else { 0.0 };
            for k in 0..c {
                let pk = pb[k * plane + i];
                let onehot = if k == t { 1.0 } else { 0.0 };
                gb[k * plane + i] = pk * (g[k] - dot) + ce_scale * (pk - onehot);
            }
        }
    }
    Ok((loss, Tensor::new([n, c, h, w], grad)?))
}
