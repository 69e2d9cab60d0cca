use rand::RngCore;

use crate::arch::Graph;
use crate::bayes::{mc_predict, mean_entropy, Confusion, McOptions};
use crate::data::{augment, AugmentSpec, Sample};
use crate::error::Result;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub ignore_index: u8,
    pub dropout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageEval {
    pub miou: f64,
    /// Over the pixels not marked `ignore_index`.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// From the confusion matrix accumulated over the whole dataset.
    pub miou: f64,
    /// Pixel-weighted over the dataset.
    pub mean_entropy: f64,
    pub images: Vec<ImageEval>,
}

/// Monte Carlo evaluation of a labelled dataset. `preprocess` is applied to
/// every image first (typically normalisation only).
pub fn evaluate_detailed(graph: &Graph, data: &[Sample], opts: &EvalOptions, preprocess: &AugmentSpec) -> Result<EvalReport> {
    let classes = graph.output_channels();
    let mut total = Confusion::new(classes);
    let mut images = Vec::with_capacity(data.len());
    let (mut entropy_sum, mut counted) = (0.0, 0usize);
    for (i, s) in data.iter().enumerate() {
        let s = augment(s, preprocess, &mut substream(opts.seed, "eval-aug", i as u64))?;
        let [c, h, w] = [s.channels(), s.height(), s.width()];
        let x = s.image.clone().reshape([1, c, h, w])?;
        let mc = McOptions {
            dropout: opts.dropout,
            ..McOptions::new(opts.samples, substream(opts.seed, "eval", i as u64).next_u64())
        };
        let r = mc_predict(graph, &x, mc)?;
        let mut conf = Confusion::new(classes);
        conf.add(&r.masks[0], &s.mask, Some(opts.ignore_index))?;
        total.merge(&conf);
        let ignored: Vec<bool> = s.mask.data().iter().map(|&t| t == opts.ignore_index).collect();
        let e = mean_entropy(r.entropy.data(), Some(&ignored))?;
        let n = ignored.iter().filter(|&&b| !b).count();
        entropy_sum += e * n as f64;
        counted += n;
        images.push(ImageEval { miou: conf.miou(), mean_entropy: e });
    }
    let mean_entropy = if counted == 0 { 0.0 } else { entropy_sum / counted as f64 };
    Ok(EvalReport { miou: total.miou(), mean_entropy, images })
}

/// Validation mIoU with dropout active and `samples` passes per image.
pub fn evaluate(graph: &Graph, val: &[Sample], samples: usize, seed: u64, ignore_index: u8, preprocess: &AugmentSpec) -> Result<f64> {
    let opts = EvalOptions { samples, seed, ignore_index, dropout: true };
    Ok(evaluate_detailed(graph, val, &opts, preprocess)?.miou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_combinet, ArchConfig};
    use crate::data::{synth_dataset, SynthSpec};

    #[test]
    fn report_is_consistent() {
        let g = build_combinet(&ArchConfig::preset("combinet-mini").unwrap(), 2).unwrap();
        let data = synth_dataset(&SynthSpec::discs(2, 16, 0.05), &mut substream(3, "synth", 0)).unwrap();
        let opts = EvalOptions { samples: 2, seed: 5, ignore_index: 255, dropout: true };
        let r = evaluate_detailed(&g, &data, &opts, &AugmentSpec::identity()).unwrap();
        assert_eq!(r.images.len(), 2);
        let avg = (r.images[0].mean_entropy + r.images[1].mean_entropy) / 2.0;
        assert!((r.mean_entropy - avg).abs() < 1e-12);
        assert!((0.0..=2f64.ln() + 1e-12).contains(&r.mean_entropy));
        assert_eq!(evaluate(&g, &data, 2, 5, 255, &AugmentSpec::identity()).unwrap(), r.miou);
    }
}
