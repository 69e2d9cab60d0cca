//! Image/mask datasets: PNG ingestion, augmentation, normalisation,
//! deterministic splits and a synthetic shape generator.

mod augment;
mod manifest;
mod png_io;
mod split;
mod synth;

pub use augment::{augment, hflip, normalize_channels, vflip, AugmentSpec, ColorJitter, Normalize};
pub use manifest::{load_manifest, read_manifest, write_manifest};
pub use png_io::{
    load_image_png, load_mask_png, load_pair, save_entropy_png, save_image_png, save_mask_png, PALETTE,
};
pub use split::{split, split_indices};
pub use synth::{synth_dataset, ShapeKind, SynthSpec};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const DEFAULT_IGNORE: u8 = 255;

/// One image (C×H×W, values in [0, 1] before normalisation) with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
    pub ignore_index: u8,
}

impl Sample {
    pub fn new(image: Tensor, mask: Mask) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::invalid(format!("image must be C×H×W, got shape {s:?}")));
        }
        if (s[1], s[2]) != (mask.height(), mask.width()) {
            return Err(Error::invalid(format!(
                "image is {}×{}, mask is {}×{}",
                s[1],
                s[2],
                mask.height(),
                mask.width()
            )));
        }
        Ok(Sample { image, mask, ignore_index: DEFAULT_IGNORE })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Stacks equally sized samples into an N×C×H×W batch.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<Mask>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::invalid(format!(
                "batch mixes image shapes {:?} and {:?}",
                shape,
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    let t = Tensor::new([samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((t, samples.iter().map(|s| s.mask.clone()).collect()))
}

/// Per-channel mean and (population) standard deviation over all pixels.
pub fn channel_stats(samples: &[Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = samples.first().ok_or_else(|| Error::EmptyDataset("no samples".into()))?.channels();
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for s in samples {
        let plane = s.height() * s.width();
        for (ch, acc) in sum.iter_mut().enumerate() {
            *acc += crate::ops::sum(&s.image.data()[ch * plane..][..plane]);
        }
        count += plane;
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
    let mut sq = vec![0.0; c];
    for s in samples {
        let plane = s.height() * s.width();
        for ch in 0..c {
            sq[ch] += s.image.data()[ch * plane..][..plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    Ok((mean, sq.into_iter().map(|v| (v / count as f64).sqrt()).collect()))
}
