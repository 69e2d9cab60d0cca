use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::ops::bilinear_resize;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation bound, in turns.
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter { contrast: 0.2, saturation: 0.2, hue: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub scale_range: [f64; 2],
    pub aspect_range: [f64; 2],
    pub crop_size: Option<usize>,
    pub hflip: bool,
    pub vflip: bool,
    pub jitter: Option<ColorJitter>,
    pub normalize: Option<Normalize>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            scale_range: [0.5, 2.0],
            aspect_range: [3.0 / 4.0, 4.0 / 3.0],
            crop_size: None,
            hflip: true,
            vflip: false,
            jitter: Some(ColorJitter::default()),
            normalize: None,
        }
    }
}

impl AugmentSpec {
    /// No geometric or photometric change.
    pub fn identity() -> Self {
        AugmentSpec {
            scale_range: [1.0, 1.0],
            aspect_range: [1.0, 1.0],
            crop_size: None,
            hflip: false,
            vflip: false,
            jitter: None,
            normalize: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.scale_range) || !ordered(self.aspect_range) {
            return Err(Error::invalid(format!(
                "scale {:?} and aspect {:?} ranges must be positive and ordered",
                self.scale_range, self.aspect_range
            )));
        }
        if self.crop_size == Some(0) {
            return Err(Error::invalid("crop size must be positive"));
        }
        if let Some(j) = &self.jitter {
            if !(0.0..1.0).contains(&j.contrast) || !(0.0..1.0).contains(&j.saturation) || !(0.0..=0.5).contains(&j.hue) {
                return Err(Error::invalid(format!("jitter magnitudes {j:?} out of range")));
            }
        }
        if let Some(n) = &self.normalize {
            check_std(&n.std)?;
        }
        Ok(())
    }
}

fn check_std(std: &[f64]) -> Result<()> {
    match std.iter().position(|&s| !(s > 0.0)) {
        Some(c) => Err(Error::invalid(format!("channel {c} has non-positive std {}", std[c]))),
        None => Ok(()),
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// `(x − mean_c) / std_c` per channel of a C×H×W image.
pub fn normalize_channels(image: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let c = image.shape()[0];
    if mean.len() != c || std.len() != c {
        return Err(Error::invalid(format!(
            "normalisation has {} means / {} stds for {c} channels",
            mean.len(),
            std.len()
        )));
    }
    check_std(std)?;
    let plane = image.len() / c;
    let mut out = image.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - mean[ch]) / std[ch];
        }
    }
    Ok(out)
}

fn resize_mask(mask: &Mask, h: usize, w: usize) -> Mask {
    let src = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let rows: Vec<usize> = (0..h).map(|i| src(i, h, mask.height())).collect();
    let cols: Vec<usize> = (0..w).map(|j| src(j, w, mask.width())).collect();
    let data = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).map(|(r, c)| mask.get(r, c)).collect();
    Mask::new(h, w, data).expect("sized")
}

fn resize(sample: &Sample, h: usize, w: usize) -> Result<Sample> {
    if (h, w) == (sample.height(), sample.width()) {
        return Ok(sample.clone());
    }
    let c = sample.channels();
    let img = sample.image.clone().reshape([1, c, sample.height(), sample.width()])?;
    let img = bilinear_resize(&img, h, w)?.reshape([c, h, w])?;
    Ok(Sample { image: img, mask: resize_mask(&sample.mask, h, w), ignore_index: sample.ignore_index })
}

/// Replicate-pads the image and ignore-pads the mask on the bottom/right up
/// to `size`, then cuts a `size`×`size` window at a random offset.
fn crop(sample: &Sample, size: usize, rng: &mut Rng) -> Sample {
    let (h, w, c) = (sample.height(), sample.width(), sample.channels());
    let top = if h > size { rng.random_range(0..=h - size) } else { 0 };
    let left = if w > size { rng.random_range(0..=w - size) } else { 0 };
    let plane = h * w;
    let src = sample.image.data();
    let mut img = vec![0.0; c * size * size];
    let mut ids = vec![sample.ignore_index; size * size];
    for i in 0..size {
        let y = top + i;
        for j in 0..size {
            let x = left + j;
            for ch in 0..c {
                img[ch * size * size + i * size + j] = src[ch * plane + y.min(h - 1) * w + x.min(w - 1)];
            }
            if y < h && x < w {
                ids[i * size + j] = sample.mask.get(y, x);
            }
        }
    }
    Sample {
        image: Tensor::new([c, size, size], img).expect("sized"),
        mask: Mask::new(size, size, ids).expect("sized"),
        ignore_index: sample.ignore_index,
    }
}

fn flip(sample: &Sample, horizontal: bool) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let at = |i: usize, j: usize| if horizontal { i * w + (w - 1 - j) } else { (h - 1 - i) * w + j };
    let mut out = sample.clone();
    let plane = h * w;
    for (dst, src) in out.image.data_mut().chunks_mut(plane).zip(sample.image.data().chunks(plane)) {
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[at(i, j)];
            }
        }
    }
    let m = out.mask.data_mut();
    for i in 0..h {
        for j in 0..w {
            m[i * w + j] = sample.mask.data()[at(i, j)];
        }
    }
    out
}

pub fn hflip(sample: &Sample) -> Sample {
    flip(sample, true)
}

pub fn vflip(sample: &Sample) -> Sample {
    flip(sample, false)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn jitter(image: &mut Tensor, spec: &ColorJitter, rng: &mut Rng) {
    let c = image.shape()[0];
    let contrast = uniform(rng, [1.0 - spec.contrast, 1.0 + spec.contrast]);
    let saturation = uniform(rng, [1.0 - spec.saturation, 1.0 + spec.saturation]);
    let hue = uniform(rng, [-spec.hue, spec.hue]);
    let plane = image.len() / c;
    let d = image.data_mut();
    if c != 3 {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        for v in d.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        return;
    }
    let luma = |d: &[f64], i: usize| (0..3).map(|ch| LUMA[ch] * d[ch * plane + i]).sum::<f64>();
    let mean = (0..plane).map(|i| luma(d, i)).sum::<f64>() / plane as f64;
    let (sin, cos) = (hue * std::f64::consts::TAU).sin_cos();
    for i in 0..plane {
        let mut px = [d[i], d[plane + i], d[2 * plane + i]];
        for v in &mut px {
            *v = (*v - mean) * contrast + mean;
        }
        let y = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
        for v in &mut px {
            *v = y + (*v - y) * saturation;
        }
        // Rotate chroma in YIQ space.
        let ci = 0.596 * px[0] - 0.274 * px[1] - 0.322 * px[2];
        let cq = 0.211 * px[0] - 0.523 * px[1] + 0.312 * px[2];
        let (ri, rq) = (ci * cos - cq * sin, ci * sin + cq * cos);
        let rgb = [y + 0.956 * ri + 0.621 * rq, y - 0.272 * ri - 0.647 * rq, y - 1.106 * ri + 1.703 * rq];
        for ch in 0..3 {
            d[ch * plane + i] = rgb[ch].clamp(0.0, 1.0);
        }
    }
}

/// Rescale → aspect stretch → crop → flips → colour jitter → normalisation.
/// Images resample bilinearly, masks by nearest neighbour.
pub fn augment(sample: &Sample, spec: &AugmentSpec, rng: &mut Rng) -> Result<Sample> {
    spec.validate()?;
    let scale = uniform(rng, spec.scale_range);
    let aspect = uniform(rng, [spec.aspect_range[0].ln(), spec.aspect_range[1].ln()]).exp();
    let h = ((sample.height() as f64 * scale / aspect.sqrt()).round() as usize).max(1);
    let w = ((sample.width() as f64 * scale * aspect.sqrt()).round() as usize).max(1);
    let mut s = resize(sample, h, w)?;
    if let Some(size) = spec.crop_size {
        s = crop(&s, size, rng);
    }
    if spec.hflip && rng.random_bool(0.5) {
        s = hflip(&s);
    }
    if spec.vflip && rng.random_bool(0.5) {
        s = vflip(&s);
    }
    if let Some(j) = &spec.jitter {
        jitter(&mut s.image, j, rng);
    }
    if let Some(n) = &spec.normalize {
        s.image = normalize_channels(&s.image, &n.mean, &n.std)?;
    }
    Ok(s)
}
