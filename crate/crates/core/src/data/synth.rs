use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Discs,
    Stripes,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discs" => Ok(ShapeKind::Discs),
            "stripes" => Ok(ShapeKind::Stripes),
            other => Err(Error::invalid(format!("unknown shape kind `{other}` (expected discs or stripes)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub size: usize,
    pub num_classes: usize,
    pub kind: ShapeKind,
    pub noise_sigma: f64,
    /// Disc radius range as a fraction of the image size. Smaller discs make
    /// the foreground rarer.
    pub radius: [f64; 2],
    /// Shapes drawn per image (discs only).
    pub shapes_per_image: usize,
}

impl SynthSpec {
    pub fn discs(num_samples: usize, size: usize, noise_sigma: f64) -> Self {
        SynthSpec {
            num_samples,
            size,
            num_classes: 2,
            kind: ShapeKind::Discs,
            noise_sigma,
            radius: [0.15, 0.3],
            shapes_per_image: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.size < 16 {
            errs.push(format!("size {} must be at least 16", self.size));
        }
        if !(2..=PALETTE_LEN).contains(&self.num_classes) {
            errs.push(format!("num_classes {} must be in 2..={PALETTE_LEN}", self.num_classes));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        let [lo, hi] = self.radius;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            errs.push(format!("radius range {:?} must satisfy 0 < lo <= hi < 0.5", self.radius));
        }
        if self.shapes_per_image == 0 {
            errs.push("shapes_per_image must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(errs.join("; ")))
        }
    }
}

const PALETTE_LEN: usize = 8;

/// Class colours; class 0 is the background.
const COLORS: [[f64; 3]; PALETTE_LEN] = [
    [0.25, 0.25, 0.3],
    [0.85, 0.35, 0.3],
    [0.3, 0.75, 0.35],
    [0.3, 0.4, 0.9],
    [0.9, 0.85, 0.3],
    [0.75, 0.35, 0.85],
    [0.3, 0.85, 0.85],
    [0.95, 0.6, 0.2],
];

fn draw_mask(spec: &SynthSpec, rng: &mut Rng) -> Vec<u8> {
    let s = spec.size;
    let mut ids = vec![0u8; s * s];
    match spec.kind {
        ShapeKind::Discs => {
            for _ in 0..spec.shapes_per_image {
                let r = rng.random_range(spec.radius[0]..=spec.radius[1]) * s as f64;
                let cy = rng.random_range(r..=(s - 1) as f64 - r);
                let cx = rng.random_range(r..=(s - 1) as f64 - r);
                let class = rng.random_range(1..spec.num_classes) as u8;
                for y in 0..s {
                    for x in 0..s {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dx * dx + dy * dy <= r * r {
                            ids[y * s + x] = class;
                        }
                    }
                }
            }
        }
        ShapeKind::Stripes => {
            let vertical = rng.random_bool(0.5);
            let mut pos = 0;
            while pos < s {
                let width = rng.random_range((s / 8).max(1)..=(s / 4).max(1));
                let class = rng.random_range(0..spec.num_classes) as u8;
                for p in pos..(pos + width).min(s) {
                    for q in 0..s {
                        let (y, x) = if vertical { (q, p) } else { (p, q) };
                        ids[y * s + x] = class;
                    }
                }
                pos += width;
            }
        }
    }
    ids
}

/// Images of class-coloured shapes with Gaussian pixel noise, plus their
/// exact masks.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut Rng) -> Result<Vec<Sample>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let s = spec.size;
    let plane = s * s;
    (0..spec.num_samples)
        .map(|_| {
            let ids = draw_mask(spec, rng);
            let mut img = vec![0.0; 3 * plane];
            for (i, &id) in ids.iter().enumerate() {
                for ch in 0..3 {
                    let n = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    img[ch * plane + i] = (COLORS[id as usize][ch] + n).clamp(0.0, 1.0);
                }
            }
            Sample::new(Tensor::new([3, s, s], img)?, Mask::new(s, s, ids)?)
        })
        .collect()
}
