use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Fixed mask palette: class 0 black, then distinct hues; 255 (ignore) white.
pub const PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
];

fn palette_bytes() -> Vec<u8> {
    (0..256)
        .flat_map(|i| match i {
            255 => [255, 255, 255],
            i if i < PALETTE.len() => PALETTE[i],
            i => {
                let v = (i * 37 % 200 + 30) as u8;
                [v, 255 - v, (i * 91 % 256) as u8]
            }
        })
        .collect()
}

fn decode(path: &Path, expand: bool) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(if expand { Transformations::EXPAND } else { Transformations::IDENTITY });
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

fn encoder<'a>(path: &Path, w: usize, h: usize) -> Result<png::Encoder<'a, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let w = u32::try_from(w).map_err(|_| Error::format(path, "width exceeds PNG limits"))?;
    let h = u32::try_from(h).map_err(|_| Error::format(path, "height exceeds PNG limits"))?;
    Ok(png::Encoder::new(BufWriter::new(file), w, h))
}

fn write(path: &Path, enc: png::Encoder<'_, BufWriter<File>>, data: &[u8]) -> Result<()> {
    let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Decodes an 8- or 16-bit grayscale/RGB(A) PNG into C×H×W values in [0, 1].
/// Alpha is dropped.
pub fn load_image_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (info, buf) = decode(path, true)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (channels, keep) = match info.color_type {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(Error::format(path, "indexed images are not supported")),
    };
    let values: Vec<f64> = match info.bit_depth {
        BitDepth::Sixteen => buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0).collect(),
        BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        d => return Err(Error::format(path, format!("unsupported image bit depth {d:?}"))),
    };
    let plane = h * w;
    let mut out = vec![0.0; keep * plane];
    for i in 0..plane {
        for c in 0..keep {
            out[c * plane + i] = values[i * channels + c];
        }
    }
    Tensor::new([keep, h, w], out)
}

/// Writes a 1- or 3-channel C×H×W image, clamped to [0, 1].
pub fn save_image_png(path: impl AsRef<Path>, image: &Tensor, sixteen_bit: bool) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    let (c, h, w) = match *s {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => return Err(Error::invalid(format!("cannot store image of shape {s:?} as PNG"))),
    };
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(plane * c * if sixteen_bit { 2 } else { 1 });
    for i in 0..plane {
        for ch in 0..c {
            let v = d[ch * plane + i].clamp(0.0, 1.0);
            if sixteen_bit {
                bytes.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
            } else {
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut enc = encoder(path, w, h)?;
    enc.set_color(if c == 1 { ColorType::Grayscale } else { ColorType::Rgb });
    enc.set_depth(if sixteen_bit { BitDepth::Sixteen } else { BitDepth::Eight });
    write(path, enc, &bytes)
}

/// Reads class ids from an 8-bit indexed (or grayscale) PNG without
/// palette expansion.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (info, buf) = decode(path, false)?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::format(path, format!("mask bit depth must be 8, found {:?}", info.bit_depth)));
    }
    if !matches!(info.color_type, ColorType::Indexed | ColorType::Grayscale) {
        return Err(Error::format(path, format!("mask must be indexed or grayscale, found {:?}", info.color_type)));
    }
    Mask::new(info.height as usize, info.width as usize, buf)
}

pub fn save_mask_png(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let mut enc = encoder(path, mask.width(), mask.height())?;
    enc.set_color(ColorType::Indexed);
    enc.set_depth(BitDepth::Eight);
    enc.set_palette(palette_bytes());
    write(path, enc, mask.data())
}

/// Loads an image/mask pair, checking that their sizes agree.
pub fn load_pair(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<Sample> {
    let image = load_image_png(&image_path)?;
    let mask = load_mask_png(&mask_path)?;
    let s = image.shape();
    if (s[1], s[2]) != (mask.height(), mask.width()) {
        return Err(Error::format(
            mask_path.as_ref(),
            format!(
                "mask is {}×{} but image {} is {}×{}",
                mask.height(),
                mask.width(),
                image_path.as_ref().display(),
                s[1],
                s[2]
            ),
        ));
    }
    Sample::new(image, mask)
}

/// Writes an entropy map as 16-bit grayscale, `max_entropy` mapping to 65535,
/// plus a `<path>.scale` sidecar recording the factor. Returns the factor.
pub fn save_entropy_png(
    path: impl AsRef<Path>,
    entropy: &[f64],
    height: usize,
    width: usize,
    max_entropy: f64,
) -> Result<f64> {
    let path = path.as_ref();
    if entropy.len() != height * width {
        return Err(Error::invalid(format!("entropy map has {} values for {height}×{width}", entropy.len())));
    }
    if !(max_entropy > 0.0) {
        return Err(Error::invalid(format!("max entropy {max_entropy} must be positive")));
    }
    let scale = 65535.0 / max_entropy;
    let bytes: Vec<u8> = entropy
        .iter()
        .flat_map(|&e| ((e * scale).round().clamp(0.0, 65535.0) as u16).to_be_bytes())
        .collect();
    let mut enc = encoder(path, width, height)?;
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(BitDepth::Sixteen);
    write(path, enc, &bytes)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".scale");
    let text = format!("max_entropy_nats={max_entropy}\nscale={scale}\n");
    std::fs::write(&sidecar, text).map_err(|e| Error::io(Path::new(&sidecar), e))?;
    Ok(scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_keeps_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(2, 3, vec![0, 1, 255, 10, 7, 0]).unwrap();
        save_mask_png(&p, &m).unwrap();
        assert_eq!(load_mask_png(&p).unwrap(), m);
    }

    #[test]
    fn image_round_trip_both_depths() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Tensor::new([3, 4, 5], data).unwrap();
        for sixteen in [false, true] {
            let p = dir.path().join(format!("i{sixteen}.png"));
            save_image_png(&p, &img, sixteen).unwrap();
            let back = load_image_png(&p).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-12);
        }
    }

    #[test]
    fn pair_dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, mp) = (dir.path().join("i.png"), dir.path().join("m.png"));
        save_image_png(&ip, &Tensor::zeros([3, 4, 4]), false).unwrap();
        save_mask_png(&mp, &Mask::filled(4, 5, 0)).unwrap();
        let err = load_pair(&ip, &mp).unwrap_err().to_string();
        assert!(err.contains("4×5"), "{err}");
    }

    #[test]
    fn sixteen_bit_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m16.png");
        save_image_png(&p, &Tensor::zeros([1, 2, 2]), true).unwrap();
        let err = load_mask_png(&p).unwrap_err().to_string();
        assert!(err.contains("bit depth"), "{err}");
        assert!(load_mask_png(dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn entropy_png_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.png");
        let ln2 = 2f64.ln();
        let scale = save_entropy_png(&p, &[0.0, ln2, ln2 / 2.0, 0.1], 2, 2, ln2).unwrap();
        assert!((scale - 65535.0 / ln2).abs() < 1e-9);
        let back = load_image_png(&p).unwrap();
        assert_eq!(back.data()[1], 1.0);
        assert!(std::fs::read_to_string(dir.path().join("e.png.scale")).unwrap().contains("scale="));
    }
}
