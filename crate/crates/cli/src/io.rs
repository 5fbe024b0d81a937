//! Image, depth and text file I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use distvar_core::field::ScalarField;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

/// A grayscale or RGB image as one field per channel, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: Vec<ScalarField>,
}

impl Image {
    pub fn gray(u: ScalarField) -> Self {
        Self { channels: vec![u] }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn is_rgb(&self) -> bool {
        self.channels.len() == 3
    }

    /// Luminance plane (Rec.601 for RGB).
    pub fn luma(&self) -> Result<ScalarField> {
        if self.is_rgb() {
            Ok(distvar_core::metrics::luminance(&self.channels[0], &self.channels[1], &self.channels[2])?)
        } else {
            Ok(self.channels[0].clone())
        }
    }
}

fn planes_from(width: usize, height: usize, channels: usize, samples: &[u16], pitch: f64) -> Result<Image> {
    let planes = (0..channels)
        .map(|c| {
            let data = samples.iter().skip(c).step_by(channels).map(|&v| v as f64 / 65535.0).collect();
            Ok(ScalarField::new(width, height, data)?.with_pitch(pitch))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Image { channels: planes })
}

/// Reads 8/16-bit grayscale or RGB PNG, or binary PGM. Alpha is dropped.
pub fn read_image(path: &Path, pitch: f64) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.into_rgb16();
        planes_from(w, h, 3, rgb.as_raw(), pitch)
    } else {
        let gray = img.into_luma16();
        planes_from(w, h, 1, gray.as_raw(), pitch)
    }
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a 16-bit PNG (grayscale or RGB), clamping to `[0, 1]`.
pub fn write_png16(path: &Path, image: &Image) -> Result<()> {
    let (w, h) = image.dims();
    let (w32, h32) = (w as u32, h as u32);
    let dynamic = if image.is_rgb() {
        let mut raw = Vec::with_capacity(3 * w * h);
        for i in 0..w * h {
            for c in &image.channels {
                raw.push(quantize(c.data()[i]));
            }
        }
        DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, raw).ok_or_else(|| anyhow!("bad RGB buffer"))?,
        )
    } else {
        let raw = image.channels[0].data().iter().map(|&v| quantize(v)).collect();
        DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, raw).ok_or_else(|| anyhow!("bad gray buffer"))?,
        )
    };
    dynamic
        .save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Reads a depth map in meters: PFM as stored, or an integer grayscale PNG
/// / PGM scaled by `depth_scale` meters per unit.
pub fn read_depth(path: &Path, depth_scale: f64, pitch: f64) -> Result<ScalarField> {
    let is_pfm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let depth = if is_pfm {
        read_pfm(path)?
    } else {
        let img = image::open(path).with_context(|| format!("cannot read depth map {}", path.display()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw: Vec<f64> = match img {
            DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64).collect(),
            DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64).collect(),
            _ => bail!("depth map {} must be single-channel", path.display()),
        };
        ScalarField::new(w, h, raw.into_iter().map(|v| v * depth_scale).collect())?
    };
    let min = depth.min_value();
    if !(min > 0.0) {
        bail!("depth map {} must be strictly positive (minimum {min})", path.display());
    }
    Ok(depth.with_pitch(pitch))
}

fn read_token(reader: &mut impl BufRead) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8];
        if reader.read(&mut byte)? == 0 {
            break;
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
    }
    String::from_utf8(token).map_err(|_| anyhow!("non-ASCII PFM header"))
}

/// Single-channel PFM (`Pf`); rows are stored bottom to top.
pub fn read_pfm(path: &Path) -> Result<ScalarField> {
    let mut reader = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
    let magic = read_token(&mut reader)?;
    if magic != "Pf" {
        bail!("{}: expected single-channel PFM (Pf), found `{magic}`", path.display());
    }
    let w: usize = read_token(&mut reader)?.parse().context("bad PFM width")?;
    let h: usize = read_token(&mut reader)?.parse().context("bad PFM height")?;
    let scale: f64 = read_token(&mut reader)?.parse().context("bad PFM scale")?;
    let mut bytes = vec![0u8; 4 * w * h];
    reader
        .read_exact(&mut bytes)
        .with_context(|| format!("{}: truncated PFM data", path.display()))?;
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (i % w, i / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Ok(ScalarField::new(w, h, data)?)
}

pub fn write_pfm(path: &Path, u: &ScalarField) -> Result<()> {
    let (w, h) = u.dims();
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    for row in (0..h).rev() {
        for x in 0..w {
            out.write_all(&(u.get(x, row) as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes text with LF line endings.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
