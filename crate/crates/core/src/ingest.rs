//! Grayscale image IO and global segmentation into silhouettes.

use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, GrayImage as Gray8, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::SilhouetteImage;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("image has a single intensity; segmentation is undefined")]
    ConstantImage,
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }
}

/// Row-major 8- or 16-bit intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    depth: BitDepth,
    pixels: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, depth: BitDepth, pixels: Vec<u16>) -> Result<Self, IngestError> {
        if width == 0 || height == 0 {
            return Err(IngestError::Invalid("image has zero size".into()));
        }
        if pixels.len() != width * height {
            return Err(IngestError::Invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|&&p| p > depth.max_value()) {
            return Err(IngestError::Invalid(format!("value {p} exceeds {depth:?} range")));
        }
        Ok(GrayImage {
            width,
            height,
            depth,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> BitDepth {
        self.depth
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    fn histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.depth.max_value() as usize + 1];
        for &p in &self.pixels {
            hist[p as usize] += 1;
        }
        hist
    }
}

/// Otsu's threshold `t`: the split `{v ≤ t} | {v > t}` that maximizes the
/// between-class variance. Ties go to the lowest `t`.
pub fn otsu_threshold(img: &GrayImage) -> Result<u16, IngestError> {
    let hist = img.histogram();
    let total = img.pixels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();

    let mut best: Option<(u16, f64)> = None;
    let mut count_low = 0u64;
    let mut sum_low = 0.0;
    let max = hist.iter().rposition(|&c| c > 0).unwrap_or(0);
    for (t, &count) in hist.iter().enumerate().take(max) {
        count_low += count;
        sum_low += t as f64 * count as f64;
        if count_low == 0 {
            continue;
        }
        let w_low = count_low as f64 / total;
        let w_high = 1.0 - w_low;
        let mean_low = sum_low / count_low as f64;
        let mean_high = (sum_all - sum_low) / (total - count_low as f64);
        let between = w_low * w_high * (mean_low - mean_high).powi(2);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u16, between));
        }
    }
    best.map(|(t, _)| t).ok_or(IngestError::ConstantImage)
}

/// Which side of the threshold the vessels are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Subtraction angiograms: dark vessels on a bright background.
    #[default]
    VesselsDark,
    VesselsBright,
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "vessels_dark" | "dark" => Ok(Polarity::VesselsDark),
            "vessels_bright" | "bright" => Ok(Polarity::VesselsBright),
            other => Err(format!("unknown polarity '{other}'")),
        }
    }
}

/// Vessel mask in `{0, 1}`; a pixel is bright when its value is `> threshold`.
pub fn binarize(img: &GrayImage, threshold: u16, polarity: Polarity) -> SilhouetteImage {
    let values = img
        .pixels
        .iter()
        .map(|&p| {
            let bright = p > threshold;
            let vessel = match polarity {
                Polarity::VesselsBright => bright,
                Polarity::VesselsDark => !bright,
            };
            if vessel {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    SilhouetteImage::new(img.width, img.height, values).expect("binary values are in range")
}

/// Otsu threshold followed by [`binarize`].
pub fn segment(img: &GrayImage, polarity: Polarity) -> Result<SilhouetteImage, IngestError> {
    Ok(binarize(img, otsu_threshold(img)?, polarity))
}

/// Reads an 8/16-bit PNG or binary PGM. Color images are converted to luma.
pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage, IngestError> {
    let decoded = image::open(path)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma16(buf) => GrayImage::new(w, h, BitDepth::Sixteen, buf.into_raw()),
        DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            GrayImage::new(w, h, BitDepth::Sixteen, decoded.to_luma16().into_raw())
        }
        other => GrayImage::new(
            w,
            h,
            BitDepth::Eight,
            other.to_luma8().into_raw().into_iter().map(u16::from).collect(),
        ),
    }
}

/// Writes a silhouette as an 8-bit PNG. With `VesselsDark` the occupancy is
/// inverted so the file looks like a subtraction angiogram.
pub fn write_silhouette_png(
    img: &SilhouetteImage,
    polarity: Polarity,
    path: impl AsRef<Path>,
) -> Result<(), IngestError> {
    silhouette_to_gray8(img, polarity).save(path)?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn silhouette_to_gray8(img: &SilhouetteImage, polarity: Polarity) -> Gray8 {
    let data = img
        .values()
        .iter()
        .map(|&v| match polarity {
            Polarity::VesselsBright => to_u8(v),
            Polarity::VesselsDark => to_u8(1.0 - v),
        })
        .collect();
    ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size")
}

/// Writes panels side by side as one 8-bit PNG.
pub fn write_panels_png(panels: &[SilhouetteImage], path: impl AsRef<Path>) -> Result<(), IngestError> {
    let Some(first) = panels.first() else {
        return Err(IngestError::Invalid("no panels to write".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut out = Gray8::new((w * panels.len()) as u32, h as u32);
    for (k, panel) in panels.iter().enumerate() {
        if panel.width() != w || panel.height() != h {
            return Err(IngestError::Invalid("panels differ in size".into()));
        }
        for row in 0..h {
            for col in 0..w {
                out.put_pixel((k * w + col) as u32, row as u32, Luma([to_u8(panel.get(col, row))]));
            }
        }
    }
    out.save(path)?;
    Ok(())
}

/// `|target − rendered|` per pixel.
pub fn residual_image(target: &SilhouetteImage, rendered: &SilhouetteImage) -> SilhouetteImage {
    let values = target
        .values()
        .iter()
        .zip(rendered.values())
        .map(|(a, b)| (a - b).abs())
        .collect();
    SilhouetteImage::new(target.width(), target.height(), values).expect("residuals are in range")
}
