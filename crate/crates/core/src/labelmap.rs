use std::path::Path;

use crate::error::{Error, Result};
use crate::imageproc::{load_u16_png, save_u16_png, RgbImage};

/// Per-pixel cluster labels for one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "label map has {} labels, expected {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn max_label(&self) -> Option<u16> {
        self.labels.iter().copied().max()
    }

    /// 16-bit single-channel PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let wide: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        save_u16_png(path, self.width, self.height, &wide)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, labels) = load_u16_png(path)?;
        Self::new(w, h, labels.into_iter().map(|l| l as u16).collect())
    }
}

/// Fixed pseudo-random colour for a label, identical across frames and runs.
pub fn label_colour(label: u16) -> [u8; 3] {
    let mut z = (label as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    // keep colours away from black so overlays stay readable
    [(z as u8) | 0x30, (z >> 8) as u8 | 0x30, (z >> 16) as u8 | 0x30]
}

/// Blends label colours over `frame`: `(1 - alpha) * frame + alpha * colour`.
pub fn overlay(frame: &RgbImage, labels: &LabelMap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if (frame.width(), frame.height()) != (labels.width, labels.height) {
        return Err(Error::DimensionMismatch(format!(
            "frame {}x{} vs labels {}x{}",
            frame.width(),
            frame.height(),
            labels.width,
            labels.height
        )));
    }
    let mut out = Vec::with_capacity(frame.pixels().len());
    for (px, &l) in frame.pixels().chunks_exact(3).zip(&labels.labels) {
        let c = label_colour(l);
        for ch in 0..3 {
            let v = (1.0 - alpha) * px[ch] as f64 + alpha * c[ch] as f64;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage::new(frame.width(), frame.height(), out)
}
