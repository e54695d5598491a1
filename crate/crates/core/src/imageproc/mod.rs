//! Per-frame low-level image operations: resizing, CIELAB conversion,
//! Gaussian smoothing and SLICO superpixels.

mod blur;
mod color;
mod slic;

use std::path::Path;

use crate::error::{Error, Result};

pub use blur::{gaussian_blur, gaussian_kernel};
pub use color::{rgb_to_lab, srgb_to_lab};
pub use slic::slico_segment;

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "rgb buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.repeat(n))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Loads any PNG or JPEG file, dropping alpha.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
    }
}

/// Row-major CIELAB image, channels `[L, a, b]` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    width: u32,
    height: u32,
    pixels: Vec<[f32; 3]>,
}

impl LabImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "lab buffer has {} pixels, expected {}",
                pixels.len(),
                width as usize * height as usize
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

/// Common read access to per-pixel region maps (superpixels and merged regions).
pub trait RegionLabels {
    fn width(&self) -> u32;
    fn height(&self) -> u32;
    /// Row-major region id per pixel, dense in `[0, region_count)`.
    fn labels(&self) -> &[u32];
    fn region_count(&self) -> usize;
}

/// Superpixel partition of one frame. Ids are dense and every region is
/// 4-connected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMask {
    width: u32,
    height: u32,
    labels: Vec<u32>,
    region_count: usize,
}

impl SuperpixelMask {
    /// Builds a mask from raw labels, checking that ids are dense.
    ///
    /// Connectivity is not checked here; see [`SuperpixelMask::is_four_connected`].
    pub fn from_labels(width: u32, height: u32, labels: Vec<u32>) -> Result<Self> {
        let region_count = check_dense(width, height, &labels)?;
        Ok(Self {
            width,
            height,
            labels,
            region_count,
        })
    }

    pub(crate) fn from_dense_unchecked(
        width: u32,
        height: u32,
        labels: Vec<u32>,
        region_count: usize,
    ) -> Self {
        Self {
            width,
            height,
            labels,
            region_count,
        }
    }

    /// Pixel count of each region.
    pub fn region_sizes(&self) -> Vec<usize> {
        region_sizes(&self.labels, self.region_count)
    }

    /// Flood-fills every region and reports whether each one is a single
    /// 4-connected component.
    pub fn is_four_connected(&self) -> bool {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut seen = vec![false; w * h];
        let mut region_seen = vec![false; self.region_count];
        let mut stack = Vec::new();
        for start in 0..w * h {
            if seen[start] {
                continue;
            }
            let id = self.labels[start];
            if region_seen[id as usize] {
                return false;
            }
            region_seen[id as usize] = true;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if !seen[j] && self.labels[j] == id {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
        }
        true
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_u16_png(path, self.width, self.height, &self.labels)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, labels) = load_u16_png(path)?;
        Self::from_labels(w, h, labels)
    }
}

impl RegionLabels for SuperpixelMask {
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
    fn labels(&self) -> &[u32] {
        &self.labels
    }
    fn region_count(&self) -> usize {
        self.region_count
    }
}

pub(crate) fn check_dense(width: u32, height: u32, labels: &[u32]) -> Result<usize> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("mask dimensions must be positive".into()));
    }
    if labels.len() != width as usize * height as usize {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} labels, expected {}",
            labels.len(),
            width as usize * height as usize
        )));
    }
    let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let sizes = region_sizes(labels, count);
    if let Some(missing) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!(
            "region ids are not dense: id {missing} is unused"
        )));
    }
    Ok(count)
}

pub(crate) fn region_sizes(labels: &[u32], count: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; count];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    sizes
}

pub(crate) fn save_u16_png(path: &Path, width: u32, height: u32, values: &[u32]) -> Result<()> {
    let mut raw = Vec::with_capacity(values.len());
    for &v in values {
        let v = u16::try_from(v)
            .map_err(|_| Error::format(path, format!("value {v} does not fit a 16-bit png")))?;
        raw.push(v);
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(width, height, raw)
        .ok_or_else(|| Error::format(path, "buffer size does not match dimensions"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

pub(crate) fn load_u16_png(path: &Path) -> Result<(u32, u32, Vec<u32>)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    let luma = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        image::DynamicImage::ImageLuma8(b) => image::DynamicImage::ImageLuma8(b).to_luma16(),
        _ => return Err(Error::format(path, "expected a single-channel png")),
    };
    let (w, h) = luma.dimensions();
    Ok((w, h, luma.into_raw().into_iter().map(u32::from).collect()))
}

/// Bilinear resize with pixel-center alignment and clamped borders.
pub fn resize_rgb(img: &RgbImage, out_w: u32, out_h: u32) -> Result<RgbImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let taps = |src: u32, dst: u32| -> Vec<(usize, usize, f32)> {
        let scale = src as f32 / dst as f32;
        (0..dst)
            .map(|d| {
                let s = ((d as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src as usize - 1);
                (lo, hi, s - lo as f32)
            })
            .collect()
    };
    let xs = taps(img.width, out_w);
    let ys = taps(img.height, out_h);
    let mut out = Vec::with_capacity(out_w as usize * out_h as usize * 3);
    let w = img.width as usize;
    let px = |x: usize, y: usize, c: usize| img.pixels[(y * w + x) * 3 + c] as f32;
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(out_w, out_h, out)
}

/// Nearest-neighbour resampling of a label grid (used to bring label maps back
/// to the source frame resolution).
pub fn resize_nearest<T: Copy>(src: &[T], sw: u32, sh: u32, dw: u32, dh: u32) -> Vec<T> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let map = |d: u32, s: u32, dd: u32| -> usize {
        (((d as u64 * 2 + 1) * s as u64) / (dd as u64 * 2)).min(s as u64 - 1) as usize
    };
    let cols: Vec<usize> = (0..dw).map(|x| map(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw as usize * dh as usize);
    for y in 0..dh {
        let row = map(y, sh, dh) * sw as usize;
        out.extend(cols.iter().map(|&c| src[row + c]));
    }
    out
}
