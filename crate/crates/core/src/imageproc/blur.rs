use super::LabImage;
use crate::error::{Error, Result};

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / denom).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian smoothing per channel with clamp-to-edge borders.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(img: &LabImage, sigma: f64) -> Result<LabImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as i64;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.pixels();

    let mut horiz = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in taps.iter().enumerate() {
                let sx = (x as i64 + t as i64 - radius).clamp(0, w as i64 - 1) as usize;
                let p = row[sx];
                for c in 0..3 {
                    acc[c] += wt * p[c] as f64;
                }
            }
            horiz[y * w + x] = acc;
        }
    }

    let mut out = vec![[0.0f32; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (t, &wt) in taps.iter().enumerate() {
                let sy = (y as i64 + t as i64 - radius).clamp(0, h as i64 - 1) as usize;
                let p = horiz[sy * w + x];
                for c in 0..3 {
                    acc[c] += wt * p[c];
                }
            }
            out[y * w + x] = acc.map(|v| v as f32);
        }
    }
    LabImage::new(img.width(), img.height(), out)
}
