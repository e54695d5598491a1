use super::{LabImage, RgbImage};

// sRGB (D65) linear RGB -> XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// Reference white taken as the image of RGB (1,1,1) so white lands exactly on a=b=0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// Converts a single sRGB triple to CIELAB (D65).
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    linear_to_lab(rgb.map(srgb_to_linear))
}

fn linear_to_lab(lin: [f64; 3]) -> [f64; 3] {
    let mut xyz = [0.0; 3];
    for (out, row) in xyz.iter_mut().zip(RGB_TO_XYZ.iter()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    // 8-bit input has only 256 distinct channel values; linearise once.
    let lut: Vec<f64> = (0..=255u8).map(srgb_to_linear).collect();
    let pixels = img
        .pixels()
        .chunks_exact(3)
        .map(|p| {
            linear_to_lab([lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
                .map(|v| v as f32)
        })
        .collect();
    LabImage::new(img.width(), img.height(), pixels).expect("dimensions taken from a valid image")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn black_is_origin() {
        assert!(close(srgb_to_lab([0, 0, 0]), [0.0, 0.0, 0.0], 1e-9));
    }

    #[test]
    fn white_is_reference() {
        assert!(close(srgb_to_lab([255, 255, 255]), [100.0, 0.0, 0.0], 1e-3));
    }

    #[test]
    fn primaries_match_reference_values() {
        // Reference values from an independent D65 sRGB->Lab implementation.
        assert!(close(srgb_to_lab([255, 0, 0]), [53.24, 80.09, 67.20], 0.05));
        assert!(close(
            srgb_to_lab([51, 128, 204]),
            [52.397, 2.474, -46.055],
            0.01
        ));
    }

    #[test]
    fn l_channel_in_range() {
        for v in (0..=255u16).step_by(5) {
            let v = v as u8;
            let lab = srgb_to_lab([v, 255 - v, v / 2]);
            assert!((0.0..=100.0 + 1e-9).contains(&lab[0]));
        }
    }
}
