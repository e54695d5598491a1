//! Synthetic sequences and brute-force reference implementations.
//!
//! The generator draws `C` latent classes as bands that drift across the
//! frame, renders each class in a flat colour, and emits patch-token feature
//! maps whose cells carry the prototype of their majority class plus Gaussian
//! noise. The oracles are deliberately naive and share no code with the
//! modules they check.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::{GroundTruthMap, Palette, PaletteEntry, IGNORE};
use crate::features::{write_feature_file, FeatureMap};
use crate::imageproc::RgbImage;
use crate::labelmap::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandLayout {
    /// Bands separated by vertical lines, drifting along x.
    Vertical,
    /// Bands separated by anti-diagonal lines, drifting along x + y.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    /// Feature dimension; must be at least `classes`.
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub layout: BandLayout,
    /// Band displacement per frame, in pixels (|drift| <= 2).
    pub drift: f64,
    /// Euclidean distance between any two class prototypes.
    pub separation: f64,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise_sigma: f64,
    pub registers: usize,
    pub cls: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            frame_count: 20,
            width: 128,
            height: 128,
            classes: 3,
            dim: 16,
            grid_h: 32,
            grid_w: 32,
            layout: BandLayout::Vertical,
            drift: 2.0,
            separation: 1.0,
            noise_sigma: 0.0,
            registers: 4,
            cls: true,
            seed: 0,
        }
    }
}

const CLASS_COLOURS: [[u8; 3]; 12] = [
    [200, 60, 40],
    [60, 170, 70],
    [50, 90, 210],
    [230, 200, 50],
    [160, 70, 180],
    [60, 190, 200],
    [240, 140, 40],
    [120, 120, 120],
    [250, 250, 250],
    [110, 60, 30],
    [240, 150, 190],
    [20, 60, 40],
];

/// Flat render colour of a latent class.
pub fn class_colour(class: usize) -> [u8; 3] {
    if class < CLASS_COLOURS.len() {
        return CLASS_COLOURS[class];
    }
    let h = (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(h >> 16) as u8 | 0x20, (h >> 32) as u8 | 0x20, (h >> 48) as u8 | 0x20]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frame_count == 0 || self.width == 0 || self.height == 0 {
            return bad("synthetic sequence needs frames and a nonzero size".into());
        }
        if self.classes == 0 || self.classes > self.dim {
            return bad(format!(
                "need 1 <= classes <= dim, got {} classes, dim {}",
                self.classes, self.dim
            ));
        }
        if self.classes > CLASS_COLOURS.len() {
            return bad(format!("at most {} classes supported", CLASS_COLOURS.len()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("feature grid must be nonempty".into());
        }
        if !(self.drift.abs() <= 2.0) {
            return bad(format!("drift {} exceeds 2 px per frame", self.drift));
        }
        if !(self.noise_sigma >= 0.0) || !(self.separation > 0.0) {
            return bad("noise must be >= 0 and separation > 0".into());
        }
        Ok(())
    }

    /// Latent class of pixel `(x, y)` in frame `t`.
    pub fn class_at(&self, x: u32, y: u32, t: usize) -> usize {
        let (coord, period) = match self.layout {
            BandLayout::Vertical => (x as f64, self.width as f64),
            BandLayout::Diagonal => ((x + y) as f64, self.width as f64),
        };
        let u = (coord + self.drift * t as f64).rem_euclid(period);
        ((u * self.classes as f64 / period) as usize).min(self.classes - 1)
    }

    /// Prototype of `class`: a scaled one-hot vector.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[class] = self.separation / std::f64::consts::SQRT_2;
        v
    }

    pub fn palette(&self) -> Palette {
        Palette::new(
            (0..self.classes)
                .map(|c| PaletteEntry {
                    rgb: class_colour(c),
                    class_id: Some(c as u32),
                    name: format!("class{c}"),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub stems: Vec<String>,
    pub frames: Vec<RgbImage>,
    pub features: Vec<FeatureMap>,
    pub ground_truth: Vec<GroundTruthMap>,
    pub palette: Palette,
}

pub fn gen_synthetic_sequence(spec: &SyntheticSpec) -> Result<SyntheticSequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let registers: Vec<f32> = (0..spec.registers * spec.dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();

    let mut seq = SyntheticSequence {
        stems: Vec::new(),
        frames: Vec::new(),
        features: Vec::new(),
        ground_truth: Vec::new(),
        palette: spec.palette(),
    };
    for t in 0..spec.frame_count {
        let mut classes = Vec::with_capacity(w as usize * h as usize);
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
        let mut votes = vec![vec![0usize; spec.classes]; spec.grid_h * spec.grid_w];
        for y in 0..h {
            for x in 0..w {
                let c = spec.class_at(x, y, t);
                classes.push(c as u32);
                pixels.extend_from_slice(&class_colour(c));
                let cell_r = (y as usize * spec.grid_h) / h as usize;
                let cell_c = (x as usize * spec.grid_w) / w as usize;
                votes[cell_r * spec.grid_w + cell_c][c] += 1;
            }
        }

        let mut frame_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        frame_rng.set_stream(t as u64 + 1);
        let mut patch = Vec::with_capacity(votes.len() * spec.dim);
        for cell in &votes {
            // Majority class, lowest on ties. Cells with no pixels (grid finer
            // than the image) fall back to class 0.
            let mut best = 0;
            for (c, &n) in cell.iter().enumerate() {
                if n > cell[best] {
                    best = c;
                }
            }
            for v in spec.prototype(best) {
                let e = if spec.noise_sigma > 0.0 { noise.sample(&mut frame_rng) } else { 0.0 };
                patch.push((v + e) as f32);
            }
        }
        let cls = spec.cls.then(|| {
            let cells = votes.len() as f64;
            (0..spec.dim)
                .map(|d| {
                    let s: f64 = patch.iter().skip(d).step_by(spec.dim).map(|&v| v as f64).sum();
                    (s / cells) as f32
                })
                .collect()
        });
        let map = FeatureMap::new(spec.grid_h, spec.grid_w, spec.dim, patch, cls, registers.clone())?;

        seq.stems.push(format!("frame_{t:05}"));
        seq.frames.push(RgbImage::new(w, h, pixels)?);
        seq.features.push(map);
        seq.ground_truth.push(GroundTruthMap::new(w, h, classes)?);
    }
    Ok(seq)
}

impl SyntheticSequence {
    /// Writes `frames/`, `features/`, `gt/` (colour coded) and `palette.csv`.
    pub fn write_dataset(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "features", "gt"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (i, stem) in self.stems.iter().enumerate() {
            self.frames[i].save(&dir.join("frames").join(format!("{stem}.png")))?;
            write_feature_file(&self.features[i], &dir.join("features").join(format!("{stem}.fsf")))?;
            let gt = &self.ground_truth[i];
            let mut px = Vec::with_capacity(gt.classes().len() * 3);
            for &c in gt.classes() {
                px.extend_from_slice(&class_colour(c as usize));
            }
            RgbImage::new(gt.width(), gt.height(), px)?
                .save(&dir.join("gt").join(format!("{stem}.png")))?;
        }
        self.palette.write_csv(&dir.join("palette.csv"))
    }
}

/// Exhaustive k-means: the minimum within-cluster sum of squares over every
/// partition of `points` into at most `k` nonempty parts, with one optimal
/// partition as block indices in first-appearance order.
pub fn kmeans_oracle(points: &[Vec<f64>], k: usize) -> Result<(f64, Vec<usize>)> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument("oracle needs points and k >= 1".into()));
    }
    if n > 10 {
        return Err(Error::InvalidArgument(format!("oracle limited to 10 points, got {n}")));
    }
    let sse = |blocks: &[usize]| -> f64 {
        let parts = blocks.iter().max().map_or(0, |&b| b + 1);
        let mut total = 0.0;
        for b in 0..parts {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| blocks[i] == b).map(|i| &points[i]).collect();
            let d = members[0].len();
            for j in 0..d {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
            }
        }
        total
    };

    // Restricted growth strings: a[0] = 0, a[i] <= max(a[..i]) + 1, < k.
    let mut best = (f64::INFINITY, Vec::new());
    let mut a = vec![0usize; n];
    loop {
        let s = sse(&a);
        if s < best.0 {
            best = (s, a.clone());
        }
        // next string
        let mut i = n;
        loop {
            if i <= 1 {
                return Ok(best);
            }
            i -= 1;
            let prefix_max = a[..i].iter().copied().max().unwrap_or(0);
            if a[i] <= prefix_max && a[i] + 1 < k {
                a[i] += 1;
                for v in a.iter_mut().skip(i + 1) {
                    *v = 0;
                }
                break;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleMetrics {
    pub ose: f64,
    pub use_: f64,
    pub miou: f64,
    pub macc: f64,
}

/// Direct evaluation of the four metrics from the explicit joint distribution
/// of one `(prediction, ground truth)` map pair, majority-vote alignment.
pub fn entropy_oracle(pred: &LabelMap, gt: &GroundTruthMap) -> Result<OracleMetrics> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::DimensionMismatch("oracle maps differ in size".into()));
    }
    if pred.width() > 64 || pred.height() > 64 {
        return Err(Error::InvalidArgument("oracle limited to 64x64 maps".into()));
    }
    let pairs: Vec<(u32, u32)> = pred
        .labels()
        .iter()
        .zip(gt.classes())
        .filter(|(_, &c)| c != IGNORE)
        .map(|(&k, &c)| (k as u32, c))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no annotated pixels".into()));
    }
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut p_pred: BTreeMap<u32, f64> = BTreeMap::new();
    let mut p_gt: BTreeMap<u32, f64> = BTreeMap::new();
    for &(k, c) in &pairs {
        *joint.entry((k, c)).or_default() += 1.0 / n;
        *p_pred.entry(k).or_default() += 1.0 / n;
        *p_gt.entry(c).or_default() += 1.0 / n;
    }
    let mut ose = 0.0;
    let mut use_ = 0.0;
    for (&(k, c), &p) in &joint {
        ose -= p * (p / p_gt[&c]).ln();
        use_ -= p * (p / p_pred[&k]).ln();
    }

    let mut mapping: BTreeMap<u32, u32> = BTreeMap::new();
    for &k in p_pred.keys() {
        let mut best: Option<(u32, usize)> = None;
        for &c in p_gt.keys() {
            let count = pairs.iter().filter(|&&(pk, pc)| pk == k && pc == c).count();
            if count > 0 && best.is_none_or(|(_, bc)| count > bc) {
                best = Some((c, count));
            }
        }
        mapping.insert(k, best.unwrap().0);
    }
    let (mut iou_sum, mut acc_sum) = (0.0, 0.0);
    for &c in p_gt.keys() {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for &(k, truth) in &pairs {
            let hit = mapping[&k] == c;
            match (hit, truth == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        iou_sum += tp as f64 / (tp + fp + fn_) as f64;
        acc_sum += tp as f64 / (tp + fn_) as f64;
    }
    let classes = p_gt.len() as f64;
    Ok(OracleMetrics {
        ose: ose.max(0.0),
        use_: use_.max(0.0),
        miou: 100.0 * iou_sum / classes,
        macc: 100.0 * acc_sum / classes,
    })
}

/// CIELAB (D65) back to 8-bit sRGB, rounded and clamped.
pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let [l, a, b] = lab;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let delta: f64 = 6.0 / 29.0;
    let finv = |t: f64| if t > delta { t.powi(3) } else { 3.0 * delta * delta * (t - 4.0 / 29.0) };
    let (xn, yn, zn) = (0.950_47, 1.0, 1.088_83);
    let (x, y, z) = (xn * finv(fx), yn * finv(fy), zn * finv(fz));
    let lin = [
        3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z,
        -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z,
        0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z,
    ];
    lin.map(|v| {
        let s = if v <= 0.003_130_8 { 12.92 * v } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
        (s * 255.0).round().clamp(0.0, 255.0) as u8
    })
}
