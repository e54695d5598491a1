//! Evaluation of unsupervised label maps against annotated ground truth.
//!
//! Predicted clusters are aligned to classes through the pixel overlap
//! histogram `O[k][c]`. The default alignment maps each cluster to its
//! majority class (many-to-one); a one-to-one Hungarian alignment is
//! available for comparison. mIoU and mean accuracy are averaged over the
//! classes present in the ground truth of the evaluation unit. The entropies
//! are computed on raw cluster ids, in nats:
//!
//! * OSE = H(pred | gt) = -sum P(k, c) ln P(k | c)
//! * USE = H(gt | pred) = -sum P(k, c) ln P(c | k)

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageproc::RgbImage;
use crate::labelmap::LabelMap;

/// Class id of pixels excluded from every count.
pub const IGNORE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteEntry {
    pub rgb: [u8; 3],
    /// `None` marks void/unlabelled colours.
    pub class_id: Option<u32>,
    pub name: String,
}

/// Colour to class table, read from `r,g,b,class_id,class_name` CSV rows.
/// A negative `class_id` marks an ignored colour.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn lookup(&self, rgb: [u8; 3]) -> Option<&PaletteEntry> {
        self.entries.iter().find(|e| e.rgb == rgb)
    }

    pub fn class_name(&self, class: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.class_id == Some(class))
            .map(|e| e.name.as_str())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let mut entries = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            if row.len() < 4 {
                return Err(Error::format(path, format!("short palette row {row:?}")));
            }
            let num = |i: usize| -> Result<i64> {
                row[i]
                    .parse::<i64>()
                    .map_err(|_| Error::format(path, format!("bad number {:?}", &row[i])))
            };
            let channel = |i: usize| -> Result<u8> {
                u8::try_from(num(i)?).map_err(|_| Error::format(path, "colour out of range"))
            };
            let id = num(3)?;
            entries.push(PaletteEntry {
                rgb: [channel(0)?, channel(1)?, channel(2)?],
                class_id: (id >= 0).then_some(id as u32),
                name: row.get(4).unwrap_or("").to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let ioerr = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["r", "g", "b", "class_id", "class_name"])
            .map_err(ioerr)?;
        for e in &self.entries {
            let id = e.class_id.map_or("-1".to_string(), |c| c.to_string());
            w.write_record([
                e.rgb[0].to_string(),
                e.rgb[1].to_string(),
                e.rgb[2].to_string(),
                id,
                e.name.clone(),
            ])
            .map_err(ioerr)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-pixel class ids, [`IGNORE`] for excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthMap {
    width: u32,
    height: u32,
    classes: Vec<u32>,
}

impl GroundTruthMap {
    pub fn new(width: u32, height: u32, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "ground truth has {} pixels, expected {width}x{height}",
                classes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            classes,
        })
    }

    pub fn from_color_image(img: &RgbImage, palette: &Palette, source: &Path) -> Result<Self> {
        let mut cache: BTreeMap<[u8; 3], u32> = BTreeMap::new();
        let mut classes = Vec::with_capacity(img.width() as usize * img.height() as usize);
        for px in img.pixels().chunks_exact(3) {
            let rgb = [px[0], px[1], px[2]];
            let class = match cache.get(&rgb) {
                Some(&c) => c,
                None => {
                    let entry = palette.lookup(rgb).ok_or_else(|| {
                        Error::format(source, format!("colour {rgb:?} is not in the palette"))
                    })?;
                    let c = entry.class_id.unwrap_or(IGNORE);
                    cache.insert(rgb, c);
                    c
                }
            };
            classes.push(class);
        }
        Self::new(img.width(), img.height(), classes)
    }

    pub fn open(path: &Path, palette: &Palette) -> Result<Self> {
        Self::from_color_image(&RgbImage::open(path)?, palette, path)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }
}

/// Pixel overlap counts between predicted clusters (rows) and classes (columns).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JointHistogram {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
}

impl JointHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clusters(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.cols
    }

    pub fn get(&self, cluster: usize, class: usize) -> u64 {
        if cluster < self.rows && class < self.cols {
            self.counts[cluster * self.cols + class]
        } else {
            0
        }
    }

    fn grow(&mut self, rows: usize, cols: usize) {
        if rows <= self.rows && cols <= self.cols {
            return;
        }
        let (nr, nc) = (rows.max(self.rows), cols.max(self.cols));
        let mut counts = vec![0u64; nr * nc];
        for r in 0..self.rows {
            counts[r * nc..r * nc + self.cols]
                .copy_from_slice(&self.counts[r * self.cols..(r + 1) * self.cols]);
        }
        *self = Self {
            rows: nr,
            cols: nc,
            counts,
        };
    }

    pub fn increment(&mut self, cluster: usize, class: usize, n: u64) {
        self.grow(cluster + 1, class + 1);
        self.counts[cluster * self.cols + class] += n;
    }

    /// Adds one frame, skipping [`IGNORE`] pixels.
    pub fn add_frame(&mut self, pred: &LabelMap, gt: &GroundTruthMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::DimensionMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let rows = pred.max_label().map_or(0, |m| m as usize + 1);
        let cols = gt
            .classes()
            .iter()
            .filter(|&&c| c != IGNORE)
            .max()
            .map_or(0, |&m| m as usize + 1);
        self.grow(rows, cols);
        for (&k, &c) in pred.labels().iter().zip(gt.classes()) {
            if c != IGNORE {
                self.counts[k as usize * self.cols + c as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &JointHistogram) {
        self.grow(other.rows, other.cols);
        for r in 0..other.rows {
            for c in 0..other.cols {
                self.counts[r * self.cols + c] += other.counts[r * other.cols + c];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn cluster_totals(&self) -> Vec<u64> {
        (0..self.rows)
            .map(|r| self.counts[r * self.cols..(r + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn class_totals(&self) -> Vec<u64> {
        let mut t = vec![0u64; self.cols];
        for r in 0..self.rows {
            for (c, v) in t.iter_mut().enumerate() {
                *v += self.counts[r * self.cols + c];
            }
        }
        t
    }

    fn require_mass(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::EmptyInput("histogram has no annotated pixels".into())),
            n => Ok(n),
        }
    }
}

/// Histogram over a set of aligned frames.
pub fn joint_histogram<'a, I>(pairs: I) -> Result<JointHistogram>
where
    I: IntoIterator<Item = (&'a LabelMap, &'a GroundTruthMap)>,
{
    let mut hist = JointHistogram::new();
    for (pred, gt) in pairs {
        hist.add_frame(pred, gt)?;
    }
    Ok(hist)
}

/// Cluster to class alignment. Clusters without mass (or left unmatched by
/// the one-to-one alignment) have no class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMapping {
    targets: Vec<Option<u32>>,
}

impl ClassMapping {
    pub fn get(&self, cluster: usize) -> Option<u32> {
        self.targets.get(cluster).copied().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(k, t)| t.map(|c| (k, c)))
    }
}

/// `pi(k) = argmax_c O[k][c]`, lowest class on ties.
pub fn majority_mapping(hist: &JointHistogram) -> Result<ClassMapping> {
    hist.require_mass()?;
    let targets = (0..hist.rows)
        .map(|k| {
            let row = &hist.counts[k * hist.cols..(k + 1) * hist.cols];
            let mut best: Option<(usize, u64)> = None;
            for (c, &n) in row.iter().enumerate() {
                if n > 0 && best.is_none_or(|(_, b)| n > b) {
                    best = Some((c, n));
                }
            }
            best.map(|(c, _)| c as u32)
        })
        .collect();
    Ok(ClassMapping { targets })
}

/// One-to-one alignment maximising total overlap.
pub fn hungarian_mapping(hist: &JointHistogram) -> Result<ClassMapping> {
    use pathfinding::prelude::{kuhn_munkres, Matrix};

    hist.require_mass()?;
    let clusters: Vec<usize> = hist
        .cluster_totals()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > 0)
        .map(|(k, _)| k)
        .collect();
    let classes: Vec<usize> = hist
        .class_totals()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > 0)
        .map(|(c, _)| c)
        .collect();
    let mut targets = vec![None; hist.rows];
    let weight = |k: usize, c: usize| hist.get(k, c) as i64;
    if clusters.len() <= classes.len() {
        let values = clusters
            .iter()
            .flat_map(|&k| classes.iter().map(move |&c| weight(k, c)))
            .collect();
        let m = Matrix::from_vec(clusters.len(), classes.len(), values)
            .expect("matrix dimensions match buffer");
        let (_, cols) = kuhn_munkres(&m);
        for (i, &j) in cols.iter().enumerate() {
            targets[clusters[i]] = Some(classes[j] as u32);
        }
    } else {
        let values = classes
            .iter()
            .flat_map(|&c| clusters.iter().map(move |&k| weight(k, c)))
            .collect();
        let m = Matrix::from_vec(classes.len(), clusters.len(), values)
            .expect("matrix dimensions match buffer");
        let (_, cols) = kuhn_munkres(&m);
        for (i, &j) in cols.iter().enumerate() {
            targets[clusters[j]] = Some(classes[i] as u32);
        }
    }
    Ok(ClassMapping { targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u32,
    /// Intersection over union in percent.
    pub iou: f64,
    /// Recall (`TP / (TP + FN)`) in percent.
    pub acc: f64,
}

/// Per-class IoU and accuracy after relabelling clusters through `mapping`,
/// for every class present in the ground truth.
pub fn class_scores(hist: &JointHistogram, mapping: &ClassMapping) -> Result<Vec<ClassScore>> {
    hist.require_mass()?;
    let gt_totals = hist.class_totals();
    let mut tp = vec![0u64; hist.cols];
    let mut predicted = vec![0u64; hist.cols];
    let cluster_totals = hist.cluster_totals();
    for (k, c) in mapping.iter() {
        let c = c as usize;
        if k >= hist.rows || c >= hist.cols {
            continue;
        }
        tp[c] += hist.get(k, c);
        predicted[c] += cluster_totals[k];
    }
    Ok((0..hist.cols)
        .filter(|&c| gt_totals[c] > 0)
        .map(|c| {
            let fp = predicted[c] - tp[c];
            let fn_ = gt_totals[c] - tp[c];
            ClassScore {
                class: c as u32,
                iou: 100.0 * tp[c] as f64 / (tp[c] + fp + fn_) as f64,
                acc: 100.0 * tp[c] as f64 / (tp[c] + fn_) as f64,
            }
        })
        .collect())
}

pub fn miou(hist: &JointHistogram, mapping: &ClassMapping) -> Result<f64> {
    let s = class_scores(hist, mapping)?;
    Ok(s.iter().map(|c| c.iou).sum::<f64>() / s.len() as f64)
}

pub fn macc(hist: &JointHistogram, mapping: &ClassMapping) -> Result<f64> {
    let s = class_scores(hist, mapping)?;
    Ok(s.iter().map(|c| c.acc).sum::<f64>() / s.len() as f64)
}

enum Given {
    Class,
    Cluster,
}

/// `-sum P(k, c) ln(O[k][c] / n_given)`.
fn conditional_entropy(hist: &JointHistogram, given: Given) -> Result<f64> {
    let n = hist.require_mass()? as f64;
    let totals = match given {
        Given::Class => hist.class_totals(),
        Given::Cluster => hist.cluster_totals(),
    };
    let mut h = 0.0;
    for k in 0..hist.rows {
        for c in 0..hist.cols {
            let joint = hist.counts[k * hist.cols + c];
            if joint == 0 {
                continue;
            }
            let t = match given {
                Given::Class => totals[c],
                Given::Cluster => totals[k],
            };
            h -= (joint as f64 / n) * (joint as f64 / t as f64).ln();
        }
    }
    Ok(h.max(0.0))
}

/// Over-segmentation entropy H(pred | gt) in nats.
pub fn over_segmentation_entropy(hist: &JointHistogram) -> Result<f64> {
    conditional_entropy(hist, Given::Class)
}

/// Under-segmentation entropy H(gt | pred) in nats.
pub fn under_segmentation_entropy(hist: &JointHistogram) -> Result<f64> {
    conditional_entropy(hist, Given::Cluster)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One alignment fitted over every annotated frame of the sequence.
    #[default]
    Temporal,
    /// An independent alignment per frame; metrics averaged over frames.
    Zeroshot,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Temporal => "temporal",
            Protocol::Zeroshot => "zeroshot",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(Protocol::Temporal),
            "zeroshot" | "zero-shot" => Ok(Protocol::Zeroshot),
            other => Err(Error::InvalidArgument(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Many-to-one majority vote.
    #[default]
    Majority,
    /// One-to-one maximum-overlap assignment.
    Hungarian,
}

impl std::str::FromStr for Matching {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority" => Ok(Matching::Majority),
            "hungarian" => Ok(Matching::Hungarian),
            other => Err(Error::InvalidArgument(format!("unknown matching {other:?}"))),
        }
    }
}

fn mapping_for(hist: &JointHistogram, matching: Matching) -> Result<ClassMapping> {
    match matching {
        Matching::Majority => majority_mapping(hist),
        Matching::Hungarian => hungarian_mapping(hist),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub frames: usize,
    /// Percent.
    pub miou: f64,
    /// Percent.
    pub macc: f64,
    /// Nats.
    pub ose: f64,
    /// Nats.
    pub use_: f64,
    pub per_class: Vec<ClassScore>,
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 7] = ["protocol", "k", "frames", "mIoU", "Acc", "OSE", "USE"];

    pub fn csv_record(&self, k: Option<usize>) -> Vec<String> {
        vec![
            self.protocol.to_string(),
            k.map_or(String::new(), |k| k.to_string()),
            self.frames.to_string(),
            format!("{:.2}", self.miou),
            format!("{:.2}", self.macc),
            format!("{:.4}", self.ose),
            format!("{:.4}", self.use_),
        ]
    }

    /// Human-readable summary with a per-class breakdown.
    pub fn table(&self, palette: Option<&Palette>) -> String {
        let mut s = format!(
            "protocol {}  frames {}\n  mIoU {:>6.2}  Acc {:>6.2}  OSE {:.4}  USE {:.4}\n",
            self.protocol, self.frames, self.miou, self.macc, self.ose, self.use_
        );
        s.push_str("  class                  IoU     Acc\n");
        for c in &self.per_class {
            let name = palette
                .and_then(|p| p.class_name(c.class))
                .map_or_else(|| c.class.to_string(), str::to_string);
            s.push_str(&format!("  {:<20} {:>6.2}  {:>6.2}\n", name, c.iou, c.acc));
        }
        s
    }
}

/// Writes reports as CSV rows, one per `(k, report)` pair.
pub fn write_reports_csv(path: &Path, rows: &[(Option<usize>, &MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(MetricsReport::CSV_HEADER)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for (k, r) in rows {
        w.write_record(r.csv_record(*k))
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn report_from_hist(
    hist: &JointHistogram,
    matching: Matching,
    protocol: Protocol,
    frames: usize,
) -> Result<MetricsReport> {
    let mapping = mapping_for(hist, matching)?;
    let per_class = class_scores(hist, &mapping)?;
    let n = per_class.len() as f64;
    Ok(MetricsReport {
        protocol,
        frames,
        miou: per_class.iter().map(|c| c.iou).sum::<f64>() / n,
        macc: per_class.iter().map(|c| c.acc).sum::<f64>() / n,
        ose: over_segmentation_entropy(hist)?,
        use_: under_segmentation_entropy(hist)?,
        per_class,
    })
}

/// Scores aligned `(prediction, ground truth)` frames under `protocol`.
/// Frames whose ground truth carries no annotated pixel are skipped in the
/// zero-shot average.
pub fn evaluate(
    frames: &[(&LabelMap, &GroundTruthMap)],
    protocol: Protocol,
    matching: Matching,
) -> Result<MetricsReport> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("no annotated frames to evaluate".into()));
    }
    match protocol {
        Protocol::Temporal => {
            // Per-frame histograms in parallel; integer merges are order independent.
            let parts = frames
                .par_iter()
                .map(|&(pred, gt)| {
                    let mut h = JointHistogram::new();
                    h.add_frame(pred, gt)?;
                    Ok(h)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut hist = JointHistogram::new();
            for h in &parts {
                hist.merge(h);
            }
            report_from_hist(&hist, matching, protocol, frames.len())
        }
        Protocol::Zeroshot => {
            let mut reports = Vec::new();
            for &(pred, gt) in frames {
                let mut hist = JointHistogram::new();
                hist.add_frame(pred, gt)?;
                if hist.total() == 0 {
                    continue;
                }
                reports.push(report_from_hist(&hist, matching, protocol, 1)?);
            }
            if reports.is_empty() {
                return Err(Error::EmptyInput("no annotated pixels in any frame".into()));
            }
            let n = reports.len() as f64;
            let mut per_class: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
            for r in &reports {
                for c in &r.per_class {
                    let e = per_class.entry(c.class).or_default();
                    e.0 += c.iou;
                    e.1 += c.acc;
                    e.2 += 1;
                }
            }
            Ok(MetricsReport {
                protocol,
                frames: reports.len(),
                miou: reports.iter().map(|r| r.miou).sum::<f64>() / n,
                macc: reports.iter().map(|r| r.macc).sum::<f64>() / n,
                ose: reports.iter().map(|r| r.ose).sum::<f64>() / n,
                use_: reports.iter().map(|r| r.use_).sum::<f64>() / n,
                per_class: per_class
                    .into_iter()
                    .map(|(class, (iou, acc, m))| ClassScore {
                        class,
                        iou: iou / m as f64,
                        acc: acc / m as f64,
                    })
                    .collect(),
            })
        }
    }
}
