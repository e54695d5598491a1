//! Sequence orchestration: preprocessing, superpixels and descriptors per
//! frame, local k-means per temporal window, merging and descriptor
//! recomputation, one global k-means over the whole sequence, and per-pixel
//! propagation of the global labels. Also the run directory format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{
    global_cluster, local_cluster_window, merge_superpixels, recompute_descriptors, KMeansFit,
    KMeansParams, MergedMask, TemporalWindow,
};
use crate::error::{Error, Result};
use crate::eval::{GroundTruthMap, Palette};
use crate::features::{
    descriptors_for_frame, read_feature_file, read_feature_header, DescriptorMode, FeatureFileHeader,
    FeatureMap, RegionDescriptor,
};
use crate::imageproc::{
    gaussian_blur, resize_nearest, resize_rgb, rgb_to_lab, slico_segment, RegionLabels, RgbImage,
    SuperpixelMask,
};
use crate::labelmap::LabelMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    #[default]
    PooledOnly,
    RegisterCls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Processing resolution `[width, height]`; `None` keeps frames as they are.
    pub resize: Option<[u32; 2]>,
    pub blur_sigma: f64,
    pub region_size: u32,
    pub slic_iters: u32,
    pub window_len: usize,
    pub k_local: usize,
    pub k_global: usize,
    pub descriptor: DescriptorKind,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resize: Some([512, 512]),
            blur_sigma: 0.7,
            region_size: 30,
            slic_iters: 10,
            window_len: 100,
            k_local: 100,
            k_global: 50,
            descriptor: DescriptorKind::PooledOnly,
            alpha: DescriptorMode::DEFAULT_ALPHA,
            beta: DescriptorMode::DEFAULT_BETA,
            seed: 0,
            kmeans_max_iters: KMeansParams::DEFAULT_MAX_ITERS,
            kmeans_tol: KMeansParams::DEFAULT_TOL,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value {value:?} for {key}")))
}

impl PipelineConfig {
    pub fn descriptor_mode(&self) -> DescriptorMode {
        match self.descriptor {
            DescriptorKind::PooledOnly => DescriptorMode::PooledOnly,
            DescriptorKind::RegisterCls => DescriptorMode::RegisterCls {
                alpha: self.alpha,
                beta: self.beta,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.window_len < 1 {
            return bad("window_len must be >= 1".into());
        }
        if self.k_local < 1 || self.k_global < 1 {
            return bad("k_local and k_global must be >= 1".into());
        }
        if self.k_global > u16::MAX as usize + 1 {
            return bad(format!("k_global {} exceeds the 16-bit label range", self.k_global));
        }
        if self.region_size < 2 {
            return bad("region_size must be >= 2".into());
        }
        if !(self.blur_sigma >= 0.0) || !self.blur_sigma.is_finite() {
            return bad(format!("blur_sigma must be finite and >= 0, got {}", self.blur_sigma));
        }
        if let Some([w, h]) = self.resize {
            if w == 0 || h == 0 {
                return bad("resize dimensions must be nonzero".into());
            }
        }
        if !(self.kmeans_tol >= 0.0) {
            return bad("kmeans_tol must be >= 0".into());
        }
        self.descriptor_mode().validate()?;
        // alpha/beta are recorded even in pooled-only mode, so check them regardless
        DescriptorMode::RegisterCls { alpha: self.alpha, beta: self.beta }.validate()
    }

    /// Sets one option by name; dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "resize" => {
                self.resize = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    let (w, h) = value
                        .split_once(['x', 'X'])
                        .ok_or_else(|| Error::InvalidArgument(format!("resize wants WxH, got {value:?}")))?;
                    Some([parse(&key, w)?, parse(&key, h)?])
                }
            }
            "blur_sigma" => self.blur_sigma = parse(&key, value)?,
            "region_size" => self.region_size = parse(&key, value)?,
            "slic_iters" => self.slic_iters = parse(&key, value)?,
            "window_len" => self.window_len = parse(&key, value)?,
            "k_local" => self.k_local = parse(&key, value)?,
            "k_global" => self.k_global = parse(&key, value)?,
            "descriptor_mode" => {
                self.descriptor = match value {
                    "pooled_only" | "pooled-only" => DescriptorKind::PooledOnly,
                    "register_cls" | "register-cls" => DescriptorKind::RegisterCls,
                    other => {
                        return Err(Error::InvalidArgument(format!("unknown descriptor mode {other:?}")))
                    }
                }
            }
            "alpha" => self.alpha = parse(&key, value)?,
            "beta" => self.beta = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "kmeans_max_iters" => self.kmeans_max_iters = parse(&key, value)?,
            "kmeans_tol" => self.kmeans_tol = parse(&key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text file (blank lines and `#` comments allowed).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("{}:{}: expected key = value", path.display(), n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    fn kmeans_params(&self, k: usize, seed: u64) -> KMeansParams {
        KMeansParams {
            k,
            seed,
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Local = 1,
    Global = 2,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-stage seed derived from the run seed.
pub fn stage_seed(seed: u64, stage: Stage, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stage as u64)) ^ index)
}

/// Contiguous non-overlapping windows covering `[0, frame_count)`; only the
/// last one may be shorter than `window_len`.
pub fn partition_windows(frame_count: usize, window_len: usize) -> Result<Vec<TemporalWindow>> {
    if window_len < 1 {
        return Err(Error::InvalidArgument("window_len must be >= 1".into()));
    }
    if frame_count < 1 {
        return Err(Error::EmptyInput("sequence has no frames".into()));
    }
    Ok((0..frame_count)
        .step_by(window_len)
        .map(|start| TemporalWindow {
            start_frame: start,
            end_frame: (start + window_len).min(frame_count) - 1,
        })
        .collect())
}

/// Pixelwise lookup of each region's label.
pub fn propagate_labels<M: RegionLabels + ?Sized>(merged: &M, region_labels: &[u32]) -> Result<LabelMap> {
    if region_labels.len() < merged.region_count() {
        return Err(Error::MissingLabel(region_labels.len() as u32));
    }
    if let Some(&l) = region_labels.iter().find(|&&l| l > u16::MAX as u32) {
        return Err(Error::InvalidArgument(format!("label {l} exceeds 16 bits")));
    }
    let labels = merged
        .labels()
        .iter()
        .map(|&m| {
            region_labels
                .get(m as usize)
                .map(|&l| l as u16)
                .ok_or(Error::MissingLabel(m))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(merged.width(), merged.height(), labels)
}

/// Paired frames and feature maps, indexed in sequence order.
pub trait FrameSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stem(&self, index: usize) -> &str;

    fn load_frame(&self, index: usize) -> Result<RgbImage>;

    fn load_features(&self, index: usize) -> Result<FeatureMap>;

    fn feature_header(&self, index: usize) -> Result<FeatureFileHeader> {
        Ok(self.load_features(index)?.header())
    }
}

const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Frame images in one directory, `<stem>.fsf` feature files in another,
/// paired by stem in lexicographic order.
#[derive(Clone, Debug)]
pub struct DirectorySource {
    stems: Vec<String>,
    frames: Vec<PathBuf>,
    features: Vec<PathBuf>,
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    Ok(out)
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string)
}

fn has_extension(path: &Path, exts: &[&str]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

impl DirectorySource {
    pub fn open(frames_dir: &Path, features_dir: &Path) -> Result<Self> {
        let mut frames: BTreeMap<String, PathBuf> = BTreeMap::new();
        for path in list_dir(frames_dir)? {
            if !has_extension(&path, &FRAME_EXTENSIONS) {
                continue;
            }
            let stem = stem_of(&path).ok_or_else(|| Error::format(&path, "unreadable file name"))?;
            if let Some(prev) = frames.insert(stem.clone(), path.clone()) {
                return Err(Error::format(
                    &path,
                    format!("stem {stem:?} also used by {}", prev.display()),
                ));
            }
        }
        if frames.is_empty() {
            return Err(Error::EmptyInput(format!("no frames in {}", frames_dir.display())));
        }
        if !features_dir.is_dir() {
            return Err(Error::io(
                features_dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "feature directory not found"),
            ));
        }
        let mut source = Self {
            stems: Vec::new(),
            frames: Vec::new(),
            features: Vec::new(),
        };
        for (stem, frame) in frames {
            let feature = features_dir.join(format!("{stem}.fsf"));
            if !feature.is_file() {
                return Err(Error::MissingFeatureFile { stem, path: feature });
            }
            source.stems.push(stem);
            source.frames.push(frame);
            source.features.push(feature);
        }
        Ok(source)
    }

    pub fn frame_path(&self, index: usize) -> &Path {
        &self.frames[index]
    }
}

impl FrameSource for DirectorySource {
    fn len(&self) -> usize {
        self.stems.len()
    }

    fn stem(&self, index: usize) -> &str {
        &self.stems[index]
    }

    fn load_frame(&self, index: usize) -> Result<RgbImage> {
        RgbImage::open(&self.frames[index])
    }

    fn load_features(&self, index: usize) -> Result<FeatureMap> {
        read_feature_file(&self.features[index])
    }

    fn feature_header(&self, index: usize) -> Result<FeatureFileHeader> {
        read_feature_header(&self.features[index])
    }
}

/// Frames and features already in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub stems: Vec<String>,
    pub frames: Vec<RgbImage>,
    pub features: Vec<FeatureMap>,
}

impl MemorySource {
    pub fn new(stems: Vec<String>, frames: Vec<RgbImage>, features: Vec<FeatureMap>) -> Result<Self> {
        if stems.len() != frames.len() || frames.len() != features.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} stems, {} frames, {} feature maps",
                stems.len(),
                frames.len(),
                features.len()
            )));
        }
        Ok(Self { stems, frames, features })
    }
}

impl FrameSource for MemorySource {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn stem(&self, index: usize) -> &str {
        &self.stems[index]
    }

    fn load_frame(&self, index: usize) -> Result<RgbImage> {
        Ok(self.frames[index].clone())
    }

    fn load_features(&self, index: usize) -> Result<FeatureMap> {
        Ok(self.features[index].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub stem: String,
    pub index: usize,
    /// Original frame size; label maps are delivered at this size.
    pub width: u32,
    pub height: u32,
}

/// Final per-pixel labels of a sequence plus their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSequence {
    pub config: PipelineConfig,
    pub frames: Vec<FrameRecord>,
    pub label_maps: Vec<LabelMap>,
}

impl SegmentationSequence {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn max_label(&self) -> Option<u16> {
        self.label_maps.iter().filter_map(LabelMap::max_label).max()
    }

    pub fn label_map(&self, stem: &str) -> Option<&LabelMap> {
        self.frames
            .iter()
            .position(|f| f.stem == stem)
            .map(|i| &self.label_maps[i])
    }
}

/// Everything computed on the way to the final labels.
#[derive(Clone, Debug)]
pub struct Intermediates {
    pub superpixels: Vec<SuperpixelMask>,
    pub merged: Vec<MergedMask>,
    pub merged_descriptors: Vec<Vec<RegionDescriptor>>,
    pub local_fits: Vec<(TemporalWindow, KMeansFit)>,
    pub global_fit: KMeansFit,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub sequence: SegmentationSequence,
    pub intermediates: Intermediates,
}

struct PreparedFrame {
    width: u32,
    height: u32,
    mask: SuperpixelMask,
    features: FeatureMap,
    descriptors: Vec<RegionDescriptor>,
}

fn prepare_frame(
    config: &PipelineConfig,
    source: &dyn FrameSource,
    reference: &FeatureFileHeader,
    t: usize,
) -> Result<PreparedFrame> {
    let stem = source.stem(t);
    let img = source.load_frame(t)?;
    let (width, height) = (img.width(), img.height());
    let img = match config.resize {
        Some([w, h]) if (w, h) != (width, height) => resize_rgb(&img, w, h)?,
        _ => img,
    };
    let lab = gaussian_blur(&rgb_to_lab(&img), config.blur_sigma)?;
    let mask = slico_segment(&lab, config.region_size, config.slic_iters)?;

    let features = source.load_features(t)?;
    let header = features.header();
    if header != *reference {
        return Err(Error::DimensionMismatch(format!(
            "frame {stem}: feature grid {}x{}x{} (registers {}, cls {}) differs from the sequence's {}x{}x{} (registers {}, cls {})",
            header.grid_h, header.grid_w, header.dim, header.register_count, header.has_cls,
            reference.grid_h, reference.grid_w, reference.dim, reference.register_count, reference.has_cls,
        )));
    }
    if header.grid_h > mask.height() || header.grid_w > mask.width() {
        return Err(Error::DimensionMismatch(format!(
            "frame {stem}: feature grid {}x{} is finer than the {}x{} processing resolution",
            header.grid_h,
            header.grid_w,
            mask.width(),
            mask.height()
        )));
    }
    let descriptors = descriptors_for_frame(&features, &mask, config.descriptor_mode(), t)?;
    Ok(PreparedFrame {
        width,
        height,
        mask,
        features,
        descriptors,
    })
}

/// Runs the full two-phase pipeline over `source`.
///
/// Windows are processed one after another so only one window's feature maps
/// are resident at a time; frames inside a window are processed in parallel.
pub fn run_sequence(config: &PipelineConfig, source: &dyn FrameSource) -> Result<RunOutput> {
    config.validate()?;
    let windows = partition_windows(source.len(), config.window_len)?;
    let reference = source.feature_header(0)?;
    let mode = config.descriptor_mode();

    let mut records = Vec::with_capacity(source.len());
    let mut superpixels = Vec::with_capacity(source.len());
    let mut merged = Vec::with_capacity(source.len());
    let mut merged_descriptors = Vec::with_capacity(source.len());
    let mut local_fits = Vec::with_capacity(windows.len());

    for (wi, window) in windows.iter().enumerate() {
        let prepared = window
            .frames()
            .into_par_iter()
            .map(|t| prepare_frame(config, source, &reference, t))
            .collect::<Result<Vec<_>>>()?;
        let pooled: Vec<&[f64]> = prepared
            .iter()
            .flat_map(|f| f.descriptors.iter().map(|d| d.vector.as_slice()))
            .collect();
        log::info!(
            "window {}/{} (frames {}..={}): {} superpixel descriptors",
            wi + 1,
            windows.len(),
            window.start_frame,
            window.end_frame,
            pooled.len()
        );
        let params = config.kmeans_params(config.k_local, stage_seed(config.seed, Stage::Local, wi as u64));
        let fit = local_cluster_window(&pooled, &params)?;
        drop(pooled);

        let mut offsets = Vec::with_capacity(prepared.len());
        let mut offset = 0;
        for f in &prepared {
            offsets.push(offset);
            offset += f.descriptors.len();
        }
        let labels = &fit.assignment.labels;
        let merged_frames = prepared
            .par_iter()
            .zip(offsets.par_iter())
            .enumerate()
            .map(|(i, (f, &off))| {
                let m = merge_superpixels(&f.mask, &labels[off..off + f.descriptors.len()])?;
                let d = recompute_descriptors(&f.features, &m, mode, window.start_frame + i)?;
                Ok((m, d))
            })
            .collect::<Result<Vec<_>>>()?;

        for (i, (f, (m, d))) in prepared.into_iter().zip(merged_frames).enumerate() {
            let t = window.start_frame + i;
            records.push(FrameRecord {
                stem: source.stem(t).to_string(),
                index: t,
                width: f.width,
                height: f.height,
            });
            superpixels.push(f.mask);
            merged.push(m);
            merged_descriptors.push(d);
        }
        local_fits.push((*window, fit));
    }

    let (label_maps, global_fit) = global_stage(config, &records, &merged, &merged_descriptors)?;
    Ok(RunOutput {
        sequence: SegmentationSequence {
            config: config.clone(),
            frames: records,
            label_maps,
        },
        intermediates: Intermediates {
            superpixels,
            merged,
            merged_descriptors,
            local_fits,
            global_fit,
        },
    })
}

/// Global k-means over the merged descriptors and propagation to pixels at
/// each frame's original size.
fn global_stage(
    config: &PipelineConfig,
    records: &[FrameRecord],
    merged: &[MergedMask],
    merged_descriptors: &[Vec<RegionDescriptor>],
) -> Result<(Vec<LabelMap>, KMeansFit)> {
    let all: Vec<&[f64]> = merged_descriptors
        .iter()
        .flat_map(|d| d.iter().map(|r| r.vector.as_slice()))
        .collect();
    log::info!("global clustering: {} merged descriptors, k = {}", all.len(), config.k_global);
    let params = config.kmeans_params(config.k_global, stage_seed(config.seed, Stage::Global, 0));
    let fit = global_cluster(&all, &params)?;
    drop(all);

    let mut offsets = Vec::with_capacity(merged.len());
    let mut offset = 0;
    for d in merged_descriptors {
        offsets.push(offset);
        offset += d.len();
    }
    let labels = &fit.assignment.labels;
    let maps = (0..merged.len())
        .into_par_iter()
        .map(|i| {
            let m = &merged[i];
            if merged_descriptors[i].len() != m.region_count() {
                return Err(Error::Integrity(format!(
                    "frame {}: {} descriptors for {} merged regions",
                    records[i].stem,
                    merged_descriptors[i].len(),
                    m.region_count()
                )));
            }
            let map = propagate_labels(m, &labels[offsets[i]..offsets[i] + m.region_count()])?;
            let (w, h) = (records[i].width, records[i].height);
            if (w, h) == (map.width(), map.height()) {
                Ok(map)
            } else {
                LabelMap::new(w, h, resize_nearest(map.labels(), map.width(), map.height(), w, h))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, fit))
}

/// `run_sequence` over a frames directory and a features directory.
pub fn run_directories(config: &PipelineConfig, frames_dir: &Path, features_dir: &Path) -> Result<RunOutput> {
    run_sequence(config, &DirectorySource::open(frames_dir, features_dir)?)
}

// ---------------------------------------------------------------------------
// Run directory

const MANIFEST: &str = "manifest.json";
const RUN_FORMAT: &str = "terraseg-run";
const RUN_VERSION: u32 = 1;
const DESC_MAGIC: &[u8; 8] = b"FSEGDESC";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestFrame {
    #[serde(flatten)]
    record: FrameRecord,
    labels_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: PipelineConfig,
    config_hash: String,
    seed: u64,
    intermediates: bool,
    frames: Vec<ManifestFrame>,
}

fn labels_digest(map: &LabelMap) -> String {
    let mut h = Sha256::new();
    h.update(map.width().to_le_bytes());
    h.update(map.height().to_le_bytes());
    for &l in map.labels() {
        h.update(l.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, seq: &SegmentationSequence, intermediates: bool) -> Result<()> {
    let manifest = Manifest {
        format: RUN_FORMAT.into(),
        version: RUN_VERSION,
        config: seq.config.clone(),
        config_hash: seq.config_hash(),
        seed: seq.config.seed,
        intermediates,
        frames: seq
            .frames
            .iter()
            .zip(&seq.label_maps)
            .map(|(r, m)| ManifestFrame {
                record: r.clone(),
                labels_sha256: labels_digest(m),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes `labels/<stem>.png` and `manifest.json`.
pub fn save_sequence(seq: &SegmentationSequence, dir: &Path) -> Result<()> {
    save_labels(seq, dir)?;
    write_manifest(dir, seq, false)
}

fn save_labels(seq: &SegmentationSequence, dir: &Path) -> Result<()> {
    let labels_dir = dir.join("labels");
    create_dir(&labels_dir)?;
    seq.frames
        .par_iter()
        .zip(&seq.label_maps)
        .try_for_each(|(r, m)| m.save_png(&labels_dir.join(format!("{}.png", r.stem))))
}

/// Writes the final labels and, if `intermediates` is set, superpixel and
/// merged masks, the merged-descriptor cache, and all centroids and
/// assignments.
pub fn save_run(run: &RunOutput, dir: &Path, intermediates: bool) -> Result<()> {
    let seq = &run.sequence;
    save_labels(seq, dir)?;
    if intermediates {
        let inter = &run.intermediates;
        let masks = dir.join("masks");
        let merged = dir.join("merged");
        let clustering = dir.join("clustering");
        let descriptors = dir.join("descriptors");
        for d in [&masks, &merged, &clustering, &descriptors] {
            create_dir(d)?;
        }
        seq.frames.par_iter().enumerate().try_for_each(|(i, r)| {
            inter.superpixels[i].save_png(&masks.join(format!("{}.png", r.stem)))?;
            inter.merged[i].save_png(&merged.join(format!("{}.png", r.stem)))
        })?;
        write_descriptor_cache(&descriptors.join("merged.bin"), &inter.merged_descriptors)?;
        for (wi, (_, fit)) in inter.local_fits.iter().enumerate() {
            fit.centroids.write(&clustering.join(format!("window_{wi:04}_centroids.bin")))?;
            fit.assignment.write(&clustering.join(format!("window_{wi:04}_assignment.bin")))?;
        }
        inter.global_fit.centroids.write(&clustering.join("global_centroids.bin"))?;
        inter.global_fit.assignment.write(&clustering.join("global_assignment.bin"))?;
    }
    write_manifest(dir, seq, intermediates)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != RUN_FORMAT {
        return Err(Error::format(&path, format!("not a run manifest ({:?})", manifest.format)));
    }
    if manifest.version != RUN_VERSION {
        return Err(Error::UnsupportedVersion {
            path,
            version: manifest.version,
        });
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Integrity(format!(
            "{}: config hash mismatch (recorded {}, computed {})",
            path.display(),
            manifest.config_hash,
            manifest.config.hash()
        )));
    }
    if manifest.seed != manifest.config.seed {
        return Err(Error::Integrity(format!("{}: seed disagrees with config", path.display())));
    }
    Ok(manifest)
}

/// Loads a run directory, verifying the config hash and every label map.
pub fn load_run(dir: &Path) -> Result<SegmentationSequence> {
    let manifest = read_manifest(dir)?;
    let k = manifest.config.k_global;
    let label_maps = manifest
        .frames
        .par_iter()
        .map(|f| {
            let path = dir.join("labels").join(format!("{}.png", f.record.stem));
            let map = LabelMap::load_png(&path)?;
            if (map.width(), map.height()) != (f.record.width, f.record.height) {
                return Err(Error::Integrity(format!(
                    "{}: {}x{} label map, manifest says {}x{}",
                    path.display(),
                    map.width(),
                    map.height(),
                    f.record.width,
                    f.record.height
                )));
            }
            if labels_digest(&map) != f.labels_sha256 {
                return Err(Error::Integrity(format!("{}: digest does not match manifest", path.display())));
            }
            if map.max_label().is_some_and(|m| m as usize >= k) {
                return Err(Error::Integrity(format!("{}: label outside [0, {k})", path.display())));
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationSequence {
        config: manifest.config,
        frames: manifest.frames.into_iter().map(|f| f.record).collect(),
        label_maps,
    })
}

/// Binary cache of descriptors: magic, version, count (u64), dim (u32), then
/// per descriptor frame index (u64), region id (u32), pixel count (u64) and
/// `dim` f64 values, all little-endian.
pub fn write_descriptor_cache(path: &Path, frames: &[Vec<RegionDescriptor>]) -> Result<()> {
    let count: usize = frames.iter().map(Vec::len).sum();
    let dim = frames.iter().flatten().next().map_or(0, |d| d.vector.len());
    let mut buf = Vec::with_capacity(32 + count * (20 + dim * 8));
    buf.extend_from_slice(DESC_MAGIC);
    buf.extend_from_slice(&RUN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for d in frames.iter().flatten() {
        if d.vector.len() != dim {
            return Err(Error::DimensionMismatch("descriptors of mixed dimension".into()));
        }
        buf.extend_from_slice(&(d.frame_index as u64).to_le_bytes());
        buf.extend_from_slice(&d.region_id.to_le_bytes());
        buf.extend_from_slice(&(d.pixel_count as u64).to_le_bytes());
        for v in &d.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_descriptor_cache(path: &Path) -> Result<Vec<RegionDescriptor>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 24,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != DESC_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "FSEGDESC",
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != RUN_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let count = u64_at(12) as usize;
    let dim = u32_at(20) as usize;
    let record = 20 + dim * 8;
    let expected = 24 + count * record;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((0..count)
        .map(|i| {
            let o = 24 + i * record;
            RegionDescriptor {
                frame_index: u64_at(o) as usize,
                region_id: u32_at(o + 8),
                pixel_count: u64_at(o + 12) as usize,
                vector: (0..dim)
                    .map(|j| f64::from_le_bytes(bytes[o + 20 + j * 8..o + 28 + j * 8].try_into().unwrap()))
                    .collect(),
            }
        })
        .collect())
}

/// The parts of a saved run needed to redo the global stage.
#[derive(Clone, Debug)]
pub struct CachedRun {
    pub config: PipelineConfig,
    pub frames: Vec<FrameRecord>,
    pub merged: Vec<MergedMask>,
    pub merged_descriptors: Vec<Vec<RegionDescriptor>>,
}

impl CachedRun {
    /// Loads a run directory saved with intermediates.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if !manifest.intermediates {
            return Err(Error::InvalidArgument(format!(
                "{} was saved without intermediates; rerun segment with them enabled",
                dir.display()
            )));
        }
        let frames: Vec<FrameRecord> = manifest.frames.into_iter().map(|f| f.record).collect();
        let merged = frames
            .par_iter()
            .map(|r| {
                let sp = SuperpixelMask::load_png(&dir.join("masks").join(format!("{}.png", r.stem)))?;
                MergedMask::load_png(&dir.join("merged").join(format!("{}.png", r.stem)), &sp)
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = dir.join("descriptors").join("merged.bin");
        let mut merged_descriptors: Vec<Vec<RegionDescriptor>> = vec![Vec::new(); frames.len()];
        let position: BTreeMap<usize, usize> = frames.iter().enumerate().map(|(i, r)| (r.index, i)).collect();
        for d in read_descriptor_cache(&cache)? {
            let i = *position.get(&d.frame_index).ok_or_else(|| {
                Error::Integrity(format!("{}: descriptor for unknown frame {}", cache.display(), d.frame_index))
            })?;
            merged_descriptors[i].push(d);
        }
        for (i, m) in merged.iter().enumerate() {
            if merged_descriptors[i].len() != m.region_count() {
                return Err(Error::Integrity(format!(
                    "frame {}: {} cached descriptors for {} merged regions",
                    frames[i].stem,
                    merged_descriptors[i].len(),
                    m.region_count()
                )));
            }
        }
        Ok(Self {
            config: manifest.config,
            frames,
            merged,
            merged_descriptors,
        })
    }

    pub fn from_output(run: &RunOutput) -> Self {
        Self {
            config: run.sequence.config.clone(),
            frames: run.sequence.frames.clone(),
            merged: run.intermediates.merged.clone(),
            merged_descriptors: run.intermediates.merged_descriptors.clone(),
        }
    }

    /// Redoes only the global stage with `k_global = k`.
    pub fn relabel(&self, k: usize) -> Result<SegmentationSequence> {
        let config = PipelineConfig {
            k_global: k,
            ..self.config.clone()
        };
        config.validate()?;
        let (label_maps, _) = global_stage(&config, &self.frames, &self.merged, &self.merged_descriptors)?;
        Ok(SegmentationSequence {
            config,
            frames: self.frames.clone(),
            label_maps,
        })
    }
}

/// Ground-truth maps from `<stem>.png` files in `gt_dir`, for the run frames
/// that have one. Unannotated frames are skipped.
pub fn load_ground_truth(
    gt_dir: &Path,
    palette: &Palette,
    frames: &[FrameRecord],
) -> Result<Vec<(usize, GroundTruthMap)>> {
    if !gt_dir.is_dir() {
        return Err(Error::io(
            gt_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "ground-truth directory not found"),
        ));
    }
    let mut available: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in list_dir(gt_dir)? {
        if has_extension(&path, &["png"]) {
            if let Some(stem) = stem_of(&path) {
                available.insert(stem, path);
            }
        }
    }
    frames
        .par_iter()
        .enumerate()
        .filter_map(|(i, r)| available.get(&r.stem).map(|p| (i, p)))
        .map(|(i, p)| Ok((i, GroundTruthMap::open(p, palette)?)))
        .collect()
}
