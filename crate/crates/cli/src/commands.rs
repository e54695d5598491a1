use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use rayon::prelude::*;

use terraseg_core::eval::{evaluate, write_reports_csv, Matching, Palette, Protocol};
use terraseg_core::features::{read_feature_file, FeatureMap};
use terraseg_core::pipeline::{
    load_ground_truth, load_run, run_directories, save_run, save_sequence, CachedRun, DescriptorKind,
    PipelineConfig, SegmentationSequence,
};
use terraseg_core::testkit::{gen_synthetic_sequence, BandLayout, SyntheticSpec};
use terraseg_core::{overlay, Error, MetricsReport, RgbImage};

use crate::args::*;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

pub fn segment(a: &SegmentArgs) -> Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = a.window_len {
        cfg.window_len = v;
    }
    if let Some(v) = a.k_local {
        cfg.k_local = v;
    }
    if let Some(v) = a.k_global {
        cfg.k_global = v;
    }
    if let Some(v) = a.region_size {
        cfg.region_size = v;
    }
    if let Some(v) = a.blur_sigma {
        cfg.blur_sigma = v;
    }
    if let Some(v) = a.slic_iters {
        cfg.slic_iters = v;
    }
    if let Some(v) = &a.resize {
        cfg.set("resize", v)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.descriptor_mode {
        cfg.descriptor = match v {
            DescriptorArg::PooledOnly => DescriptorKind::PooledOnly,
            DescriptorArg::RegisterCls => DescriptorKind::RegisterCls,
        };
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    cfg.validate()?;
    info!("config {}", cfg.hash());

    let out = run_directories(&cfg, &a.frames, &a.features)?;
    save_run(&out, &a.out, !a.no_intermediates)?;
    let seq = &out.sequence;
    println!(
        "segmented {} frames into {} labels -> {}",
        seq.frames.len(),
        seq.max_label().map_or(0, |m| m as usize + 1),
        a.out.display()
    );
    Ok(())
}

fn protocols(p: ProtocolArg) -> Vec<Protocol> {
    match p {
        ProtocolArg::Temporal => vec![Protocol::Temporal],
        ProtocolArg::Zeroshot => vec![Protocol::Zeroshot],
        ProtocolArg::Both => vec![Protocol::Temporal, Protocol::Zeroshot],
    }
}

fn matching(m: MatchingArg) -> Matching {
    match m {
        MatchingArg::Majority => Matching::Majority,
        MatchingArg::Hungarian => Matching::Hungarian,
    }
}

struct Truth {
    palette: Palette,
    gt: PathBuf,
}

impl Truth {
    fn open(a: &GroundTruthArgs) -> Result<Self> {
        Ok(Self {
            palette: Palette::read_csv(&a.palette)?,
            gt: a.gt.clone(),
        })
    }

    fn score(&self, seq: &SegmentationSequence, a: &GroundTruthArgs) -> Result<Vec<MetricsReport>> {
        let gt = load_ground_truth(&self.gt, &self.palette, &seq.frames)?;
        if gt.is_empty() {
            return Err(Error::EmptyInput(format!("no ground truth in {} matches the run frames", self.gt.display())).into());
        }
        info!("{} of {} frames annotated", gt.len(), seq.frames.len());
        let pairs: Vec<_> = gt.iter().map(|(i, g)| (&seq.label_maps[*i], g)).collect();
        protocols(a.protocol)
            .into_iter()
            .map(|p| Ok(evaluate(&pairs, p, matching(a.matching))?))
            .collect()
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let seq = load_run(&a.run)?;
    let truth = Truth::open(&a.truth)?;
    let reports = truth.score(&seq, &a.truth)?;
    let k = Some(seq.config.k_global);
    for r in &reports {
        if a.per_class {
            print!("{}", r.table(Some(&truth.palette)));
        } else {
            println!(
                "{:<9} frames {:>5}  mIoU {:>6.2}  Acc {:>6.2}  OSE {:.4}  USE {:.4}",
                r.protocol, r.frames, r.miou, r.macc, r.ose, r.use_
            );
        }
    }
    let csv = a.truth.csv.clone().unwrap_or_else(|| a.run.join("eval.csv"));
    let rows: Vec<_> = reports.iter().map(|r| (k, r)).collect();
    write_reports_csv(&csv, &rows)?;
    info!("wrote {}", csv.display());
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    if a.k.is_empty() {
        return Err(usage("--k needs at least one value"));
    }
    let cached = CachedRun::load(&a.run)?;
    let truth = Truth::open(&a.truth)?;
    let mut rows = Vec::new();
    println!("{:<9} {:>5} {:>7} {:>7} {:>7} {:>7}", "protocol", "k", "mIoU", "Acc", "OSE", "USE");
    for &k in &a.k {
        let seq = cached.relabel(k)?;
        if let Some(out) = &a.out {
            save_sequence(&seq, &out.join(format!("k_{k}")))?;
        }
        for r in truth.score(&seq, &a.truth)? {
            println!(
                "{:<9} {:>5} {:>7.2} {:>7.2} {:>7.4} {:>7.4}",
                r.protocol, k, r.miou, r.macc, r.ose, r.use_
            );
            rows.push((k, r));
        }
    }
    let csv = a.truth.csv.clone().unwrap_or_else(|| a.run.join("sweep.csv"));
    let refs: Vec<_> = rows.iter().map(|(k, r)| (Some(*k), r)).collect();
    write_reports_csv(&csv, &refs)?;
    info!("wrote {}", csv.display());
    Ok(())
}

fn find_frame(dir: &Path, stem: &str) -> Result<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| anyhow::anyhow!("no frame image for {stem:?} in {}", dir.display()))
}

pub fn overlay_cmd(a: &OverlayArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha must lie in [0, 1], got {}", a.alpha)));
    }
    let seq = load_run(&a.run)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    seq.frames.par_iter().zip(&seq.label_maps).try_for_each(|(r, labels)| -> Result<()> {
        let frame = RgbImage::open(&find_frame(&a.frames, &r.stem)?)?;
        overlay(&frame, labels, a.alpha)?.save(&a.out.join(format!("{}.png", r.stem)))?;
        Ok(())
    })?;
    println!("wrote {} overlays -> {}", seq.frames.len(), a.out.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        frame_count: a.frames,
        width: a.width,
        height: a.height,
        classes: a.classes,
        dim: a.dim,
        grid_h: a.grid_h,
        grid_w: a.grid_w,
        layout: match a.layout {
            LayoutArg::Vertical => BandLayout::Vertical,
            LayoutArg::Diagonal => BandLayout::Diagonal,
        },
        drift: a.drift,
        noise_sigma: a.noise,
        registers: a.registers,
        cls: !a.no_cls,
        seed: a.seed,
        ..Default::default()
    };
    let seq = gen_synthetic_sequence(&spec)?;
    seq.write_dataset(&a.out)?;
    println!("wrote {} synthetic frames -> {}", seq.stems.len(), a.out.display());
    Ok(())
}

struct Stats {
    min: f32,
    max: f32,
    mean: f64,
    std: f64,
}

fn token_stats(map: &FeatureMap) -> Stats {
    let v = map.patch_tokens();
    let n = v.len() as f64;
    let (mut min, mut max, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
    for &x in v {
        min = min.min(x);
        max = max.max(x);
        sum += x as f64;
    }
    let mean = sum / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    Stats {
        min,
        max,
        mean,
        std: var.sqrt(),
    }
}

fn feature_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).with_context(|| path.display().to_string())? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "fsf") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no .fsf files in {}", path.display())).into());
    }
    Ok(files)
}

/// Returns the number of files that failed to parse.
pub fn inspect(a: &InspectArgs) -> Result<usize> {
    let mut files = Vec::new();
    for p in &a.paths {
        files.extend(feature_files(p)?);
    }
    let mut stdout = std::io::stdout().lock();
    let mut bad = 0;
    for path in &files {
        match read_feature_file(path) {
            Ok(map) => {
                let h = map.header();
                let s = token_stats(&map);
                writeln!(
                    stdout,
                    "{}: grid {}x{} dim {} registers {} cls {} payload {} B  min {:.4} max {:.4} mean {:.4} std {:.4}",
                    path.display(),
                    h.grid_h,
                    h.grid_w,
                    h.dim,
                    h.register_count,
                    if h.has_cls { "yes" } else { "no" },
                    h.payload_len(),
                    s.min,
                    s.max,
                    s.mean,
                    s.std
                )?;
            }
            Err(e) => {
                bad += 1;
                eprintln!("error: {e}");
            }
        }
    }
    if let Some(frames) = &a.frames {
        bad += check_pairing(frames, &files)?;
    }
    Ok(bad)
}

fn check_pairing(frames_dir: &Path, features: &[PathBuf]) -> Result<usize> {
    use std::collections::BTreeSet;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut frames = BTreeSet::new();
    for entry in fs::read_dir(frames_dir).with_context(|| frames_dir.display().to_string())? {
        let p = entry?.path();
        let is_image = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            frames.extend(stem(&p));
        }
    }
    let feats: BTreeSet<String> = features.iter().filter_map(|p| stem(p)).collect();
    let mut bad = 0;
    for s in frames.difference(&feats) {
        eprintln!("error: frame {s:?} has no feature file");
        bad += 1;
    }
    for s in feats.difference(&frames) {
        eprintln!("warning: feature file {s:?} has no frame");
    }
    Ok(bad)
}
