//! Acceptance suite. Every test prints one `[PASS]`/`[FAIL]` line (on stderr,
//! bypassing the test harness capture) before asserting.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use terraseg_core::clustering::{kmeans, merge_superpixels, recompute_descriptors, KMeansParams};
use terraseg_core::eval::{evaluate, joint_histogram, majority_mapping, over_segmentation_entropy,
    under_segmentation_entropy, GroundTruthMap, Matching, Protocol, IGNORE};
use terraseg_core::features::{descriptors_for_frame, DescriptorMode, FeatureMap};
use terraseg_core::imageproc::{gaussian_blur, rgb_to_lab, slico_segment, RegionLabels, RgbImage, SuperpixelMask};
use terraseg_core::pipeline::{run_sequence, CachedRun, MemorySource, PipelineConfig};
use terraseg_core::testkit::{entropy_oracle, gen_synthetic_sequence, kmeans_oracle, SyntheticSpec};
use terraseg_core::LabelMap;

fn report(name: &str, pass: bool, detail: &str) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7A1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..500 {
        let (w, h) = (rng.random_range(1..=16u32), rng.random_range(1..=16u32));
        let k = rng.random_range(1..=6u16);
        let c = rng.random_range(1..=6u32);
        let n = (w * h) as usize;
        let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut gt: Vec<u32> = (0..n)
            .map(|_| if rng.random_bool(0.05) { IGNORE } else { rng.random_range(0..c) })
            .collect();
        if gt.iter().all(|&g| g == IGNORE) {
            gt[0] = 0;
        }
        let pred = LabelMap::new(w, h, pred).unwrap();
        let gt = GroundTruthMap::new(w, h, gt).unwrap();
        let r = evaluate(&[(&pred, &gt)], Protocol::Temporal, Matching::Majority).unwrap();
        let o = entropy_oracle(&pred, &gt).unwrap();
        let diffs = [
            (r.miou - o.miou).abs(),
            (r.macc - o.macc).abs(),
            (r.ose - o.ose).abs(),
            (r.use_ - o.use_).abs(),
        ];
        let d = diffs.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(d);
        if d > 1e-9 {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures == 0 && secs < 10.0;
    report(
        "metric oracle equivalence (500 pairs, tol 1e-9, < 10 s)",
        pass,
        &format!("max |diff| {worst:.3e}, {failures} mismatches, {secs:.2} s"),
    );
    assert!(pass);
}

#[test]
fn worked_example_exactness() {
    let pred = LabelMap::new(2, 2, vec![5, 5, 5, 7]).unwrap();
    let gt = GroundTruthMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let r = evaluate(&[(&pred, &gt)], Protocol::Temporal, Matching::Majority).unwrap();
    let o = entropy_oracle(&pred, &gt).unwrap();
    let ok = |miou: f64, macc: f64, ose: f64, use_: f64| {
        relative_close(miou, 58.33, 0.01)
            && relative_close(macc, 75.00, 0.01)
            && relative_close(ose, 0.3466, 1e-4)
            && relative_close(use_, 0.4774, 1e-4)
    };
    let pass = ok(r.miou, r.macc, r.ose, r.use_) && ok(o.miou, o.macc, o.ose, o.use_);
    report(
        "worked 2x2 example",
        pass,
        &format!(
            "eval mIoU {:.4} mAcc {:.4} OSE {:.5} USE {:.5}; oracle mIoU {:.4} mAcc {:.4} OSE {:.5} USE {:.5}",
            r.miou, r.macc, r.ose, r.use_, o.miou, o.macc, o.ose, o.use_
        ),
    );
    assert!(pass);
}

#[test]
fn kmeans_small_scale_optimality() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4B4D);
    let mut suboptimal = 0;
    let mut non_monotone = 0;
    let mut worst_gap = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=8usize);
        let k = rng.random_range(1..=3usize);
        let d = rng.random_range(1..=2usize);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let (optimum, _) = kmeans_oracle(&points, k).unwrap();
        let mut best = f64::INFINITY;
        for seed in 0..10 {
            let fit = kmeans(&points, &KMeansParams::new(k, seed)).unwrap();
            if fit.inertia_trace.windows(2).any(|w| w[1] > w[0]) {
                non_monotone += 1;
            }
            best = best.min(fit.assignment.inertia);
        }
        let gap = (best - optimum).abs();
        worst_gap = worst_gap.max(gap);
        if gap > 1e-9 {
            suboptimal += 1;
        }
    }
    let pass = suboptimal == 0 && non_monotone == 0;
    report(
        "k-means optimality at small scale (200 instances, best of 10 seeds)",
        pass,
        &format!("{suboptimal} suboptimal (max gap {worst_gap:.3e}), {non_monotone} non-monotone runs"),
    );
    assert!(pass);
}

/// Random dense mask built from a coarse block grid: blocks get random ids,
/// which are then compacted to a dense range.
fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> SuperpixelMask {
    let bx = rng.random_range(1..=6u32);
    let by = rng.random_range(1..=6u32);
    let ids: Vec<u32> = (0..bx * by).map(|_| rng.random_range(0..8)).collect();
    let raw: Vec<u32> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y * by / h, x * bx / w)))
        .map(|(r, c)| ids[(r * bx + c) as usize])
        .collect();
    let mut dense = std::collections::BTreeMap::new();
    for &v in &raw {
        let next = dense.len() as u32;
        dense.entry(v).or_insert(next);
    }
    SuperpixelMask::from_labels(w, h, raw.iter().map(|v| dense[v]).collect()).unwrap()
}

#[test]
fn merged_descriptors_are_weighted_parent_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE913);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (rng.random_range(6..=48u32), rng.random_range(6..=48u32));
        let gh = rng.random_range(1..=h.min(9)) as usize;
        let gw = rng.random_range(1..=w.min(9)) as usize;
        let dim = rng.random_range(1..=6usize);
        let tokens: Vec<f32> = (0..gh * gw * dim).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let map = FeatureMap::new(gh, gw, dim, tokens, None, Vec::new()).unwrap();
        let mask = random_mask(&mut rng, w, h);
        let k = rng.random_range(1..=4u32);
        let pseudo: Vec<u32> = (0..mask.region_count()).map(|_| rng.random_range(0..k)).collect();
        let parents = descriptors_for_frame(&map, &mask, DescriptorMode::PooledOnly, 0).unwrap();
        let merged = merge_superpixels(&mask, &pseudo).unwrap();
        let rec = recompute_descriptors(&map, &merged, DescriptorMode::PooledOnly, 0).unwrap();
        for (m, group) in merged.parents().iter().enumerate() {
            let total: usize = group.iter().map(|&p| parents[p as usize].pixel_count).sum();
            assert_eq!(rec[m].pixel_count, total);
            for j in 0..dim {
                let mean = group
                    .iter()
                    .map(|&p| parents[p as usize].pixel_count as f64 * parents[p as usize].vector[j])
                    .sum::<f64>()
                    / total as f64;
                worst = worst.max((mean - rec[m].vector[j]).abs());
            }
        }
    }
    let pass = worst <= 1e-6;
    report(
        "merged descriptors equal pixel-weighted parent means (100 fixtures, tol 1e-6)",
        pass,
        &format!("max |diff| {worst:.3e}"),
    );
    assert!(pass);
}

fn recovery_spec() -> SyntheticSpec {
    let spec = SyntheticSpec {
        frame_count: 20,
        width: 128,
        height: 128,
        classes: 3,
        separation: 1.0,
        seed: 7,
        ..Default::default()
    };
    SyntheticSpec {
        noise_sigma: 0.05 * spec.separation,
        ..spec
    }
}

fn source_of(seq: &terraseg_core::testkit::SyntheticSequence) -> MemorySource {
    MemorySource::new(seq.stems.clone(), seq.frames.clone(), seq.features.clone()).unwrap()
}

fn native_config(k_local: usize, k_global: usize) -> PipelineConfig {
    PipelineConfig {
        resize: None,
        k_local,
        k_global,
        ..Default::default()
    }
}

#[test]
fn synthetic_recovery() {
    let seq = gen_synthetic_sequence(&recovery_spec()).unwrap();
    let source = source_of(&seq);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    // Reference defaults (including the 512x512 processing size), only K changed.
    let config = PipelineConfig {
        k_local: 3,
        k_global: 3,
        ..Default::default()
    };
    let out = pool.install(|| run_sequence(&config, &source)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let frames: Vec<_> = out.sequence.label_maps.iter().zip(&seq.ground_truth).collect();
    let r = evaluate(&frames, Protocol::Temporal, Matching::Majority).unwrap();
    let pass = r.miou >= 99.0 && r.ose + r.use_ <= 0.05 && secs < 60.0;
    report(
        "synthetic recovery (20x128x128, 3 classes, noise 0.05 sep, K=3)",
        pass,
        &format!(
            "temporal mIoU {:.3}, OSE+USE {:.4}, single-threaded {secs:.2} s",
            r.miou,
            r.ose + r.use_
        ),
    );
    assert!(pass);
}

#[test]
fn temporal_consistency_separation() {
    // Two classes in fixed halves; the predicted ids swap every frame.
    let (w, h) = (8u32, 8u32);
    let gt_classes: Vec<u32> = (0..w * h).map(|i| if i % w < w / 2 { 0 } else { 1 }).collect();
    let gt = GroundTruthMap::new(w, h, gt_classes.clone()).unwrap();
    let preds: Vec<LabelMap> = (0..6)
        .map(|t| {
            let l = gt_classes.iter().map(|&c| if t % 2 == 0 { c as u16 } else { 1 - c as u16 }).collect();
            LabelMap::new(w, h, l).unwrap()
        })
        .collect();
    let frames: Vec<_> = preds.iter().map(|p| (p, &gt)).collect();
    let z = evaluate(&frames, Protocol::Zeroshot, Matching::Majority).unwrap();
    let t = evaluate(&frames, Protocol::Temporal, Matching::Majority).unwrap();
    let pass = z.miou == 100.0 && t.miou <= 50.0;
    report(
        "temporal vs zero-shot on swapping identities",
        pass,
        &format!("zero-shot mIoU {:.2}, temporal mIoU {:.2}", z.miou, t.miou),
    );
    assert!(pass);
}

#[test]
fn determinism_across_runs_and_threads() {
    let spec = SyntheticSpec {
        frame_count: 8,
        width: 96,
        height: 96,
        classes: 4,
        noise_sigma: 0.2,
        seed: 3,
        ..Default::default()
    };
    let seq = gen_synthetic_sequence(&spec).unwrap();
    let source = source_of(&seq);
    let config = PipelineConfig {
        window_len: 3,
        seed: 11,
        ..native_config(6, 5)
    };
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_sequence(&config, &source)).unwrap()
    };
    let a = run_with(1);
    let b = run_with(1);
    let c = run_with(8);
    let bits = |o: &terraseg_core::RunOutput| -> Vec<u64> {
        o.intermediates.global_fit.centroids.iter().flatten().map(|v| v.to_bits()).collect()
    };
    let same_runs = a.sequence.label_maps == b.sequence.label_maps && bits(&a) == bits(&b);
    let same_threads = a.sequence.label_maps == c.sequence.label_maps && bits(&a) == bits(&c);
    let pass = same_runs && same_threads;
    report(
        "bit-identical output across runs and thread counts {1, 8}",
        pass,
        &format!("repeat run identical: {same_runs}, 1 vs 8 threads identical: {same_threads}"),
    );
    assert!(pass);
}

#[test]
fn slico_sanity_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x511C);
    let pixels: Vec<u8> = (0..512 * 512 * 3).map(|_| rng.random()).collect();
    let img = RgbImage::new(512, 512, pixels).unwrap();
    let lab = gaussian_blur(&rgb_to_lab(&img), 0.7).unwrap();
    let mask = slico_segment(&lab, 30, 10).unwrap();
    let count = mask.region_count();
    let sizes = mask.region_sizes();
    let partition = sizes.iter().sum::<usize>() == 512 * 512 && sizes.iter().all(|&s| s > 0);
    let connected = mask.is_four_connected();
    let pass = (140..=320).contains(&count) && partition && connected;
    report(
        "SLICO on 512x512 noise, region size 30",
        pass,
        &format!("{count} regions, partition exact: {partition}, all 4-connected: {connected}"),
    );
    assert!(pass);
}

#[test]
fn k_sweep_entropy_trend() {
    let spec = SyntheticSpec {
        frame_count: 12,
        width: 128,
        height: 128,
        classes: 6,
        noise_sigma: 0.05,
        seed: 21,
        ..Default::default()
    };
    let seq = gen_synthetic_sequence(&spec).unwrap();
    let out = run_sequence(&native_config(30, 3), &source_of(&seq)).unwrap();
    let cached = CachedRun::from_output(&out);
    let mut rows = Vec::new();
    for k in [3, 6, 12, 25] {
        let s = cached.relabel(k).unwrap();
        let hist = joint_histogram(s.label_maps.iter().zip(&seq.ground_truth)).unwrap();
        majority_mapping(&hist).unwrap();
        rows.push((k, over_segmentation_entropy(&hist).unwrap(), under_segmentation_entropy(&hist).unwrap()));
    }
    let ose_up = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let use_down = rows.windows(2).all(|w| w[1].2 <= w[0].2);
    let pass = ose_up && use_down;
    let table: Vec<String> = rows.iter().map(|(k, o, u)| format!("k={k}: OSE {o:.4} USE {u:.4}")).collect();
    report("k-sweep entropy trend over {3, 6, 12, 25}", pass, &table.join(", "));
    assert!(pass);
}
