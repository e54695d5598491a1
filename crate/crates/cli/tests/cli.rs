use std::ffi::OsStr;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use terraseg_core::features::{write_feature_file, FEATURE_HEADER_LEN};
use terraseg_core::pipeline::{load_run, save_sequence, FrameRecord, PipelineConfig, SegmentationSequence};
use terraseg_core::testkit::{gen_synthetic_sequence, SyntheticSpec};
use terraseg_core::{label_colour, LabelMap, RgbImage};

fn terraseg<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_terraseg"))
        .args(args)
        .env_remove("TERRASEG_THREADS")
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = terraseg(args);
    assert!(
        out.status.success(),
        "terraseg {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic dataset under `dir/data`, segmented into `dir/run` with k_global = 3.
fn dataset_and_run(dir: &Path, frames: usize, extra: &[&str]) {
    let data = dir.join("data");
    ok(&["synth", "--out", p(&data), "--frames", &frames.to_string(), "--seed", "3"]);
    let mut args = vec![
        "segment",
        "--frames",
        p(&data.join("frames")),
        "--features",
        p(&data.join("features")),
        "--out",
        p(&dir.join("run")),
        "--k-local",
        "3",
        "--k-global",
        "3",
        "--resize",
        "256x256",
    ]
    .into_iter()
    .map(str::to_string)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(&args);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_then_segment_uses_k_global_labels() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 4, &[]);
    let run = dir.path().join("run");
    let seq = load_run(&run).unwrap();
    assert_eq!(seq.frames.len(), 4);
    for m in &seq.label_maps {
        assert_eq!((m.width(), m.height()), (128, 128));
        assert!(m.labels().iter().all(|&l| l < 3));
    }
    for sub in ["labels", "masks", "merged", "descriptors", "clustering"] {
        assert!(run.join(sub).is_dir(), "{sub} missing");
    }
    assert!(run.join("manifest.json").is_file());
}

#[test]
fn no_intermediates_writes_labels_only() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 2, &["--no-intermediates"]);
    let run = dir.path().join("run");
    assert!(run.join("labels").is_dir());
    assert!(!run.join("masks").exists());
    // the sweep needs the cached descriptors
    let data = dir.path().join("data");
    let out = terraseg(&[
        "sweep",
        "--run",
        p(&run),
        "--gt",
        p(&data.join("gt")),
        "--palette",
        p(&data.join("palette.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# test config\nk_global = 2\nseed = 11\nwindow-len = 1\n").unwrap();
    // the helper passes --k-global 3, which must win over the file
    dataset_and_run(dir.path(), 2, &["--config", p(&cfg)]);
    let seq = load_run(&dir.path().join("run")).unwrap();
    assert_eq!(seq.config.k_global, 3);
    assert_eq!(seq.config.seed, 11);
    assert_eq!(seq.config.window_len, 1);
}

#[test]
fn missing_features_directory_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--frames", "2"]);
    let missing = dir.path().join("no_such_features");
    let out = terraseg(&[
        "segment",
        "--frames",
        p(&data.join("frames")),
        "--features",
        p(&missing),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_features"), "{stderr}");
}

#[test]
fn eval_scores_a_perfect_run_at_100() {
    let dir = tempfile::tempdir().unwrap();
    let seq = gen_synthetic_sequence(&SyntheticSpec {
        frame_count: 3,
        ..Default::default()
    })
    .unwrap();
    seq.write_dataset(&dir.path().join("data")).unwrap();
    // a run whose labels are the ground-truth classes themselves
    let perfect = SegmentationSequence {
        config: PipelineConfig {
            k_global: 3,
            ..Default::default()
        },
        frames: seq
            .stems
            .iter()
            .enumerate()
            .map(|(index, stem)| FrameRecord {
                stem: stem.clone(),
                index,
                width: 128,
                height: 128,
            })
            .collect(),
        label_maps: seq
            .ground_truth
            .iter()
            .map(|g| LabelMap::new(g.width(), g.height(), g.classes().iter().map(|&c| c as u16).collect()).unwrap())
            .collect(),
    };
    let run = dir.path().join("run");
    save_sequence(&perfect, &run).unwrap();
    let data = dir.path().join("data");
    let csv = dir.path().join("perfect.csv");
    ok(&[
        "eval",
        "--run",
        p(&run),
        "--gt",
        p(&data.join("gt")),
        "--palette",
        p(&data.join("palette.csv")),
        "--protocol",
        "both",
        "--csv",
        p(&csv),
    ]);
    let rows = csv_rows(&csv);
    for r in &rows[1..] {
        assert_eq!(&r[3..], ["100.00", "100.00", "0.0000", "0.0000"], "{r:?}");
    }
}

#[test]
fn eval_rejects_tampered_labels() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 2, &[]);
    let run = dir.path().join("run");
    LabelMap::new(128, 128, vec![0; 128 * 128])
        .unwrap()
        .save_png(&run.join("labels/frame_00001.png"))
        .unwrap();
    let data = dir.path().join("data");
    let out = terraseg(&[
        "eval",
        "--run",
        p(&run),
        "--gt",
        p(&data.join("gt")),
        "--palette",
        p(&data.join("palette.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame_00001"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reports_both_protocols() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 4, &[]);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let stdout = ok(&[
        "eval",
        "--run",
        p(&run),
        "--gt",
        p(&data.join("gt")),
        "--palette",
        p(&data.join("palette.csv")),
        "--protocol",
        "both",
        "--matching",
        "hungarian",
    ]);
    assert!(stdout.contains("temporal") && stdout.contains("zeroshot"), "{stdout}");
    let rows = csv_rows(&run.join("eval.csv"));
    assert_eq!(rows[0], ["protocol", "k", "frames", "mIoU", "Acc", "OSE", "USE"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "temporal");
    assert_eq!(rows[2][0], "zeroshot");
    for r in &rows[1..] {
        assert_eq!(r[1], "3");
        assert_eq!(r[2], "4");
        let miou: f64 = r[3].parse().unwrap();
        assert!(miou > 95.0, "{r:?}");
    }
}

#[test]
fn sweep_defaults_to_six_k_values() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 3, &[]);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let relabelled = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--run",
        p(&run),
        "--gt",
        p(&data.join("gt")),
        "--palette",
        p(&data.join("palette.csv")),
        "--out",
        p(&relabelled),
    ]);
    let rows = csv_rows(&run.join("sweep.csv"));
    let ks: Vec<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    assert_eq!(ks, ["400", "200", "100", "50", "25", "12"]);
    let k12 = load_run(&relabelled.join("k_12")).unwrap();
    assert_eq!(k12.config.k_global, 12);
}

#[test]
fn sweep_at_the_run_k_reproduces_eval() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 3, &[]);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (gt, palette) = (data.join("gt"), data.join("palette.csv"));
    let truth = ["--gt", p(&gt), "--palette", p(&palette)];
    ok(&[&["eval", "--run", p(&run)][..], &truth].concat());
    ok(&[&["sweep", "--run", p(&run), "--k", "3"][..], &truth].concat());
    let eval = csv_rows(&run.join("eval.csv"));
    let sweep = csv_rows(&run.join("sweep.csv"));
    assert_eq!(eval[1], sweep[1]);
}

#[test]
fn overlay_extremes() {
    let dir = tempfile::tempdir().unwrap();
    dataset_and_run(dir.path(), 2, &[]);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let seq = load_run(&run).unwrap();
    for (alpha, name) in [("0", "ov0"), ("1", "ov1")] {
        ok(&["overlay", "--run", p(&run), "--frames", p(&data.join("frames")), "--out", p(&dir.path().join(name)), "--alpha", alpha]);
    }
    for (r, labels) in seq.frames.iter().zip(&seq.label_maps) {
        let file = format!("{}.png", r.stem);
        let frame = RgbImage::open(&data.join("frames").join(&file)).unwrap();
        assert_eq!(RgbImage::open(&dir.path().join("ov0").join(&file)).unwrap(), frame);
        let full = RgbImage::open(&dir.path().join("ov1").join(&file)).unwrap();
        for (i, &l) in labels.labels().iter().enumerate() {
            let (x, y) = (i as u32 % labels.width(), i as u32 / labels.width());
            assert_eq!(full.get(x, y), label_colour(l));
        }
    }
    let out = terraseg(&["overlay", "--run", p(&run), "--frames", p(&data.join("frames")), "--out", p(&dir.path().join("bad")), "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_features_good_and_bad() {
    let dir = tempfile::tempdir().unwrap();
    let seq = gen_synthetic_sequence(&SyntheticSpec {
        frame_count: 1,
        ..Default::default()
    })
    .unwrap();
    let good = dir.path().join("good.fsf");
    write_feature_file(&seq.features[0], &good).unwrap();
    let stdout = ok(&["inspect-features", p(&good)]);
    assert!(stdout.contains("grid 32x32 dim 16 registers 4 cls yes"), "{stdout}");
    assert!(stdout.contains(&format!("payload {} B", (32 * 32 + 5) * 16 * 4)), "{stdout}");

    let mut bytes = fs::read(&good).unwrap();
    bytes[FEATURE_HEADER_LEN..FEATURE_HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let bad = dir.path().join("bad.fsf");
    fs::write(&bad, bytes).unwrap();
    let out = terraseg(&["inspect-features", p(&good), p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.fsf"));
    // the good file is still reported
    assert!(String::from_utf8_lossy(&out.stdout).contains("good.fsf"));
}

#[test]
fn inspect_features_checks_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--frames", "3"]);
    ok(&["inspect-features", p(&data.join("features")), "--frames", p(&data.join("frames"))]);
    fs::remove_file(data.join("features/frame_00001.fsf")).unwrap();
    let out = terraseg(&["inspect-features", p(&data.join("features")), "--frames", p(&data.join("frames"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame_00001"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(terraseg(&["segment", "--bogus"]).status.code(), Some(1));
    assert_eq!(terraseg(&["nope"]).status.code(), Some(1));
    assert_eq!(terraseg::<&str>(&[]).status.code(), Some(1));
    assert_eq!(terraseg(&["--threads", "0", "synth", "--out", "/nonexistent/x"]).status.code(), Some(1));
    assert_eq!(terraseg(&["--help"]).status.code(), Some(0));
    assert_eq!(terraseg(&["segment", "--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--frames", "2"]);
    let bad_k = terraseg(&[
        "segment",
        "--frames",
        p(&data.join("frames")),
        "--features",
        p(&data.join("features")),
        "--out",
        p(&dir.path().join("run")),
        "--k-global",
        "0",
    ]);
    assert_eq!(bad_k.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--frames", "4", "--noise", "0.1"]);
    let mut manifests = Vec::new();
    for threads in ["1", "8"] {
        let run = dir.path().join(format!("run{threads}"));
        ok(&[
            "--threads",
            threads,
            "segment",
            "--frames",
            p(&data.join("frames")),
            "--features",
            p(&data.join("features")),
            "--out",
            p(&run),
            "--window-len",
            "2",
            "--k-local",
            "4",
            "--k-global",
            "3",
            "--resize",
            "256x256",
        ]);
        manifests.push(fs::read(run.join("manifest.json")).unwrap());
        for stem in ["frame_00000", "frame_00003"] {
            assert_eq!(
                fs::read(dir.path().join("run1/labels").join(format!("{stem}.png"))).ok(),
                fs::read(run.join("labels").join(format!("{stem}.png"))).ok()
            );
        }
    }
    assert_eq!(manifests[0], manifests[1]);
}
