use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use smfd::io::{load_flow, load_frame, load_mask, save_frame, save_mask};
use smfd::{Frame, OcclusionMask};

fn smfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smfd"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = smfd(args);
    assert!(
        out.status.success(),
        "smfd {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_translate_carries_requested_translation() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--scenario",
        "translate",
        "--out-dir",
        s(dir.path()),
        "--seed",
        "1",
    ]);
    // flow_a_b lives on frame a and points into frame b: (b - a) * (2, 1).
    for (a, b) in [(0, 1), (3, 1), (0, 7)] {
        let (f, unknown) =
            load_flow::<f32>(&dir.path().join(format!("flow_{a:03}_{b:03}.flo"))).unwrap();
        let d = b as f32 - a as f32;
        assert_eq!(f.get(10, 10), (2.0 * d, d));
        assert!(unknown.none());
    }
    assert!(dir.path().join("frame_007.png").exists());
}

#[test]
fn blend_with_empty_mask_returns_warped_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    save_frame(
        &Frame::<f32>::from_fn(9, 7, 3, |x, y, c| ((x + 2 * y + c) % 5) as f32 / 4.0),
        &p("cur.png"),
    )
    .unwrap();
    save_frame(
        &Frame::<f32>::from_fn(9, 7, 3, |x, y, c| ((3 * x + y + c) % 7) as f32 / 6.0),
        &p("warped.png"),
    )
    .unwrap();
    save_mask(&OcclusionMask::new(9, 7), &p("mask.png")).unwrap();
    ok(&[
        "blend",
        "--current",
        s(&p("cur.png")),
        "--warped",
        s(&p("warped.png")),
        "--mask",
        s(&p("mask.png")),
        "--out",
        s(&p("out.png")),
    ]);
    let a: Frame<f32> = load_frame(&p("out.png")).unwrap();
    let b: Frame<f32> = load_frame(&p("warped.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn warp_emits_frame_and_validity() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenario", "car3", "--out-dir", s(dir.path())]);
    let out = dir.path().join("w.png");
    let v = dir.path().join("v.png");
    ok(&[
        "warp",
        "--source",
        s(&dir.path().join("frame_001.png")),
        "--flow",
        s(&dir.path().join("flow_000_001.flo")),
        "--out",
        s(&out),
        "--validity",
        s(&v),
    ]);
    let w: Frame<f32> = load_frame(&out).unwrap();
    let f0: Frame<f32> = load_frame(&dir.path().join("frame_000.png")).unwrap();
    // The car in frame 0 is recovered from frame 1.
    assert_eq!(w.pixel(10, 30), f0.pixel(10, 30));
    assert!(load_mask(&v).unwrap().none());
}

#[test]
fn fuse_and_metrics_run_on_a_synthetic_clip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    ok(&["synth", "--scenario", "car3", "--out-dir", s(&clip)]);
    let manifest = clip.join("clip.toml");
    ok(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--step-mode",
        "semantic",
        "--out-dir",
        s(&dir.path().join("sem")),
    ]);
    ok(&[
        "fuse",
        "--manifest",
        s(&manifest),
        "--step-mode",
        "detail",
        "--anchor",
        "2",
        "--out-dir",
        s(&dir.path().join("det")),
    ]);
    // Detail mode keeps the anchor frame itself.
    let a: Frame<f32> = load_frame(&dir.path().join("det/frame_002.png")).unwrap();
    let b: Frame<f32> = load_frame(&clip.join("frame_002.png")).unwrap();
    assert_eq!(a, b);

    let report = dir.path().join("report.txt");
    let table = ok(&[
        "metrics",
        "--original",
        s(&manifest),
        "--edited",
        s(&manifest),
        "--report",
        s(&report),
        "--iterations",
        "20",
    ]);
    assert!(table.contains("overlap_mad"));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("mont_mse=0\n"), "{text}");
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("overlap_mad."))
            .count(),
        3
    );
    assert_eq!(
        text.lines().filter(|l| l.starts_with("mont_mse.")).count(),
        2
    );
}

#[test]
fn run_emits_raw_dumps_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    ok(&["synth", "--scenario", "car3", "--out-dir", s(&clip)]);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\nemit_raw = true\n[schedule]\nsteps = 6\n[fusion]\nanchor_policy = \"round-robin\"\n").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "run",
        "--manifest",
        s(&clip.join("clip.toml")),
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
    ]);
    let raw = smfd::io::load_raw::<f32>(&out.join("frame_001.f32")).unwrap();
    let png: Frame<f32> = load_frame(&out.join("frame_001.png")).unwrap();
    assert!(raw.max_abs_diff(&png).unwrap() <= 0.5 / 255.0 + 1e-6);
    let trace = fs::read_to_string(out.join("trace.txt")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    assert!(
        trace
            .lines()
            .last()
            .unwrap()
            .ends_with("stage=detail anchor=2"),
        "{trace}"
    );
}

#[test]
fn print_defaults_parses_back() {
    let text = ok(&["run", "--print-defaults"]);
    let cfg = smfd::config::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg, smfd::config::RunConfig::default());
}

#[test]
fn failures_exit_nonzero_with_error_prefix() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scenario", "car3", "--out-dir", s(dir.path())]);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[fusion]\nstage_boundary_fraction = 0.0\n").unwrap();
    let out = smfd(&[
        "run",
        "--manifest",
        s(&dir.path().join("clip.toml")),
        "--config",
        s(&cfg),
        "--out-dir",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.starts_with("error: ") && err.contains("fusion.stage_boundary_fraction"),
        "{err}"
    );

    let out = smfd(&[
        "warp",
        "--source",
        "missing.png",
        "--flow",
        "missing.flo",
        "--out",
        "x.png",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error: "));
}
