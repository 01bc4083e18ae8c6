use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_particle-slm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    let text = format!(
        "seed = 11\ncanvas_px = 24\nrect_width_mm = 1.0\nrect_height_mm = 1.4\n\
         diameter_px = 5.0\ninner_diameter_px = 1.5\ncount = 12\nfixed_samples = 120\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_seed_exits_1_and_names_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "canvas_px = 32\n").unwrap();
    let out = cli(&[
        "full",
        "--config",
        &s(&cfg),
        "--out",
        &s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn command_without_seed_source_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["acquire", "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_set_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "reconstruct",
        "--set",
        &s(&dir.path().join("nope")),
        "--out",
        &s(dir.path()),
        "--quiet",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn iteration_cap_exits_3_but_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "max_outer_iters = 2\nrel_tol = 1e-12\n");
    let out_dir = dir.path().join("run");
    let out = cli(&["full", "--config", &cfg, "--out", &s(&out_dir), "--quiet"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out_dir.join("recon.pgm").is_file());
}

#[test]
fn staged_pipeline_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let set = dir.path().join("set");
    let rec = dir.path().join("rec");
    let full = dir.path().join("full");
    assert!(
        cli(&["acquire", "--config", &cfg, "--out", &s(&set), "--quiet"])
            .status
            .success()
    );
    assert!(set.join("mask_000000.pgm").is_file() && set.join("mask_000000.toml").is_file());
    assert!(set.join("config.toml").is_file());
    let code = cli(&[
        "reconstruct",
        "--config",
        &cfg,
        "--set",
        &s(&set),
        "--out",
        &s(&rec),
        "--quiet",
    ])
    .status
    .code();
    assert!(matches!(code, Some(0) | Some(3)));
    let code = cli(&["full", "--config", &cfg, "--out", &s(&full), "--quiet"])
        .status
        .code();
    assert!(matches!(code, Some(0) | Some(3)));
    // the stored set reproduces the in-memory reconstruction exactly
    assert_eq!(
        fs::read(rec.join("recon.pgm")).unwrap(),
        fs::read(full.join("recon.pgm")).unwrap()
    );
    assert_eq!(
        fs::read(rec.join("recon.toml")).unwrap(),
        fs::read(full.join("recon.toml")).unwrap()
    );
    assert_eq!(
        fs::read(set.join("powers.f64")).unwrap(),
        fs::read(full.join("set/powers.f64")).unwrap()
    );

    let ana = dir.path().join("ana");
    let image = s(&rec.join("recon.pgm"));
    let out = cli(&[
        "analyze",
        "--image",
        &image,
        "--reference",
        &image,
        "--out",
        &s(&ana),
        "--quiet",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(ana.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("radius,magnitude\n"));
    let q = fs::read_to_string(ana.join("quality.toml")).unwrap();
    assert!(q.contains("rel_l2_error = 0.0"), "{q}");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cli(&[
        "mask-gen",
        "--config",
        &cfg,
        "--count",
        "2",
        "--out",
        &s(&a),
        "--quiet"
    ])
    .status
    .success());
    assert!(cli(&[
        "mask-gen",
        "--config",
        &cfg,
        "--seed",
        "12",
        "--count",
        "2",
        "--out",
        &s(&b),
        "--quiet"
    ])
    .status
    .success());
    for f in [
        "frame_000000.pgm",
        "frame_000001.pgm",
        "mask_000001.pgm",
        "mask_000001.toml",
        "manifest.toml",
    ] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert_ne!(
        fs::read(a.join("frame_000000.pgm")).unwrap(),
        fs::read(b.join("frame_000000.pgm")).unwrap()
    );
    assert!(fs::read_to_string(b.join("manifest.toml"))
        .unwrap()
        .contains("seed = 12"));
}

#[test]
fn sweeps_write_cells_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        "samples = [120, 60]\nthresholds = [60.0]\nshapes = [\"disk\"]\nsizes = [4.0, 6.0]\nmax_outer_iters = 40\n",
    );
    let run = |cmd: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = cli(&[cmd, "--config", &cfg, "--out", &s(&out), "--quiet"]);
        assert!(
            o.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        out
    };
    let t = run("sweep-threshold", "t");
    assert!(t.join("disk_t60/recon.pgm").is_file() && t.join("summary.csv").is_file());
    let m = run("sweep-samples", "m");
    assert!(
        m.join("m00060/spectrum.csv").is_file() && m.join("master_set/manifest.toml").is_file()
    );
    let z = run("sweep-size", "z");
    assert_eq!(
        fs::read_to_string(z.join("summary.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let r = dir.path().join("r");
    let o = cli(&[
        "repeat",
        "--config",
        &cfg,
        "--runs",
        "2",
        "--out",
        &s(&r),
        "--quiet",
    ]);
    assert!(o.status.success());
    let mean = fs::read_to_string(r.join("mean_spectrum.csv")).unwrap();
    assert!(mean.starts_with("radius,magnitude,std\n"));
    for d in [&t, &m, &z, &r] {
        assert!(d.join("manifest.toml").is_file());
    }
}
