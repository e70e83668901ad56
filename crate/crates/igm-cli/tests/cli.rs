//! End-to-end command tests on small configurations: every subcommand,
//! the exit-code contract, determinism of produced bytes, and
//! checkpoint restart.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn igm_bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_BIN_EXE_igm"));
    if !p.exists() {
        p = PathBuf::from("target/debug/igm");
    }
    p
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(igm_bin())
        .args(args)
        .env("IGM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn small_beam_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
[problem]
dim = 2
origin = [0.0, 0.0]
extents = [2.0, 1.0]
mesh = [20, 10]
zones = [2, 1]
fixed_faces = ["x_max"]
h = 0.1

[[problem.tractions]]
face = "y_max"
direction = 1
magnitude = -1.0

[menu]
name = "x_cell"

[optimizer]
cell_resolution = 16
max_iters = 6
zeta_activation = 2
checkpoint_every = 3

[output]
dir = "{}"
raster = [80, 40]
gallery_resolution = 32
law_samples = 9
law_resolution = 128
{extra}
"#,
        dir.join("out").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn menu_command_writes_law_and_gallery() {
    let tmp = tempdir("menu");
    let cfg = small_beam_config(&tmp, "");
    let out = run(&["menu", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.join("out/volume_law.csv")).unwrap();
    assert!(csv.starts_with("zeta,fraction,law_fraction"));
    assert_eq!(csv.lines().count(), 10);
    // gallery images exist with the requested dimensions
    let pgm = fs::read(tmp.join("out/cell_00.pgm")).unwrap();
    let header = String::from_utf8_lossy(&pgm[..15]);
    assert!(header.contains("32 32"), "{header}");
}

#[test]
fn optimize_then_rasterize_validate_and_determinism() {
    let tmp = tempdir("opt");
    let cfg = small_beam_config(&tmp, "\n[validate]\nraster = [160, 80]\n");
    let out = run(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history1 = fs::read(tmp.join("out/history.csv")).unwrap();
    let raster1 = fs::read(tmp.join("out/final_raster.pgm")).unwrap();
    let report = fs::read_to_string(tmp.join("out/report.txt")).unwrap();
    assert!(report.contains("fine_scale_deviation"));

    // identical config + seed give bit-identical outputs
    let out = run(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let history2 = fs::read(tmp.join("out/history.csv")).unwrap();
    let raster2 = fs::read(tmp.join("out/final_raster.pgm")).unwrap();
    assert_eq!(history1, history2, "history bytes differ between runs");
    assert_eq!(raster1, raster2, "raster bytes differ between runs");

    // rasterize the final design explicitly
    let design = tmp.join("out/final_design.txt");
    let out = run(&[
        "rasterize",
        "--config",
        cfg.to_str().unwrap(),
        "--design",
        design.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(tmp.join("out/raster.pgm").exists());

    // validate against the fine scale
    let out = run(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--design",
        design.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = fs::read_to_string(tmp.join("out/validation.csv")).unwrap();
    assert!(v.contains("relative_deviation"));
}

#[test]
fn restart_reproduces_continued_history() {
    let tmp = tempdir("restart");
    let cfg = small_beam_config(&tmp, "");
    let out = run(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full_history = fs::read_to_string(tmp.join("out/history.csv")).unwrap();

    // restart from the checkpoint at iteration 3 into a fresh directory
    let ckpt = tmp.join("out/checkpoint_0003.txt");
    assert!(ckpt.exists(), "checkpoint missing");
    let tmp2 = tempdir("restart2");
    let cfg2 = small_beam_config(&tmp2, "");
    let out = run(&[
        "optimize",
        "--config",
        cfg2.to_str().unwrap(),
        "--restart",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resumed = fs::read_to_string(tmp2.join("out/history.csv")).unwrap();

    // rows after the checkpoint match the original run bit for bit
    let original_tail: Vec<&str> = full_history
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iter"))
        .skip(3)
        .collect();
    let resumed_rows: Vec<&str> = resumed.lines().collect();
    assert_eq!(original_tail, resumed_rows, "continued history differs");
}

#[test]
fn decorate_shell_and_empty_box() {
    let tmp = tempdir("shell");
    let text = format!(
        r#"
[menu]
name = "ring2d"

[output]
dir = "{0}"

[decorate]
surface = "paraboloid"
surface_extent = 0.5
h = 0.2
h0 = 0.1
voxel_origin = [-0.55, -0.55, -0.1]
voxel_extents = [1.1, 1.1, 0.7]
voxel_resolution = [24, 24, 16]
stl = true
seeds = 12
"#,
        tmp.join("out").display()
    );
    let cfg = tmp.join("shell.toml");
    fs::write(&cfg, &text).unwrap();
    let out = run(&["decorate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.join("out/shell.vox").exists());
    assert!(tmp.join("out/shell.stl").exists());

    // empty voxel box exits zero with an empty grid
    let empty = text.replace("voxel_resolution = [24, 24, 16]", "voxel_resolution = [0, 0, 0]");
    fs::write(&cfg, empty).unwrap();
    let out = run(&["decorate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
}

#[test]
fn exit_codes() {
    let tmp = tempdir("codes");
    // config error: unknown key
    let bad = tmp.join("bad.toml");
    fs::write(&bad, "[output]\ndir = \"x\"\nnot_a_key = 1\n").unwrap();
    let out = run(&["menu", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // numerical failure: divergence forced by an absurd load
    let cfg = small_beam_config(&tmp, "");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "magnitude = -1.0",
        "magnitude = -1.0e30",
    );
    // an absurd load alone only scales linearly; force divergence by a
    // non-finite magnitude instead
    let text = text.replace("-1.0e30", "nan");
    fs::write(&cfg, text).unwrap();
    let out = run(&["optimize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("igm-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}
