use std::path::Path;
use std::process::{Command, Output};

use canopy_core::raster::{write_raster, RasterGrid};

fn canopy(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canopy"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

const SMALL: &str = r#"{"seed": 3, "tile_size": 56, "scene": {"height": 112, "width": 112,
    "layout": {"parcel_rows": 2, "parcel_cols": 1}}}"#;

#[test]
fn help_and_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(canopy(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(canopy(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(canopy(dir.path(), &["eval", "--pred", "x.rst"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = canopy(dir.path(), &["train-enhancer"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extract"));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"tile_size": 50}"#).unwrap();
    assert_eq!(
        canopy(dir.path(), &["--config", cfg.to_str().unwrap(), "synth"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn synth_writes_scene_and_reports_tree_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let o = canopy(&out, &["--config", cfg.to_str().unwrap(), "synth"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&o);
    assert_eq!(s["command"], "synth");
    let rows = std::fs::read_to_string(out.join("trees.csv")).unwrap().lines().count() - 1;
    assert_eq!(s["trees"].as_u64().unwrap() as usize, rows);
    for f in ["chm.rst", "rgb.feat", "parcels.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_on_explicit_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let p = RasterGrid::new(4, 1, 1.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let r = RasterGrid::new(4, 1, 1.0, vec![1.0, 2.0, 2.0, 5.0]).unwrap();
    write_raster(&p, &dir.path().join("p.rst")).unwrap();
    write_raster(&r, &dir.path().join("r.rst")).unwrap();
    let pp = dir.path().join("p.rst");
    let rp = dir.path().join("r.rst");
    let args = ["eval", "--pred", pp.to_str().unwrap(), "--ref", rp.to_str().unwrap()];
    let o = canopy(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&o);
    let keys: Vec<_> = m.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys.len(), 5);
    for k in ["bias", "mae", "rmse", "r2", "n"] {
        assert!(m.get(k).is_some(), "{k}");
    }
    assert_eq!(m["mae"], 0.5);
    assert_eq!(m["n"], 4);
    let mut with = args.to_vec();
    with.push("--determination");
    assert!(json(&canopy(dir.path(), &with)).get("r2_determination").is_some());
}
