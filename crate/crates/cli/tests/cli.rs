use std::path::{Path, PathBuf};
use std::process::Command;

use svfreg::grid::{Geometry, ScalarVolume};
use svfreg::io;

fn svfreg(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_svfreg"))
        .args(args)
        .output()
        .expect("binary runs");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (out.status.code().unwrap_or(-1), stderr)
}

fn ok(args: &[&str]) {
    let (code, err) = svfreg(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Phantoms plus a one-epoch checkpoint at 24^3.
fn setup(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");
    ok(&["phantom", "--count", "2", "--dims", "24", "--scale", "0.8", "--seed", "3", "--out", &s(&data)]);
    ok(&["train", "--data", &s(&data), "--epochs", "1", "--lr", "1e-3", "--out", &s(&ckpt)]);
    (data, ckpt)
}

fn pair_args<'a>(ckpt: &'a str, fixed: &'a str, moving: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["--ckpt", ckpt, "--fixed", fixed, "--moving", moving, "--out", out]
}

#[test]
fn full_pipeline_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = setup(tmp.path());
    let case = data.join("case_000");
    for f in ["fixed.dvol", "moving.dvol", "fixed_mask.dvol", "moving_mask.dvol", "v_gt.dvol", "case.json"] {
        assert!(case.join(f).is_file(), "missing {f}");
    }
    assert!(data.join("manifest.json").is_file() && data.join("timings.json").is_file());
    assert!(tmp.path().join("model.ckpt.manifest.json").is_file());

    let runs = tmp.path().join("runs");
    let (ck, fx, mv) = (s(&ckpt), s(&case.join("fixed.dvol")), s(&case.join("moving.dvol")));
    let (fm, mm) = (s(&case.join("fixed_mask.dvol")), s(&case.join("moving_mask.dvol")));
    for dir in ["fwd", "inv"] {
        let out = s(&runs.join(dir));
        let mut args = vec!["adapt"];
        args.extend(pair_args(&ck, &fx, &mv, &out));
        args.extend(["--direction", dir, "--steps", "2", "--mc-samples", "3", "--fixed-mask", &fm, "--moving-mask", &mm]);
        ok(&args);
        for f in ["disp.dvol", "warped.dvol", "warped_mask.dvol", "metrics.json", "report.json", "adapted.ckpt", "manifest.json", "timings.json"] {
            assert!(runs.join(dir).join(f).is_file(), "missing {dir}/{f}");
        }
    }
    let csv = tmp.path().join("table.csv");
    ok(&["report", "--in", &s(&runs), "--csv", &s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "source,case_id,direction,dsc,assd_mm,folding_pct,inv_consistency_vox");
    assert!(lines[1].starts_with("fwd,case_000,fwd,"), "{}", lines[1]);
    assert!(lines[2].starts_with("inv,case_000,inv,"), "{}", lines[2]);
    assert!(lines.iter().any(|l| l.starts_with("summary,median,fwd,")));
    assert!(lines.iter().any(|l| l.starts_with("summary,median,inv,")));
}

#[test]
fn adapt_with_zero_steps_matches_register() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = setup(tmp.path());
    let case = data.join("case_001");
    let (ck, fx, mv) = (s(&ckpt), s(&case.join("fixed.dvol")), s(&case.join("moving.dvol")));
    let reg = s(&tmp.path().join("reg"));
    let ada = s(&tmp.path().join("ada"));
    let mut a = vec!["register"];
    a.extend(pair_args(&ck, &fx, &mv, &reg));
    ok(&a);
    let mut b = vec!["adapt"];
    b.extend(pair_args(&ck, &fx, &mv, &ada));
    b.extend(["--steps", "0", "--mc-samples", "2"]);
    ok(&b);
    for f in ["disp.dvol", "warped.dvol"] {
        let x = std::fs::read(Path::new(&reg).join(f)).unwrap();
        let y = std::fs::read(Path::new(&ada).join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn rerun_reproduces_adapt_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = setup(tmp.path());
    let case = data.join("case_000");
    let (ck, fx, mv) = (s(&ckpt), s(&case.join("fixed.dvol")), s(&case.join("moving.dvol")));
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let first_out = s(&first);
    let mut a = vec!["adapt"];
    a.extend(pair_args(&ck, &fx, &mv, &first_out));
    a.extend(["--steps", "3", "--mc-samples", "4", "--seed", "9", "--direction", "inv"]);
    ok(&a);
    ok(&["rerun", "--manifest", &s(&first.join("manifest.json")), "--out", &s(&second)]);
    for f in ["disp.dvol", "warped.dvol", "report.json", "adapted.ckpt"] {
        let x = std::fs::read(first.join(f)).unwrap();
        let y = std::fs::read(second.join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn eval_of_identical_masks_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let geom = Geometry::cube([10, 10, 10]).unwrap();
    let mask = ScalarVolume::from_fn(geom, |c| if c.iter().all(|&v| (3..7).contains(&v)) { 1.0 } else { 0.0 });
    let mp = tmp.path().join("mask.dvol");
    io::write_scalar(&mp, &mask).unwrap();
    let disp = tmp.path().join("u.dvol");
    io::write_field(&disp, &svfreg::grid::VectorField::zeros(geom)).unwrap();
    let out = tmp.path().join("r.json");
    ok(&["eval", "--fixed-mask", &s(&mp), "--warped-mask", &s(&mp), "--disp", &s(&disp), "--out", &s(&out)]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(r["dsc"].as_f64(), Some(1.0));
    assert_eq!(r["assd_mm"].as_f64(), Some(0.0));
    assert_eq!(r["folding_pct"].as_f64(), Some(0.0));

    // refuses to overwrite, then does with --force
    let args = ["eval", "--fixed-mask", &s(&mp), "--warped-mask", &s(&mp), "--disp", &s(&disp), "--out", &s(&out)];
    assert_eq!(svfreg(&args).0, 2);
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(svfreg(&["frobnicate"]).0, 2);
    assert_eq!(svfreg(&["phantom", "--out", "x"]).0, 2);

    let (data, ckpt) = setup(tmp.path());
    let case = data.join("case_000");
    let (ck, fx, mv) = (s(&ckpt), s(&case.join("fixed.dvol")), s(&case.join("moving.dvol")));
    let out = s(&tmp.path().join("o"));

    let mut bad_dir = vec!["register"];
    bad_dir.extend(pair_args(&ck, &fx, &mv, &out));
    bad_dir.extend(["--direction", "sideways"]);
    assert_eq!(svfreg(&bad_dir).0, 2);

    // existing non-empty output directory without --force
    assert_eq!(svfreg(&["phantom", "--count", "1", "--dims", "24", "--out", &s(&data)]).0, 2);

    let missing = s(&tmp.path().join("nope.dvol"));
    let mut a = vec!["register"];
    a.extend(pair_args(&ck, &missing, &mv, &out));
    assert_eq!(svfreg(&a).0, 3);

    let truncated = tmp.path().join("trunc.dvol");
    let mut bytes = std::fs::read(case.join("fixed.dvol")).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&truncated, bytes).unwrap();
    let tr = s(&truncated);
    let mut b = vec!["register"];
    b.extend(pair_args(&ck, &tr, &mv, &out));
    let (code, err) = svfreg(&b);
    assert_eq!(code, 3);
    assert!(err.contains("payload length mismatch"), "{err}");

    let nan_img = tmp.path().join("nan.dvol");
    let fixed = io::read_scalar(case.join("fixed.dvol")).unwrap();
    io::write_scalar(&nan_img, &fixed.map(|v| v * f64::NAN)).unwrap();
    let ni = s(&nan_img);
    let mut c = vec!["adapt"];
    c.extend(pair_args(&ck, &ni, &mv, &out));
    c.extend(["--steps", "1", "--mc-samples", "2", "--force"]);
    assert_eq!(svfreg(&c).0, 4);
}
