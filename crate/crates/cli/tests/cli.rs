use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereosplat")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"width": 24, "height": 16, "focal": 24.0, "n_gaussians": 600}"#;

/// A 24×16 two-layer scene: 3 training and 2 test views.
fn small_scene(dir: &Path) -> std::path::PathBuf {
    let scene = dir.join("scene");
    let spec = dir.join("spec.json");
    std::fs::write(&spec, SMALL).unwrap();
    ok(&["make-synthetic", "--spec", s(&spec), "--matches", "100", "--out", s(&scene)]);
    scene
}

#[test]
fn make_synthetic_writes_a_loadable_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let bundle = stereosplat::scene::load_scene(&scene).unwrap();
    assert_eq!(bundle.train.len(), 3);
    assert_eq!(bundle.test.len(), 2);
    assert!(bundle.correspondences.is_some());
    assert!(scene.join("gt.ply").exists());
    assert!(scene.join("synthetic.json").exists());
}

#[test]
fn make_synthetic_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["make-synthetic", "--kind", "random-blob-cloud", "--matches", "50", "--seed", "3", "--out", s(d)]);
    }
    for f in ["scene.json", "images/cam00.png", "depths/cam01.pfm", "correspondences.json", "gt.ply"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn rendering_the_ground_truth_scores_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let renders = dir.path().join("renders");
    ok(&["render", "--scene", s(&scene), "--cloud", s(&scene.join("gt.ply")), "--split", "all", "--out", s(&renders)]);
    assert!(renders.join("cam01_depth.pfm").exists());
    let table = ok(&["eval", "--scene", s(&scene), "--renders", s(&renders), "--split", "all"]);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "{table}");
    for row in rows {
        let cols: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cols[1], "inf", "{row}");
        assert_eq!(cols[2], "1.000000", "{row}");
        assert!(cols[3].parse::<f64>().unwrap() < 1e-3, "{row}");
    }
}

#[test]
fn render_then_eval_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let cloud = dir.path().join("init.ply");
    ok(&["init-points", "--scene", s(&scene), "--mode", "dense", "--out", s(&cloud)]);
    let renders = dir.path().join("renders");
    let render = ["render", "--scene", s(&scene), "--cloud", s(&cloud), "--depth-format", "png16", "--out", s(&renders)];
    ok(&render);
    let first = ok(&["eval", "--scene", s(&scene), "--renders", s(&renders)]);
    let png = std::fs::read(renders.join("cam01.png")).unwrap();
    ok(&render);
    assert_eq!(std::fs::read(renders.join("cam01.png")).unwrap(), png);
    assert!(renders.join("cam01_depth.png").exists());
    assert_eq!(ok(&["eval", "--scene", s(&scene), "--renders", s(&renders)]), first);
}

#[test]
fn zero_iterations_leave_the_cloud_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let init = dir.path().join("init.ply");
    ok(&["init-points", "--scene", s(&scene), "--mode", "random", "--count", "40", "--min", "-1,-1,2", "--max", "1,1,4", "--out", s(&init)]);
    let out = dir.path().join("run");
    ok(&["train", "--scene", s(&scene), "--init", s(&init), "--iters", "0", "--out", s(&out)]);
    assert_eq!(std::fs::read(out.join("point_cloud.ply")).unwrap(), std::fs::read(&init).unwrap());
    assert_eq!(std::fs::read_to_string(out.join("log.jsonl")).unwrap(), "");
    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["total_iters"], 0);
}

#[test]
fn training_writes_checkpoints_log_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let init = dir.path().join("init.ply");
    ok(&["init-points", "--scene", s(&scene), "--out", s(&init)]);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"checkpoint_every": 10, "eval_every": 15, "consis_start_iter": 5}"#).unwrap();
    let out = dir.path().join("run");
    ok(&["train", "--scene", s(&scene), "--init", s(&init), "--config", s(&cfg), "--iters", "30", "--out", s(&out)]);
    assert!(out.join("checkpoints/iter_000010.ply").exists());
    assert!(out.join("checkpoints/iter_000020.ply").exists());
    let log = stereosplat::train::TrainLog::parse_json_lines(&std::fs::read_to_string(out.join("log.jsonl")).unwrap()).unwrap();
    assert_eq!(log.iterations().count(), 30);
    assert!(log.iterations().filter(|r| r.iter >= 5).all(|r| r.l_consis.is_some() && r.shift.is_some()));
    assert!(log.records.iter().any(|r| matches!(r, stereosplat::train::LogRecord::Eval(_))));

    let table = ok(&["eval", "--scene", s(&scene), "--cloud", s(&out.join("point_cloud.ply")), "--json", s(&dir.path().join("m.json"))]);
    assert!(table.starts_with("view"));
    assert!(table.contains("cam01"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(json[0]["psnr"].as_f64().unwrap() > 0.0);
    assert!(json[0]["depth_mae"].as_f64().is_some());
}

#[test]
fn sparse_init_reads_a_point_ply() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path());
    let points = stereosplat::ply::PointSet { positions: vec![[0.0, 0.0, 3.0], [0.1, 0.0, 3.0], [0.0, 0.2, 3.1]], colors: None };
    let pts = dir.path().join("points.ply");
    std::fs::write(&pts, stereosplat::ply::save_point_ply(&points)).unwrap();
    let out = dir.path().join("init.ply");
    let msg = ok(&["init-points", "--scene", s(&scene), "--mode", "sparse", "--points", s(&pts), "--out", s(&out)]);
    assert!(msg.contains("wrote 3 Gaussians"), "{msg}");
}

#[test]
fn errors_are_one_line_with_a_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["eval", "--scene", s(&missing), "--renders", s(&missing)]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[io]"), "{err}");

    let scene = small_scene(dir.path());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"decay": 1.5}"#).unwrap();
    let out = run(&["train", "--scene", s(&scene), "--init", s(&scene.join("gt.ply")), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[config]"), "{}", stderr(&out));

    std::fs::write(&cfg, r#"{"decay": 0.99, "no_such_field": 1}"#).unwrap();
    let out = run(&["train", "--scene", s(&scene), "--init", s(&scene.join("gt.ply")), "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert!(stderr(&out).starts_with("error[json]"), "{}", stderr(&out));

    let out = run(&["init-points", "--scene", s(&scene), "--mode", "random", "--out", s(&dir.path().join("x.ply"))]);
    assert!(stderr(&out).starts_with("error[usage]"), "{}", stderr(&out));

    std::fs::remove_file(scene.join("images/cam00.png")).unwrap();
    let out = run(&["init-points", "--scene", s(&scene), "--out", s(&dir.path().join("x.ply"))]);
    assert!(stderr(&out).starts_with("error[missing-image]"), "{}", stderr(&out));
}

#[test]
fn unknown_flags_print_usage_and_fail() {
    let out = run(&["train", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr(&out).to_lowercase().contains("usage"));
    let out = run(&["make-synthetic", "--kind", "cube", "--out", "x"]);
    assert!(!out.status.success());
}
