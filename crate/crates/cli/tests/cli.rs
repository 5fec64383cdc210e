use std::path::Path;
use std::process::{Command, Output};

use dawn_core::encoding::segmentation_targets;
use dawn_core::io;
use dawn_core::synthgen::{generate_scene, SceneSpec};

fn dawn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dawn")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn help_exits_zero() {
    for sub in ["encode", "loss", "cpl", "postproc", "eval", "run-loop", "synth", "predict"] {
        let o = dawn(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn unknown_subcommand_suggests() {
    let o = dawn(&["evl"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("eval"));
}

#[test]
fn missing_flag_is_named() {
    let o = dawn(&["cpl", "--prob", "p.dwnr", "--det", "q.dwnr", "--theta", "0.2", "--d", "25", "--out", "m.png"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--points"));
}

#[test]
fn runtime_failure_exits_two() {
    let o = dawn(&["postproc", "--prob", "/nonexistent/p.dwnr", "--hx", "a", "--hy", "b", "--out", "/tmp/x.png"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("p.dwnr"));
}

fn fixture(dir: &Path) -> dawn_core::synthgen::Scene {
    let scene = generate_scene(&SceneSpec {
        width: 64,
        height: 48,
        count: 4,
        radius_min: 5.0,
        radius_max: 6.0,
        ellipticity_min: 1.0,
        ellipticity_max: 1.0,
        min_spacing: 2.0,
        allow_overlap: false,
        seed: 3,
    })
    .unwrap();
    io::write_points_csv(&dir.join("pts.csv"), &scene.points).unwrap();
    io::write_instance_png(&dir.join("gt.png"), &scene.instances).unwrap();
    let t = segmentation_targets(&scene.instances);
    io::write_real_raster(&dir.join("prob.dwnr"), &t.foreground.map(|&f| if f { 0.9 } else { 0.1 })).unwrap();
    io::write_real_raster(&dir.join("hx.dwnr"), &t.hx).unwrap();
    io::write_real_raster(&dir.join("hy.dwnr"), &t.hy).unwrap();
    scene
}

#[test]
fn encode_cpl_postproc_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let scene = fixture(d);
    let ok = |o: Output| assert_eq!(code(&o), 0, "{}", stderr(&o));

    ok(dawn(&[
        "encode",
        "--points",
        &s(&d.join("pts.csv")),
        "--dataset",
        "TNBC",
        "--size",
        "64x48",
        "--out",
        &s(&d.join("enc.dwnr")),
        "--weights",
        &s(&d.join("w.dwnr")),
    ]));
    let enc = io::read_real_raster(&d.join("enc.dwnr")).unwrap();
    assert_eq!(enc.dims(), (64, 48));
    let p = scene.points.points()[0];
    assert_eq!(*enc.get(p.x as usize, p.y as usize), 1.0);

    // the encoding doubles as a detection map once the excluded band is cleared
    let det = enc.map(|&v| v.max(0.0));
    io::write_real_raster(&d.join("det.dwnr"), &det).unwrap();
    let cpl_args = |out: &str| {
        vec![
            "cpl".to_string(),
            "--prob".into(),
            s(&d.join("prob.dwnr")),
            "--det".into(),
            s(&d.join("det.dwnr")),
            "--points".into(),
            s(&d.join("pts.csv")),
            "--theta".into(),
            "0.2".into(),
            "--d".into(),
            "25".into(),
            "--out".into(),
            s(&d.join(out)),
            "--provenance".into(),
            s(&d.join(format!("{out}.json"))),
        ]
    };
    let run = |args: Vec<String>| dawn(&args.iter().map(String::as_str).collect::<Vec<_>>());
    ok(run(cpl_args("m1.png")));
    ok(run(cpl_args("m2.png")));
    assert_eq!(std::fs::read(d.join("m1.png")).unwrap(), std::fs::read(d.join("m2.png")).unwrap());
    assert_eq!(io::read_mask_png(&d.join("m1.png")).unwrap(), scene.instances.foreground());

    ok(dawn(&[
        "postproc",
        "--prob",
        &s(&d.join("prob.dwnr")),
        "--hx",
        &s(&d.join("hx.dwnr")),
        "--hy",
        &s(&d.join("hy.dwnr")),
        "--out",
        &s(&d.join("inst.png")),
    ]));
    let inst = io::read_instance_png(&d.join("inst.png")).unwrap();
    assert_eq!(inst.max_id(), 4);
}

#[test]
fn loss_spec_prints_value_and_writes_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let scene = fixture(d);
    io::write_mask_png(&d.join("fg.png"), &scene.instances.foreground()).unwrap();
    std::fs::write(
        d.join("spec.json"),
        r#"{"loss":"ce","pred":"prob.dwnr","target":"fg.png","gradient_out":["grad.dwnr"]}"#,
    )
    .unwrap();
    let o = dawn(&["loss", "--spec", &s(&d.join("spec.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["loss"], "ce");
    // every pixel is 0.9 on the correct side
    assert!((v["value"].as_f64().unwrap() + 0.9f64.ln()).abs() < 1e-6);
    assert_eq!(io::read_real_raster(&d.join("grad.dwnr")).unwrap().dims(), (64, 48));

    std::fs::write(d.join("total.json"), r#"{"loss":"total","det":1.0,"fea":2.0,"dyn":4.0}"#).unwrap();
    let o = dawn(&["loss", "--spec", &s(&d.join("total.json"))]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["value"].as_f64().unwrap() - 1.8).abs() < 1e-12);

    std::fs::write(d.join("bad.json"), r#"{"loss":"hinge"}"#).unwrap();
    assert_eq!(code(&dawn(&["loss", "--spec", &s(&d.join("bad.json"))])), 2);
}

#[test]
fn synth_then_eval_perfect_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("scene.json"),
        r#"{"width":64,"height":64,"count":5,"radius_min":5,"radius_max":6,"seed":2,"images":2}"#,
    )
    .unwrap();
    assert_eq!(code(&dawn(&["synth", "--spec", &s(&d.join("scene.json")), "--out", &s(&d.join("data"))])), 0);
    let gt = d.join("data/gt");
    let report = d.join("report.json");
    let o = dawn(&[
        "eval",
        "--pred",
        &s(&gt),
        "--gt",
        &s(&gt),
        "--points",
        &s(&d.join("data/points")),
        "--report",
        &s(&report),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["images"].as_array().unwrap().len(), 2);
    for key in ["DICE", "AJI", "DQ", "SQ", "PQ", "Recall", "Precision", "F1"] {
        assert_eq!(r["mean"][key], 1.0, "{key}");
    }
    assert_eq!(r["match_radius"], 11.0);
}

#[cfg(unix)]
#[test]
fn external_predictor_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("scene.json"),
        r#"{"width":64,"height":64,"count":5,"radius_min":5,"radius_max":6,"seed":8,"images":2}"#,
    )
    .unwrap();
    assert_eq!(code(&dawn(&["synth", "--spec", &s(&d.join("scene.json")), "--out", &s(&d.join("data"))])), 0);
    std::fs::write(d.join("loop.json"), r#"{"rounds":2,"dataset":"TNBC","predictor":{"kind":"external"}}"#).unwrap();
    let run = |predictor: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_dawn"))
            .args([
                "run-loop",
                "--config",
                &s(&d.join("loop.json")),
                "--data",
                &s(&d.join("data")),
                "--out",
                &s(&d.join(out)),
            ])
            .env("DAWN_PREDICTOR", predictor)
            .output()
            .unwrap()
    };
    // the binary's own predict subcommand speaks the protocol
    let ok = run(&format!("{} predict", env!("CARGO_BIN_EXE_dawn")), "ext");
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(d.join("ext/round_2/img_000/mpse.png").exists());

    let bad = run("false", "bad");
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("round 1"));
}
