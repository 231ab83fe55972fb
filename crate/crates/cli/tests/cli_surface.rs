//! Command-line surface behavior: exit codes, machine-readable error JSON
//! on stderr, output formats, and byte-level determinism of commands.

use cobbkit_core::geometry::{
    format_triple_exact, make_vertebra, write_landmarks, CobbTriple, LandmarkLayout, LandmarkSet,
    Point, VERTEBRA_COUNT,
};
use cobbkit_core::tensor::Shape2D;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cobbkit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cobbkit_cli_{tag}_{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn fan_spine() -> LandmarkSet {
    let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
    for (v, quad) in corners.iter_mut().enumerate() {
        let theta = (v as f64 * 5.0).to_radians();
        *quad = make_vertebra(
            Point::new(50.0, 10.0 + 12.0 * v as f64),
            [theta.cos(), theta.sin()],
            20.0,
            8.0,
        );
    }
    LandmarkSet::new(corners).unwrap()
}

fn parallel_spine() -> LandmarkSet {
    let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
    for (v, quad) in corners.iter_mut().enumerate() {
        *quad = make_vertebra(
            Point::new(50.0, 10.0 + 12.0 * v as f64),
            [1.0, 0.0],
            20.0,
            8.0,
        );
    }
    LandmarkSet::new(corners).unwrap()
}

fn write_lm(dir: &Path, name: &str, lm: &LandmarkSet) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(
        &path,
        write_landmarks(
            lm,
            LandmarkLayout::Interleaved,
            false,
            Shape2D::new(256, 128),
        ),
    )
    .unwrap();
    path
}

#[test]
fn cobb_fixtures_and_error_path() {
    let dir = temp_dir("cobb");
    let parallel = write_lm(&dir, "parallel.csv", &parallel_spine());
    let fan = write_lm(&dir, "fan.csv", &fan_spine());

    let out = run(&["cobb", parallel.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "0.0000,0.0000,0.0000"
    );

    let out = run(&["cobb", fan.to_str().unwrap()]);
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "0.0000,80.0000,0.0000"
    );

    // Malformed file: nonzero exit, machine-readable JSON on stderr.
    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "1.0,2.0\nnot,numbers\n").unwrap();
    let out = run(&["cobb", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let err: serde_json::Value =
        serde_json::from_str(stderr.trim()).expect("stderr carries error JSON");
    assert_eq!(err["code"], 3);
    assert!(err["error"].as_str().unwrap().contains("line"));

    // Usage errors (unknown flag) exit 2 via the argument parser.
    let out = run(&["cobb", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn rasterize_writes_a_valid_three_level_mask() {
    let dir = temp_dir("rast");
    let fan = write_lm(&dir, "fan.csv", &fan_spine());
    let out_path = dir.join("mask.pgm");
    let out = run(&[
        "rasterize",
        fan.to_str().unwrap(),
        "--size",
        "256x128",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let bytes = std::fs::read(&out_path).unwrap();
    let img = cobbkit_core::imaging::read_pgm(&bytes).unwrap();
    let mut levels: Vec<u8> = img.pixels().iter().map(|&p| p as u8).collect();
    levels.sort_unstable();
    levels.dedup();
    assert!(
        levels.iter().all(|l| [0u8, 128, 255].contains(l)),
        "unexpected levels {levels:?}"
    );
    // Round-trips through the mask decoder.
    assert!(cobbkit_core::imaging::image_to_mask(&img).is_ok());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn synth_output_is_byte_deterministic() {
    let dir = temp_dir("synthdet");
    let a = dir.join("a");
    let b = dir.join("b");
    for target in [&a, &b] {
        let out = run(&[
            "synth",
            "--n",
            "4",
            "--seed",
            "9",
            "--size",
            "64x32",
            target.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    for sub in [
        "images/synth_0002.pgm",
        "landmarks/synth_0003.csv",
        "angles/synth_0001.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(sub)).unwrap(),
            std::fs::read(b.join(sub)).unwrap(),
            "{sub} differs"
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn evaluate_round_trips_predictions_and_reports_zero_for_identity() {
    let dir = temp_dir("eval");
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(gt_dir.join("angles")).unwrap();

    let triples = [
        ("r1", CobbTriple::new(12.25, 48.5, 6.0).unwrap()),
        ("r2", CobbTriple::new(0.0, 22.0, 11.75).unwrap()),
    ];
    let mut pred_text = String::from("id,angle1,angle2,angle3\n");
    for (id, t) in &triples {
        std::fs::write(
            gt_dir.join("angles").join(format!("{id}.csv")),
            format!("{}\n", format_triple_exact(t)),
        )
        .unwrap();
        pred_text.push_str(&format!("{id},{:.4},{:.4},{:.4}\n", t.pt, t.mt, t.tl));
    }
    let preds = dir.join("preds.csv");
    std::fs::write(&preds, &pred_text).unwrap();

    let out = run(&[
        "evaluate",
        preds.to_str().unwrap(),
        gt_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("smape"));
    assert!(table.contains("0.0000"), "table was:\n{table}");

    let out = run(&[
        "evaluate",
        preds.to_str().unwrap(),
        gt_dir.to_str().unwrap(),
        "--json",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(report["n"], 2);
    assert_eq!(report["smape"], 0.0);

    // Shuffled prediction order yields the identical report (id join).
    let mut lines: Vec<&str> = pred_text.trim().lines().collect();
    lines.swap(1, 2);
    let shuffled = dir.join("shuffled.csv");
    std::fs::write(&shuffled, format!("{}\n", lines.join("\n"))).unwrap();
    let out2 = run(&[
        "evaluate",
        shuffled.to_str().unwrap(),
        gt_dir.to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(out.stdout, out2.stdout);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn evaluate_degenerate_denominator_exits_4_naming_the_record() {
    let dir = temp_dir("degen");
    let gt_dir = dir.join("gt");
    std::fs::create_dir_all(gt_dir.join("angles")).unwrap();
    std::fs::write(gt_dir.join("angles/z.csv"), "0,0,0\n").unwrap();
    let preds = dir.join("preds.csv");
    std::fs::write(&preds, "id,angle1,angle2,angle3\nz,0.0000,0.0000,0.0000\n").unwrap();
    let out = run(&[
        "evaluate",
        preds.to_str().unwrap(),
        gt_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("z"));
    std::fs::remove_dir_all(&dir).ok();
}

/// Minimal XML structure check: every opened tag is closed or
/// self-closing, quotes balance inside tags.
fn assert_well_formed_xml(text: &str) {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        let end = rest[start..]
            .find('>')
            .map(|e| start + e)
            .expect("every tag closes its bracket");
        let tag = &rest[start + 1..end];
        assert_eq!(
            tag.matches('"').count() % 2,
            0,
            "unbalanced quotes in <{tag}>"
        );
        if let Some(name) = tag.strip_prefix('/') {
            let open = stack.pop().unwrap_or_else(|| panic!("stray closer {name}"));
            assert_eq!(open, name, "mismatched closer");
        } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
            let name: String = tag
                .chars()
                .take_while(|c| !c.is_whitespace() && *c != '>')
                .collect();
            stack.push(name);
        }
        rest = &rest[end + 1..];
    }
    assert!(stack.is_empty(), "unclosed tags: {stack:?}");
}

#[test]
fn plot_angles_emits_54_rect_svg() {
    let dir = temp_dir("plot");
    let angles = dir.join("angles.csv");
    let mut text = String::new();
    for i in 0..40 {
        let t =
            CobbTriple::new((i % 12) as f64, 10.0 + (i * 2 % 70) as f64, (i % 25) as f64).unwrap();
        text.push_str(&format!("{}\n", format_triple_exact(&t)));
    }
    std::fs::write(&angles, text).unwrap();
    let out_path = dir.join("dist.svg");
    let out = run(&[
        "plot-angles",
        angles.to_str().unwrap(),
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let svg = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(svg.matches("<rect ").count(), 54);
    assert_well_formed_xml(&svg);

    // Identical invocation produces identical bytes.
    let out2_path = dir.join("dist2.svg");
    run(&[
        "plot-angles",
        angles.to_str().unwrap(),
        out2_path.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&out_path).unwrap(),
        std::fs::read(&out2_path).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_rejects_unknown_keys_and_bad_versions() {
    let dir = temp_dir("cfg");
    let write_cfg = |name: &str, body: serde_json::Value| -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
        path
    };
    let base = serde_json::json!({
        "version": 1,
        "data_dir": dir.join("nowhere"),
        "input": {"kind": "img", "height": 64, "width": 32},
        "epochs": 1,
        "seed": 1,
        "checkpoint_out": dir.join("m.ckpt"),
        "log_out": dir.join("l.jsonl"),
    });

    // Unknown key fails fast with exit 2.
    let mut with_typo = base.clone();
    with_typo["epochz"] = serde_json::json!(3);
    let cfg = write_cfg("typo.json", with_typo);
    let out = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("epochz"));

    // Wrong version.
    let mut wrong_version = base.clone();
    wrong_version["version"] = serde_json::json!(2);
    let cfg = write_cfg("version.json", wrong_version);
    let out = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Invalid shape chain: pooling an odd input is rejected at load.
    let mut odd = base.clone();
    odd["input"] = serde_json::json!({"kind": "img", "height": 63, "width": 32});
    let cfg = write_cfg("odd.json", odd);
    let out = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Valid config against a missing data dir is a data error (exit 3).
    let cfg = write_cfg("nodata.json", base);
    let out = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_command_reports_zero_failures_on_a_small_config() {
    let dir = temp_dir("gradcheck");
    let data = dir.join("data");
    run(&[
        "synth",
        "--n",
        "1",
        "--seed",
        "3",
        "--size",
        "16x16",
        data.to_str().unwrap(),
    ]);
    let cfg_path = dir.join("cfg.json");
    let body = serde_json::json!({
        "version": 1,
        "data_dir": data,
        "input": {"kind": "img", "height": 16, "width": 16},
        "network": [
            {"kind": "conv", "out_channels": 2, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu"},
            {"kind": "max_pool"},
            {"kind": "flatten"},
            {"kind": "fc", "out": 3},
            {"kind": "linear_head"}
        ],
        "epochs": 1,
        "batch_size": 4,
        "seed": 12,
        "checkpoint_out": dir.join("m.ckpt"),
        "log_out": dir.join("l.jsonl"),
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    let out = run(&["gradcheck", cfg_path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(report["failures"].as_array().unwrap().len(), 0);
    assert!(report["checked"].as_u64().unwrap() > 0);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn domain_adaptation_trains_with_an_unlabeled_pool() {
    let dir = temp_dir("domain");
    let data = dir.join("data");
    let pool = dir.join("pool");
    run(&[
        "synth",
        "--n",
        "8",
        "--seed",
        "31",
        "--size",
        "32x16",
        data.to_str().unwrap(),
    ]);
    run(&[
        "synth",
        "--n",
        "6",
        "--seed",
        "77",
        "--size",
        "32x16",
        pool.to_str().unwrap(),
    ]);
    // Strip the pool's annotations so it is a genuine unlabeled image pool.
    std::fs::remove_dir_all(pool.join("landmarks")).unwrap();
    std::fs::remove_dir_all(pool.join("angles")).unwrap();

    let cfg_path = dir.join("cfg.json");
    let body = serde_json::json!({
        "version": 1,
        "data_dir": data,
        "input": {"kind": "img", "height": 32, "width": 16},
        "network": [
            {"kind": "conv", "out_channels": 2, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu"},
            {"kind": "max_pool"},
            {"kind": "flatten"},
            {"kind": "fc", "out": 3},
            {"kind": "linear_head"}
        ],
        "epochs": 2,
        "batch_size": 4,
        "augment": {"enabled": false},
        "lambda": 1.0,
        "unlabeled_dir": pool,
        "seed": 3,
        "checkpoint_out": dir.join("m.ckpt"),
        "log_out": dir.join("l.jsonl"),
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    let out = run(&["train", cfg_path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    // The checkpoint carries the domain head and still predicts.
    let out = run(&[
        "predict",
        dir.join("m.ckpt").to_str().unwrap(),
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("id,angle1,angle2,angle3"));

    // Domain adaptation needs an unlabeled pool; lambda > 0 without one is
    // a configuration error.
    let mut no_pool = body.clone();
    no_pool["unlabeled_dir"] = serde_json::Value::Null;
    let bad_cfg = dir.join("bad.json");
    std::fs::write(&bad_cfg, serde_json::to_string_pretty(&no_pool).unwrap()).unwrap();
    let out = run(&["train", bad_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn predict_round_trips_through_evaluate_without_warnings() {
    let dir = temp_dir("predict");
    let data = dir.join("data");
    run(&[
        "synth",
        "--n",
        "12",
        "--seed",
        "21",
        "--size",
        "32x16",
        data.to_str().unwrap(),
    ]);
    let cfg_path = dir.join("cfg.json");
    let body = serde_json::json!({
        "version": 1,
        "data_dir": data,
        "input": {"kind": "img", "height": 32, "width": 16},
        "network": [
            {"kind": "conv", "out_channels": 2, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "batch_norm"},
            {"kind": "relu"},
            {"kind": "max_pool"},
            {"kind": "flatten"},
            {"kind": "fc", "out": 3},
            {"kind": "linear_head"}
        ],
        "epochs": 2,
        "batch_size": 4,
        "augment": {"enabled": false},
        "seed": 5,
        "checkpoint_out": dir.join("m.ckpt"),
        "log_out": dir.join("l.jsonl"),
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    let out = run(&["train", cfg_path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let preds = dir.join("preds.csv");
    let out = run(&[
        "predict",
        dir.join("m.ckpt").to_str().unwrap(),
        data.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // No reject lines on stderr for a fully annotated pool.
    assert!(String::from_utf8_lossy(&out.stderr).trim().is_empty());

    let out = run(&[
        "evaluate",
        preds.to_str().unwrap(),
        data.to_str().unwrap(),
        "--json",
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(report["n"], 12);
    assert!(report["smape"].as_f64().unwrap().is_finite());

    // Training log is well-formed JSON lines with the documented fields.
    let log = std::fs::read_to_string(dir.join("l.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["epoch"].is_u64());
        assert!(v["lr"].is_f64());
        assert!(v["train_loss"].is_f64());
        assert!(!v["val_smape"].is_null() || v.get("val_smape").is_some());
    }
    std::fs::remove_dir_all(&dir).ok();
}
