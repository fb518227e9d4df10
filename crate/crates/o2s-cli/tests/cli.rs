//! End-to-end tests of the `o2s` binary: exit codes, determinism, and the
//! gen → forward → assign → loss → eval pipeline on real files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn o2s(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_o2s"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should run")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = o2s(args, dir);
    assert!(
        out.status.success(),
        "`o2s {}` failed with {:?}:\n{}{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_value(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_byte_identical_for_equal_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "gen", "--seed", "7", "--lanes", "3", "--out", "a/", "--emit-lines",
    ];
    ok(&args, tmp.path());
    let args2 = [
        "gen", "--seed", "7", "--lanes", "3", "--out", "b/", "--emit-lines",
    ];
    ok(&args2, tmp.path());
    let a = fs::read(tmp.path().join("a/scene-7.json")).unwrap();
    let b = fs::read(tmp.path().join("b/scene-7.json")).unwrap();
    assert_eq!(a, b, "same flags must produce identical scene bytes");
    let a = fs::read(tmp.path().join("a/scene-7.lines.txt")).unwrap();
    let b = fs::read(tmp.path().join("b/scene-7.lines.txt")).unwrap();
    assert_eq!(a, b, "same flags must produce identical lane text");
}

#[test]
fn lane_count_above_four_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = o2s(&["gen", "--seed", "1", "--lanes", "5", "--out", "x.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1..=4"));
}

#[test]
fn malformed_scene_json_exits_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), "{\"geometry\": {\"image_width\":").unwrap();
    let out = o2s(&["assign", "--scene", "bad.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "parse errors should name the location: {err}");
}

#[test]
fn missing_scene_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = o2s(&["forward", "--scene", "nosuch.json", "--out", "t.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_inputs_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = o2s(&["eval"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn scene_without_predictions_cannot_be_assigned() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "3", "--lanes", "2", "--out", "s.json"], tmp.path());
    let out = o2s(&["assign", "--scene", "s.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no predictions"));
}

#[test]
fn perfect_predictions_cost_nothing_and_score_one() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--seed", "5", "--lanes", "3", "--out", "s.json", "--preds", "perfect"],
        tmp.path(),
    );

    ok(&["assign", "--scene", "s.json", "--out", "assign.json"], tmp.path());
    let report = read_value(&tmp.path().join("assign.json"));
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6);
    let last = &layers[layers.len() - 1];
    let fully: Vec<&Value> = last["positives"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["fully"].as_bool().unwrap())
        .collect();
    assert_eq!(fully.len(), 3, "one fully positive per ground truth");
    assert!(fully.iter().all(|p| p["d"].as_f64() == Some(1.0)));

    ok(&["loss", "--scene", "s.json", "--out", "loss.json"], tmp.path());
    let loss = read_value(&tmp.path().join("loss.json"));
    assert_eq!(loss["total"].as_f64(), Some(0.0), "perfect predictions must cost 0");

    ok(&["eval", "--scene", "s.json", "--out", "eval.json"], tmp.path());
    let eval = read_value(&tmp.path().join("eval.json"));
    assert_eq!(eval["f1"].as_f64(), Some(1.0));
    assert_eq!(eval["fp"].as_u64(), Some(0));
    assert_eq!(eval["fn"].as_u64(), Some(0));
}

#[test]
fn forward_emits_full_size_trace_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "2", "--lanes", "2", "--out", "s.json"], tmp.path());
    ok(
        &["forward", "--scene", "s.json", "--weights-seed", "42", "--out", "t1.json"],
        tmp.path(),
    );
    let trace = read_value(&tmp.path().join("t1.json"));
    assert_eq!(trace["dim"].as_u64(), Some(256));
    assert_eq!(trace["num_rows"].as_u64(), Some(72));
    let layers = trace["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 6, "default decoder depth");
    for layer in layers {
        let preds = layer["predictions"].as_array().unwrap();
        assert_eq!(preds.len(), 192, "default anchor count");
        assert_eq!(preds[0]["offsets"].as_array().unwrap().len(), 72);
    }

    ok(
        &["forward", "--scene", "s.json", "--weights-seed", "42", "--out", "t2.json"],
        tmp.path(),
    );
    let b1 = fs::read(tmp.path().join("t1.json")).unwrap();
    let b2 = fs::read(tmp.path().join("t2.json")).unwrap();
    assert_eq!(b1, b2, "same weights seed must give identical trace bytes");
}

#[test]
fn small_pipeline_runs_end_to_end_from_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--seed", "9", "--lanes", "2", "--out", "s.json"], tmp.path());
    let stdout = ok(
        &[
            "forward", "--scene", "s.json", "--weights-seed", "1", "--layers", "2", "--dim",
            "32", "--heads", "4", "--anchors", "24", "--out", "t.json",
        ],
        tmp.path(),
    );
    assert!(stdout.contains("2 layers x 24 predictions"));

    ok(
        &["assign", "--scene", "s.json", "--trace", "t.json", "--out", "a.json"],
        tmp.path(),
    );
    let report = read_value(&tmp.path().join("a.json"));
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2, "one assignment per decoder layer");
    for layer in layers {
        let positives = layer["positives"].as_array().unwrap();
        for p in positives {
            let d = p["d"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&d));
        }
    }

    ok(
        &["loss", "--scene", "s.json", "--trace", "t.json", "--seg", "0.5", "--out", "l.json"],
        tmp.path(),
    );
    let loss = read_value(&tmp.path().join("l.json"));
    let total = loss["total"].as_f64().unwrap();
    let cls = loss["cls"].as_f64().unwrap();
    let reg = loss["reg"].as_f64().unwrap();
    assert!(total > 0.0, "untrained decoder must have positive loss");
    assert_eq!(total, 2.0 * cls + reg + 1.0 * 0.5, "weighted decomposition");
}

#[test]
fn directory_eval_counts_a_dropped_lane_as_one_recall_quantum() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--seed", "21", "--lanes", "3", "--out", "scene.json", "--emit-lines"],
        tmp.path(),
    );
    let text = fs::read_to_string(tmp.path().join("scene.lines.txt")).unwrap();
    let lanes: Vec<&str> = text.lines().collect();
    assert_eq!(lanes.len(), 3);

    fs::create_dir_all(tmp.path().join("gts")).unwrap();
    fs::create_dir_all(tmp.path().join("preds")).unwrap();
    fs::write(tmp.path().join("gts/img.lines.txt"), &text).unwrap();
    // Identical lanes minus the last one: two exact matches, one miss.
    fs::write(tmp.path().join("preds/img.lines.txt"), lanes[..2].join("\n")).unwrap();

    let stdout = ok(
        &["eval", "--preds", "preds", "--gts", "gts", "--out", "e.json"],
        tmp.path(),
    );
    assert!(stdout.contains("tp 2"), "stdout: {stdout}");
    let eval = read_value(&tmp.path().join("e.json"));
    assert_eq!(eval["tp"].as_u64(), Some(2));
    assert_eq!(eval["fp"].as_u64(), Some(0));
    assert_eq!(eval["fn"].as_u64(), Some(1));
    assert_eq!(eval["recall"].as_f64(), Some(2.0 / 3.0), "exactly (G-1)/G");
    assert_eq!(eval["precision"].as_f64(), Some(1.0));
}

#[test]
fn directory_eval_treats_missing_prediction_files_as_empty() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["gen", "--seed", "30", "--lanes", "2", "--out", "scene.json", "--emit-lines"],
        tmp.path(),
    );
    let text = fs::read_to_string(tmp.path().join("scene.lines.txt")).unwrap();
    fs::create_dir_all(tmp.path().join("gts/night")).unwrap();
    fs::create_dir_all(tmp.path().join("preds")).unwrap();
    fs::write(tmp.path().join("gts/night/img.lines.txt"), &text).unwrap();

    let out = o2s(
        &["eval", "--preds", "preds", "--gts", "gts", "--out", "e.json"],
        tmp.path(),
    );
    assert!(out.status.success());
    let eval = read_value(&tmp.path().join("e.json"));
    assert_eq!(eval["tp"].as_u64(), Some(0));
    assert_eq!(eval["fn"].as_u64(), Some(2));
    assert_eq!(eval["per_category"]["night"]["fn"].as_u64(), Some(2));
}

#[test]
fn bench_emits_phase_medians() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(
        &["bench", "--anchors", "64", "--gts", "2", "--iters", "3", "--seed", "4", "--out", "b.json"],
        tmp.path(),
    );
    for phase in ["cost_matrix", "ota", "hungarian", "soft_labels", "full_pass"] {
        assert!(stdout.contains(phase), "table misses {phase}: {stdout}");
    }
    let bench = read_value(&tmp.path().join("b.json"));
    assert_eq!(bench["anchors"].as_u64(), Some(64));
    assert_eq!(bench["iters"].as_u64(), Some(3));
    assert!(bench["phases"]["full_pass"]["median_ms"].as_f64().unwrap() >= 0.0);
}
