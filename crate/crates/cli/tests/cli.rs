use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempodet_core::clipper::{enumerate_windows, WindowSpec};
use tempodet_core::postproc::{write_detections, Detection};
use tempodet_core::synthvid::{read_manifest, Dataset};

fn tempodet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempodet"))
        .args(args)
        .env("TEMPODET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let smoke = repo_config("smoke.json");
    let mut args = vec!["gen", "--config", s(&smoke), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = tempodet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn gen_writes_requested_videos() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", &["--num-videos", "2", "--seed", "9"]);
    let manifest = read_manifest(&data).unwrap();
    assert_eq!(manifest.videos.len(), 2);
    assert_eq!(manifest.spec.seed, 9);
    let loaded = Dataset::load(&data).unwrap();
    assert_eq!(loaded.len(), 2);
    assert!(loaded.records.iter().all(|r| r.num_frames == 160));
}

#[test]
fn missing_field_is_a_config_error_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"dataset": {"num_videos": 2, "frames_per_video": 100, "height": 32, "width": 32,
            "num_classes": 3, "instance_len_range": [16, 20], "min_gap": 4,
            "max_instances_per_video": 2, "noise_level": 0.1}}"#,
    );
    let out = tempodet(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("dataset") && msg.contains("seed"), "{msg}");
}

#[test]
fn unknown_and_invalid_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "u.json", r#"{"train": {"batch_size": 4, "learning_rate": 1}}"#);
    let out = tempodet(&["gen", "--config", s(&unknown), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train"), "{}", stderr(&out));

    let invalid = write_config(dir.path(), "i.json", r#"{"postproc": {"nms_delta": 1.5}}"#);
    let out = tempodet(&["gen", "--config", s(&invalid), "--out", s(&dir.path().join("y"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nms_delta"), "{}", stderr(&out));
}

#[test]
fn argument_errors_exit_with_config_code() {
    assert_eq!(code(&tempodet(&["frobnicate"])), 2);
    assert_eq!(code(&tempodet(&["train", "--data"])), 2);
    assert_eq!(code(&tempodet(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", &["--num-videos", "1"]);
    let out = tempodet(&[
        "ablate", "--variant", "bogus", "--data", s(&data), "--test-data", s(&data),
        "--out", s(&dir.path().join("a.csv")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempodet(&[
        "eval", "--data", s(&dir.path().join("nope")), "--det", s(&dir.path().join("d.json")),
        "--out", s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(code(&out), 5);
}

fn ground_truth_detections(data: &Dataset) -> Vec<Detection> {
    data.records
        .iter()
        .flat_map(|r| {
            r.instances.iter().map(|i| Detection {
                video_id: r.id.clone(),
                label: i.label,
                start_frame: i.start_frame,
                end_frame: i.end_frame,
                score: 1.0,
            })
        })
        .collect()
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", &[]);
    let dets = dir.path().join("gt.json");
    write_detections(&dets, &ground_truth_detections(&Dataset::load(&data).unwrap())).unwrap();
    let report = dir.path().join("report.csv");
    let out = tempodet(&["eval", "--data", s(&data), "--det", s(&dets), "--out", s(&report), "--tiou", "0.5,0.9"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "class,0.5,0.9");
    assert_eq!(csv.lines().last().unwrap(), "mAP,1,1");
    assert!(report.with_extension("json").exists());
}

#[test]
fn empty_detections_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", &[]);
    let dets = dir.path().join("none.json");
    fs::write(&dets, "[]").unwrap();
    let report = dir.path().join("r.csv");
    let out = tempodet(&["eval", "--data", s(&data), "--det", s(&dets), "--out", s(&report), "--tiou", "0.3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().last().unwrap(), "mAP,0");
}

#[test]
fn out_of_range_detection_label_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d", &["--num-videos", "1"]);
    let dets = dir.path().join("bad.json");
    let bad = Detection {
        video_id: "video_00000".into(),
        label: 7,
        start_frame: 0,
        end_frame: 32,
        score: 0.5,
    };
    write_detections(&dets, &[bad]).unwrap();
    let out = tempodet(&["eval", "--data", s(&data), "--det", s(&dets), "--out", s(&dir.path().join("r.csv"))]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("out of range"), "{}", stderr(&out));
}

#[test]
fn train_detect_round_trip_and_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = repo_config("smoke.json");
    let data = gen(dir.path(), "d", &[]);
    let model = dir.path().join("m.tdmdl");
    let log = dir.path().join("log.csv");
    let out = tempodet(&[
        "train", "--data", s(&data), "--config", s(&smoke), "--out-model", s(&model), "--log", s(&log),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let log_text = fs::read_to_string(&log).unwrap();
    let mut lines = log_text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,lr_multiplier,l_prop,l_cls,l_aux5,l_aux6,l_reg,fused,probe_mAP"
    );
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 9));
    assert!(rows.iter().any(|r| !r.ends_with(',')), "probe column never filled");

    let dets = dir.path().join("dets.json");
    let out = tempodet(&["detect", "--data", s(&data), "--model", s(&model), "--out", s(&dets), "--config", s(&smoke)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let parsed: Vec<Detection> = serde_json::from_str(&fs::read_to_string(&dets).unwrap()).unwrap();
    assert!(!parsed.is_empty());
    assert!(parsed.iter().all(|d| d.label < 3 && d.score.is_finite()));
    // Every segment is one of the video's enumerated windows.
    let loaded = Dataset::load(&data).unwrap();
    let spec = WindowSpec {
        lengths: vec![32, 64],
        strides: vec![16, 32],
    };
    for d in &parsed {
        let rec = loaded.records.iter().find(|r| r.id == d.video_id).unwrap();
        assert!(enumerate_windows(&rec.id, rec.num_frames, &spec)
            .iter()
            .any(|w| (w.start, w.end()) == (d.start_frame, d.end_frame)));
    }

    // An empty dataset yields an empty detection list.
    let empty = gen(dir.path(), "empty", &["--num-videos", "0"]);
    let empty_dets = dir.path().join("empty.json");
    let out = tempodet(&["detect", "--data", s(&empty), "--model", s(&model), "--out", s(&empty_dets), "--config", s(&smoke)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&empty_dets).unwrap().trim(), "[]");

    // A model trained for three classes cannot score a two-class dataset.
    let two = write_config(
        dir.path(),
        "two.json",
        r#"{"dataset": {"num_videos": 1, "frames_per_video": 100, "height": 32, "width": 32,
            "num_classes": 2, "instance_len_range": [32, 40], "min_gap": 4,
            "max_instances_per_video": 1, "noise_level": 0.1, "seed": 3}}"#,
    );
    let two_data = dir.path().join("two");
    assert_eq!(code(&tempodet(&["gen", "--config", s(&two), "--out", s(&two_data)])), 0);
    let out = tempodet(&["detect", "--data", s(&two_data), "--model", s(&model), "--out", s(&dir.path().join("t.json"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // Input size that the model cannot take.
    let wide = write_config(dir.path(), "wide.json", r#"{"augment": {"resize_h": 40, "resize_w": 40, "crop_h": 36, "crop_w": 36}}"#);
    let out = tempodet(&["detect", "--data", s(&data), "--model", s(&model), "--out", s(&dir.path().join("w.json")), "--config", s(&wide)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // The duration prior needs the training annotations.
    let prior = write_config(dir.path(), "prior.json", r#"{"postproc": {"duration_prior_enabled": true}}"#);
    let out = tempodet(&["detect", "--data", s(&data), "--model", s(&model), "--out", s(&dir.path().join("p.json")), "--config", s(&prior)]);
    assert_eq!(code(&out), 2);
    let out = tempodet(&[
        "detect", "--data", s(&data), "--model", s(&model), "--out", s(&dir.path().join("p.json")),
        "--config", s(&prior), "--train-data", s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // A corrupted model file.
    let broken = dir.path().join("broken.tdmdl");
    fs::write(&broken, b"not a model").unwrap();
    let out = tempodet(&["detect", "--data", s(&data), "--model", s(&broken), "--out", s(&dir.path().join("b.json"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}
