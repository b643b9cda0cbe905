mod common;

use std::fs;

use common::{propkit, s, write_dataset, write_loss_fixture};
use propkit::tensor_store::read_annotations;

#[test]
fn extract_then_eval_recovers_planted_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write_dataset(dir.path(), 6, 1);
    let out = dir.path().join("train.json");
    let (code, stdout, stderr) = propkit(&[
        "extract", "--features", s(&dir.path().join("features")), "--out", s(&out), "--k-set", "3,4", "--classes", "4",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("images: 6"), "{stdout}");
    let (set, classes) = read_annotations(&out).unwrap();
    assert_eq!(classes, 4);
    assert_eq!(set.iter().map(|i| &i.image_id).collect::<Vec<_>>(), gt.iter().map(|i| &i.image_id).collect::<Vec<_>>());

    let (code, stdout, _) = propkit(&["--json", "eval", "--gt", s(&dir.path().join("gt.json")), "--proposals", s(&out)]);
    assert_eq!(code, 0);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(report["ar_at_k"]["100"].as_f64().unwrap() > 0.9, "{report}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 3, 2);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"classes": 999, "k_set": [3]}"#).unwrap();
    let out = dir.path().join("a.json");
    let feats = dir.path().join("features");
    // 999 clusters cannot be formed from a handful of proposals
    let (code, _, stderr) = propkit(&["--config", s(&cfg), "extract", "--features", s(&feats), "--out", s(&out)]);
    assert_eq!(code, 1, "{stderr}");
    let (code, _, stderr) =
        propkit(&["--config", s(&cfg), "extract", "--features", s(&feats), "--out", s(&out), "--classes", "2"]);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(read_annotations(&out).unwrap().1, 2);

    fs::write(&cfg, r#"{"clases": 2}"#).unwrap();
    let (code, _, stderr) = propkit(&["--config", s(&cfg), "extract", "--features", s(&feats), "--out", s(&out)]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("o.json");
    let (code, _, stderr) = propkit(&["extract", "--features", s(&empty), "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(stderr.contains("no feature stacks found"), "{stderr}");

    let missing = dir.path().join("missing.json");
    assert_eq!(propkit(&["eval", "--gt", s(&missing), "--proposals", s(&missing)]).0, 2);
    assert_eq!(propkit(&["extract", "--features", s(&missing), "--out", s(&out)]).0, 2);
    assert_eq!(propkit(&["eval"]).0, 2);

    let junk = dir.path().join("junk.fms");
    fs::write(&junk, b"NOPE0000").unwrap();
    assert_eq!(propkit(&["inspect", s(&junk)]).0, 2);

    // a corrupt stack inside an otherwise valid directory is a per-file data error
    write_dataset(dir.path(), 2, 3);
    fs::copy(&junk, dir.path().join("features/zzz.fms")).unwrap();
    let (code, _, stderr) = propkit(&["extract", "--features", s(&dir.path().join("features")), "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(stderr.contains("zzz.fms"), "{stderr}");
}

#[test]
fn inspect_reports_levels() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 1, 4);
    let path = dir.path().join("features/img0000.fms");
    let (code, stdout, _) = propkit(&["--json", "inspect", s(&path)]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v[0]["image_id"], "img0000");
    assert_eq!(v[0]["levels"][0]["channels"], 8);
    assert_eq!(v[0]["levels"][1]["height"], 8);
    let (_, text, _) = propkit(&["inspect", s(&path)]);
    assert!(text.contains("level 1: 16 x 8 x 8"), "{text}");
}

#[test]
fn selftrain_filter_accepts_documents_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.json");
    fs::write(
        &reference,
        r#"{"images":[{"id":1,"file_name":"a","width":100,"height":100}],"annotations":[],
            "categories":[{"id":0,"name":"pseudo_0"},{"id":1,"name":"pseudo_1"}]}"#,
    )
    .unwrap();
    let results = dir.path().join("res.json");
    fs::write(
        &results,
        r#"[{"image_id":1,"category_id":0,"bbox":[0,0,50,50],"score":0.9},
            {"image_id":"a","category_id":1,"bbox":[5,5,50,50],"score":0.8},
            {"image_id":1,"category_id":1,"bbox":[60,60,30,30],"score":0.001}]"#,
    )
    .unwrap();
    let out = dir.path().join("next.json");
    assert_eq!(propkit(&["selftrain-filter", "--predictions", s(&results), "--out", s(&out)]).0, 2);
    let (code, _, stderr) =
        propkit(&["selftrain-filter", "--predictions", s(&results), "--images", s(&reference), "--out", s(&out)]);
    assert_eq!(code, 0, "{stderr}");
    let (set, classes) = read_annotations(&out).unwrap();
    assert_eq!(classes, 2);
    assert_eq!(set[0].labels, vec![0, 1]);
    assert_eq!(set[0].scores, Some(vec![0.9, 0.001]));

    // the filtered document is itself a valid input and a fixed point
    let again = dir.path().join("again.json");
    assert_eq!(propkit(&["selftrain-filter", "--predictions", s(&out), "--out", s(&again)]).0, 0);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn loss_with_oracle_and_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (gt, preds, logits) = write_loss_fixture(dir.path(), 5, 8, 5, 3);
    for term in ["prob", "logprob"] {
        let (code, stdout, stderr) = propkit(&[
            "--json", "loss", "--gt", s(&gt), "--predictions", s(&preds), "--logits", s(&logits), "--oracle",
            "--match-class-term", term,
        ]);
        assert_eq!(code, 0, "{stderr}");
        let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(v["oracle"]["checked"], 8);
        let m = &v["mean"];
        let sum = m["class"].as_f64().unwrap() + m["l1"].as_f64().unwrap() + m["giou"].as_f64().unwrap();
        assert!((sum - m["total"].as_f64().unwrap()).abs() < 1e-9);
    }

    let other = tempfile::tempdir().unwrap();
    let (gt4, _, _) = write_loss_fixture(other.path(), 5, 8, 5, 4);
    let (code, _, stderr) = propkit(&["loss", "--gt", s(&gt4), "--predictions", s(&preds), "--logits", s(&logits)]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn kmeans_fit_and_assign() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 6);
    let a = dir.path().join("features/img0000.fms");
    let b = dir.path().join("features/img0001.fms");
    let model = dir.path().join("m.plm");
    let (code, stdout, stderr) =
        propkit(&["--json", "kmeans", "fit", "--features", s(&a), s(&b), "--classes", "4", "--out", s(&model)]);
    assert_eq!(code, 0, "{stderr}");
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["rows"], 128);
    let (code, stdout, _) = propkit(&["kmeans", "assign", "--model", s(&model), "--features", s(&a)]);
    assert_eq!(code, 0);
    let labels: std::collections::BTreeMap<String, Vec<u32>> = serde_json::from_str(&stdout).unwrap();
    assert_eq!(labels["img0000"].len(), 64);
    assert!(labels["img0000"].iter().all(|&l| l < 4));
    let (code, _, _) = propkit(&["kmeans", "assign", "--model", s(&model), "--features", s(&a), "--level", "0"]);
    assert_eq!(code, 1);
}
