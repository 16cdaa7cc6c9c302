use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
hidden_dim = 16
num_queries = 4
query_shape = [2, 2]
decoder_layers = 1
sim_kernel = 3
cim_kernel = 3
backbone_channels = [4, 4, 8, 8, 16]
stage_blocks = [1, 1, 1]
stage_dims = [16, 16, 16]
block_kernel = 3

[train]
lr = 1e-3
lr_backbone = 1e-3
epochs = 1
lr_drop_epoch = 1
batch_size = 4

[data]
count = 8
val_count = 4
image_size = [64, 64]
objects = [1, 2]
size_range = [8, 16]
"#;

fn deco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deco"))
        .args(args)
        .env_remove("DECO_SEED")
        .output()
        .expect("spawn deco")
}

fn ok(args: &[&str]) -> String {
    let out = deco(args);
    assert!(
        out.status.success(),
        "deco {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn synth_train_eval_infer_slots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("val");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data), "--held-out"]);
    let ann = fs::read_to_string(data.join("annotations.json")).unwrap();
    assert!(ann.contains("\"categories\""));
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 4);

    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run)]);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,lr,lr_backbone,total,class,l1,giou,ap50");
    assert_eq!(lines.len(), 2);
    let ckpt = run.join("checkpoint.deco");

    let report = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert!(report.lines().any(|l| l.starts_with("ap50=")), "{report}");
    assert!(report.contains("images=4"), "{report}");
    let csv = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--format", "csv"]);
    assert!(csv.starts_with("metric,value\n"));

    let dets = tmp.path().join("dets.json");
    let image = data.join("images").join(fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().file_name());
    ok(&["infer", "--ckpt", s(&ckpt), "--image", s(&image), "--out", s(&dets), "--image-id", "3"]);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dets).unwrap()).unwrap();
    let rows = parsed.as_array().unwrap();
    assert_eq!(rows.len(), 4, "one result per query");
    for r in rows {
        assert_eq!(r["image_id"], 3);
        assert!((1..=3).contains(&r["category_id"].as_u64().unwrap()));
        assert_eq!(r["bbox"].as_array().unwrap().len(), 4);
        assert!(r["score"].as_f64().unwrap() > 0.0);
    }

    let slots = tmp.path().join("slots.csv");
    ok(&["slots", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&slots), "--threshold", "0"]);
    let text = fs::read_to_string(&slots).unwrap();
    assert!(text.starts_with("slot,cx,cy,w,h,class,conf\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 4);
}

#[test]
fn repeated_training_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["metrics.csv", "checkpoint.deco"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_deco"))
        .args(["train", "--config", s(&cfg), "--out", s(&b)])
        .env("DECO_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(fs::read(a.join("checkpoint.deco")).unwrap(), fs::read(b.join("checkpoint.deco")).unwrap());
}

#[test]
fn gradcheck_single_case_and_listing() {
    let names = ok(&["gradcheck", "--list"]);
    assert!(names.lines().any(|l| l == "composed"));
    assert!(names.lines().any(|l| l == "giou_loss"));
    let table = ok(&["gradcheck", "--case", "conv2d_depthwise"]);
    assert!(table.lines().nth(1).unwrap().ends_with(",pass"), "{table}");
}

#[test]
fn unknown_axis_is_rejected_with_valid_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = deco(&["ablate", "--config", s(&cfg), "--axis", "width"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for axis in ["upsample", "layers", "kernel", "fusion", "query_shape"] {
        assert!(err.contains(axis), "{err}");
    }
}

#[test]
fn ablate_fusion_writes_one_row_per_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let csv = ok(&["ablate", "--config", s(&cfg), "--axis", "fusion"]);
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next(), Some("value,ap50,loss"));
    assert_eq!(values, ["add", "multiply", "concat_conv"]);
}

#[test]
fn bad_config_fails_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nnum_queries = 7\nquery_shape = [2, 2]\n").unwrap();
    let run = tmp.path().join("run");
    let out = deco(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_queries"));
    assert!(!run.exists());
}
