//! The `campseg` binary driven end to end on a tiny synthetic scene.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use campseg::geotiff::read_geotiff;
use campseg::nn::load_checkpoint;
use campseg::trainer::read_epoch_csv;

const SCENE: &str = r#"
seed = 3
out_dir = "run"

[scene]
source = "synthcamp"
name = "tiny"
[scene.synthcamp]
width = 64
height = 64
dwelling_count = 12

[[regions]]
name = "train"
role = "train_large"
window = { col_off = 0, row_off = 0, width = 64, height = 32 }

[[regions]]
name = "val"
role = "validation"
window = { col_off = 0, row_off = 32, width = 64, height = 16 }

[[regions]]
name = "test"
role = "test"
window = { col_off = 0, row_off = 48, width = 64, height = 16 }

[tile]
patch_size = 16
stride = 8
edge_policy = "snap"
"#;

const ADAPTER: &str = r#"
[model]
kind = "adapter"
[model.adapter.encoder]
image_size = 16
patch_embed_size = 2
embed_dim = 16
depth = 2
heads = 2
window_size = 4
adapter_tune_dim = 4
[model.adapter.decoder]
heads = 2
blocks = 1

[train]
epochs = 1
batch_size = 4
"#;

const UNET: &str = r#"
[model]
kind = "unet"
[model.unet]
image_size = 16
base_channels = 2

[train]
epochs = 2
batch_size = 8
"#;

fn write_config(dir: &Path, model: &str) -> PathBuf {
    let path = dir.join("campseg.toml");
    std::fs::write(&path, format!("{SCENE}{model}")).unwrap();
    path
}

fn campseg(args: &[&str], config: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_campseg"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "campseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn adapter_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ADAPTER);
    let run = dir.path().join("run");
    for stage in ["prepare", "train", "infer", "vectorize", "eval", "report"] {
        campseg(&[stage], &cfg);
    }
    assert!(run.join("scene/image.tif").exists());
    assert!(run.join("patches/train_large/manifest.txt").exists());

    let logs = read_epoch_csv(&run.join("epochs.csv")).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].epoch, 1);

    // Only adapters and decoder move when the encoder is frozen.
    let best = load_checkpoint(&run.join("best.ckpt")).unwrap();
    assert!(best.parameter_count(true) < best.parameter_count(false));
    assert!(best.names().any(|n| best.is_frozen(n)));

    let (pred, geo) = read_geotiff(run.join("pred_test.tif")).unwrap();
    assert_eq!((pred.width(), pred.height()), (64, 16));
    assert_eq!(geo.origin_y, 1_000_000.0 - 48.0 * 0.5);
    assert!(run.join("pred_test.shp").exists() && run.join("pred_test.dbf").exists());

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("scene,model,dataset,iou,f1,precision,recall"));
    assert!(lines.next().unwrap().starts_with("test,adapter,tiny-none,"));

    let report = std::fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(report.contains('*'), "{report}");
    assert!(report.contains("best epoch 1 of 1"), "{report}");
}

#[test]
fn unet_pipeline_and_self_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), UNET);
    let run = dir.path().join("run");
    for stage in ["prepare", "train", "infer"] {
        campseg(&[stage], &cfg);
    }
    assert_eq!(read_epoch_csv(&run.join("epochs.csv")).unwrap().len(), 2);
    let truth = run.join("truth_test.tif");
    let truth_s = truth.to_str().unwrap();
    campseg(&["eval", "--mask", truth_s, "--truth", truth_s], &cfg);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    let iou: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(iou, 1.0, "{row}");

    campseg(&["vectorize", "--mask", truth_s], &cfg);
    let (mask, _) = read_geotiff(&truth).unwrap();
    let fg = mask.as_u8().unwrap().iter().filter(|&&v| v == 255).count() as f64;
    let polys = common::read_shapefile(&run.join("truth_test"));
    assert_eq!(polys.iter().map(|p| p.pixel_count).sum::<f64>(), fg);
}

#[test]
fn seed_and_out_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), UNET);
    let alt = dir.path().join("alt");
    campseg(&["prepare", "--seed", "11", "--out", alt.to_str().unwrap()], &cfg);
    campseg(&["prepare"], &cfg);
    let (a, _) = read_geotiff(alt.join("scene/image.tif")).unwrap();
    let (b, _) = read_geotiff(dir.path().join("run/scene/image.tif")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &UNET.replace("image_size = 16", "image_size = 24"));
    let out = Command::new(env!("CARGO_BIN_EXE_campseg"))
        .args(["prepare", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("campseg: error:") && err.contains("model input size"), "{err}");
}

#[test]
fn stages_out_of_order_explain_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), UNET);
    let out = Command::new(env!("CARGO_BIN_EXE_campseg"))
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `campseg prepare` first"));
}
