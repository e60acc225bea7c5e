use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vipa::checkpoint::Checkpoint;
use vipa::commands::read_ablation_csv;
use vipa::dataset::{read_manifest, Dataset, MANIFEST_FILE};
use vipa::pnm::{Image, Kind};
use vipa::report::read_metric_csv;
use vipa_core::model::Vipa;
use vipa_core::scene::Split;

const TINY: &[&str] = &[
    "--set", "image_size=32",
    "--set", "base_channels=8",
    "--set", "dim=16",
    "--set", "heads=2",
    "--set", "mlp_ratio=2",
    "--set", "joint_dim=16",
    "--set", "decoder_dims=16,8,8",
    "--batch-size", "4",
];

fn vipa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vipa"))
        .args(args)
        .env_remove("VIPA_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vipa")
}

fn ok(args: &[&str]) -> String {
    let out = vipa(args);
    assert!(out.status.success(), "vipa {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 8 train, 4 val, 4 held-out scenes at 32×32.
fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen", "--out", s(&data), "--n", "8", "--val", "4", "--heldout", "4", "--seed", "3", "--size", "32"]);
    data
}

fn train(data: &Path, ck: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--checkpoint", s(ck)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen", "--n", "256", "--seed", "7", "--size", "32", "--out", s(out)]);
    }
    let manifest = read_manifest(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.len(), 256);
    assert!(manifest.iter().all(|e| e.split == Split::Train));
    assert_eq!(std::fs::read(a.join(MANIFEST_FILE)).unwrap(), std::fs::read(b.join(MANIFEST_FILE)).unwrap());
    let first = &manifest[0].path;
    assert_eq!(std::fs::read(a.join(first).join("image.ppm")).unwrap(), std::fs::read(b.join(first).join("image.ppm")).unwrap());
}

#[test]
fn invalid_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = vipa(&["gen", "--n", "4", "--size", "50", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of 32"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = vipa(&["train", "--data", s(&data), "--checkpoint", s(&dir.path().join("c")), "--set", "widht=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}

#[test]
fn zero_learning_rate_leaves_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let ck = dir.path().join("model.ckpt");
    train(&data, &ck, &["--lr", "0", "--epochs", "1", "--seed", "5"]);
    let saved = Checkpoint::<f32>::load(&ck).unwrap();
    assert_eq!(saved.step, 2);
    let vocab = Dataset::open(&data).unwrap().vocab;
    let (_, init) = Vipa::new::<f32>(saved.config.model.clone(), vocab, 5).unwrap();
    assert_eq!(saved.params, init);
}

#[test]
fn resume_continues_the_step_count_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let (ck, log) = (dir.path().join("model.ckpt"), dir.path().join("log.csv"));
    train(&data, &ck, &["--epochs", "1", "--log", s(&log)]);
    assert_eq!(Checkpoint::<f32>::load(&ck).unwrap().step, 2);
    train(&data, &ck, &["--epochs", "3", "--log", s(&log), "--resume", s(&ck)]);
    assert_eq!(Checkpoint::<f32>::load(&ck).unwrap().step, 6);
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,seg_loss,contrastive_loss,lr");
    assert_eq!(lines.len(), 7);
    let steps: Vec<u64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4, 5]);
}

#[test]
fn resume_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let ck = dir.path().join("model.ckpt");
    train(&data, &ck, &["--epochs", "1"]);
    let mut args = vec!["train", "--data", s(&data), "--checkpoint", s(&ck), "--resume", s(&ck)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "dim=32", "--epochs", "2"]);
    let out = vipa(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture"));
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    train(&data, &a, &["--epochs", "2", "--seed", "9"]);
    train(&data, &b, &["--epochs", "2", "--seed", "9"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn baselines_bound_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let csv = dir.path().join("gt.csv");
    ok(&["eval", "--data", s(&data), "--split", "val", "--baseline", "gt", "--csv", s(&csv)]);
    let rows = read_metric_csv(&csv).unwrap();
    assert!(rows[..4].iter().all(|(_, v)| *v == 1.0), "{rows:?}");
    let table = ok(&["eval", "--data", s(&data), "--split", "heldout", "--baseline", "background", "--csv", s(&csv)]);
    assert!(table.contains("mIoU"));
    let rows = read_metric_csv(&csv).unwrap();
    assert!(rows[..4].iter().all(|(_, v)| *v == 0.0), "{rows:?}");
    assert_eq!(rows[4], ("samples".to_string(), 4.0));
}

#[test]
fn eval_infer_and_dump_attention_on_a_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let ck = dir.path().join("model.ckpt");
    train(&data, &ck, &["--epochs", "1"]);

    let csv = dir.path().join("m.csv");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--split", "val", "--csv", s(&csv), "--threads", "2"]);
    let rows = read_metric_csv(&csv).unwrap();
    assert!(rows[..4].iter().all(|(_, v)| (0.0..=1.0).contains(v)));

    let sample = data.join(&read_manifest(&data.join(MANIFEST_FILE)).unwrap()[0].path);
    let mask = dir.path().join("pred.pgm");
    ok(&["infer", "--checkpoint", s(&ck), "--sample", s(&sample), "--out", s(&mask)]);
    let img = Image::read(&mask, Kind::Gray).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
    assert!(img.data.iter().all(|&v| v == 0 || v == 255));

    let out = dir.path().join("att");
    ok(&["dump-attention", "--checkpoint", s(&ck), "--sample", s(&sample), "--out", s(&out)]);
    let mask_csv = std::fs::read_to_string(out.join("mask.csv")).unwrap();
    let sums: Vec<usize> = mask_csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap() as usize).sum())
        .filter(|&s| s > 0)
        .collect();
    // grid 1×1 at 32×32: N = 1, N_p = 1
    assert!(!sums.is_empty() && sums.iter().all(|&s| s == 1), "{sums:?}");
    let heat = Image::read(&out.join("relevance_00.pgm"), Kind::Gray).unwrap();
    assert_eq!((heat.width, heat.height), (1, 1));
    for k in 1..=3 {
        let text = std::fs::read_to_string(out.join(format!("decoder_stage{k}.csv"))).unwrap();
        for line in text.lines() {
            let sum: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let ck = dir.path().join("model.ckpt");
    train(&data, &ck, &["--epochs", "1"]);
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[4] = b'9';
    std::fs::write(&ck, bytes).unwrap();
    let out = vipa(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn ablation_sweep_writes_a_readable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let csv = dir.path().join("ablation.csv");
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&csv), "--kv", "vanilla_LE,VE", "--ratios", "0.3,1.0", "--epochs", "1"];
    args.extend_from_slice(TINY);
    let summary = ok(&args);
    assert!(summary.contains("reference trend"));
    let rows = read_ablation_csv(&csv).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.outcome.is_ok()));
    assert_eq!(rows[0].cell.ratio, None);
}
