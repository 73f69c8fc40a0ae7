use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
framework = contrastive
backbone = mlp
mlp_hidden = 16
proj_hidden = 16
proj_dim = 8
pred_hidden = 16
synthetic_classes = 3
synthetic_train_per_class = 8
synthetic_test_per_class = 4
synthetic_size = 8
synthetic_channels = 1
batch_size = 8
epochs = 2
warmup_epochs = 1
checkpoint_every = 1
probe_epochs = 5
knn_k = 3
log_wall_time = false
";

fn sdmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdmp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.conf");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let o = sdmp(&["train-everything"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("usage: sdmp"));
    assert_eq!(sdmp(&[]).status.code(), Some(2));
}

#[test]
fn failures_exit_1_with_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = sdmp(&["pretrain", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--batch_size", "7"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error kind=config "), "{err}");
    assert!(last.contains("batch_size"));

    let o = sdmp(&["probe", "--ckpt", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).lines().last().unwrap().starts_with("error kind=checkpoint "));
}

#[test]
fn pretrain_then_evaluate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = sdmp(&["pretrain", "--config", &cfg, "--out", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,train_loss,lr,knn_acc,probe_acc,wall_time_s");
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("summary.json").exists());
    let ckpt = out.join("ep2.ckpt");
    assert!(ckpt.exists());
    let ck = ckpt.to_str().unwrap();

    let o = sdmp(&["probe", "--ckpt", ck]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let probe = fs::read_to_string(out.join("probe.csv")).unwrap();
    assert!(probe.starts_with("checkpoint,config_hash,top1,n_eval,per_class\n"));
    assert!(probe.lines().nth(1).unwrap().starts_with("ep2.ckpt,"));

    let o = sdmp(&["knn", "--ckpt", ck]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("top1="));

    let o = sdmp(&["finetune", "--ckpt", ck, "--fraction", "0.5", "--epochs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("n_train=12"));

    let o = sdmp(&["corrupt-eval", "--ckpt", ck, "--corruption", "gaussian_noise"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 7);

    let plot = dir.path().join("plot.csv");
    let o = sdmp(&["export-plot", "--metrics", out.join("metrics.csv").to_str().unwrap(), "--out", plot.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(fs::read_to_string(plot).unwrap().starts_with("series,x,y\n"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let o = sdmp(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 2);
}

#[test]
fn ablate_writes_distinct_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("grid");
    let o = sdmp(&[
        "ablate", "--config", &cfg, "--out", out.to_str().unwrap(),
        "--grid", "weight_source=random|static", "--grid", "view_policy=replace|extra",
        "--epochs", "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let index = fs::read_to_string(out.join("ablate.csv")).unwrap();
    let rows: Vec<&str> = index.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 4);
    for r in rows {
        let name = r.split(',').next().unwrap();
        assert!(out.join(name).join("metrics.csv").exists());
    }
}
