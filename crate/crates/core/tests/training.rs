mod common;

use std::fs;

use common::{data, tiny};
use sdmp::checkpoint::read_checkpoint;
use sdmp::mixing::compute_lambda_c;
use sdmp::trainer::{run_training, steps_per_epoch, RunOptions};

fn opts(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn sixty_four_samples_at_batch_sixteen_is_four_steps() {
    assert_eq!(steps_per_epoch(64, 16), 4);
    assert_eq!(steps_per_epoch(70, 16), 4);
    let cfg = tiny("epochs = 1");
    let (train, test) = data(&cfg);
    assert_eq!(train.len(), 64);
    let out = run_training(&cfg, &train, &test, &RunOptions::default()).unwrap();
    assert_eq!(out.state.step, 4);
    assert_eq!(out.steps.len(), 4);
}

#[test]
fn loss_decreases_over_two_hundred_steps() {
    for framework in ["contrastive", "distillation"] {
        let cfg = tiny(&format!("framework = {framework}\nepochs = 50\nwarmup_epochs = 2\naugment = false"));
        let (train, test) = data(&cfg);
        let out = run_training(&cfg, &train, &test, &RunOptions::default()).unwrap();
        assert_eq!(out.steps.len(), 200);
        let mean = |s: &[sdmp::trainer::StepRecord]| s.iter().map(|r| r.report.loss).sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&out.steps[..20]), mean(&out.steps[180..]));
        assert!(last < first, "{framework}: {first} -> {last}");
    }
}

#[test]
fn metrics_have_one_row_per_epoch_and_are_reproducible() {
    let cfg = tiny("epochs = 3\nknn_every = 1\nknn_k = 5");
    let (train, test) = data(&cfg);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_training(&cfg, &train, &test, &opts(a.path())).unwrap();
    run_training(&cfg, &train, &test, &opts(b.path())).unwrap();
    let ma = fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
    assert_eq!(fs::read(a.path().join("ep3.ckpt")).unwrap(), fs::read(b.path().join("ep3.ckpt")).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run_bit_for_bit() {
    for extra in ["framework = contrastive", "framework = distillation\nbackbone = cnn\ncnn_channels = 4,4,4,4\nn_local_views = 2\npatch_min = 0.25"] {
        let cfg = tiny(extra);
        let (train, test) = data(&cfg);
        let full = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let straight = run_training(&cfg, &train, &test, &opts(full.path())).unwrap();
        let mut first = opts(split.path());
        first.stop_after_epochs = Some(1);
        run_training(&cfg, &train, &test, &first).unwrap();
        let mut second = opts(split.path());
        second.resume_from = Some(split.path().join("ep1.ckpt"));
        let resumed = run_training(&cfg, &train, &test, &second).unwrap();

        assert_eq!(straight.state.student.tensors(), resumed.state.student.tensors());
        assert_eq!(straight.state.loss_history, resumed.state.loss_history);
        assert_eq!(
            fs::read(full.path().join("metrics.csv")).unwrap(),
            fs::read(split.path().join("metrics.csv")).unwrap()
        );
        assert_eq!(
            fs::read(full.path().join("ep2.ckpt")).unwrap(),
            fs::read(split.path().join("ep2.ckpt")).unwrap()
        );
    }
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny("");
    let (train, test) = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut o = opts(dir.path());
    o.stop_after_epochs = Some(1);
    run_training(&cfg, &train, &test, &o).unwrap();
    let other = tiny("tau = 0.3");
    let mut o = opts(dir.path());
    o.resume_from = Some(dir.path().join("ep1.ckpt"));
    assert!(run_training(&other, &train, &test, &o).is_err());
}

#[test]
fn frozen_teacher_is_never_optimized() {
    let cfg = tiny("momentum = 1.0");
    let (train, test) = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&cfg, &train, &test, &opts(dir.path())).unwrap();
    let init = sdmp::model::init_params(cfg.seed, &cfg.topology());
    assert_eq!(out.state.teacher.params.tensors(), init.tensors());
    assert_ne!(out.state.student.tensors(), init.tensors());
    let ck = read_checkpoint(&dir.path().join("ep2.ckpt")).unwrap();
    assert_eq!(ck.group("teacher").tensors(), init.tensors());
    assert_eq!(ck.manifest.config_hash, cfg.hash());
}

#[test]
fn recorded_coefficients_obey_mixing_invariants() {
    for extra in ["strategies = mixup", "strategies = cutmix", "strategies = resizemix", "lambda_mode = per_batch"] {
        let cfg = tiny(extra);
        let (train, test) = data(&cfg);
        let out = run_training(&cfg, &train, &test, &RunOptions::default()).unwrap();
        for rec in &out.steps {
            let r = &rec.report;
            assert_eq!(r.lambdas.len(), cfg.batch_size);
            assert!(r.lambdas.iter().all(|l| (0.0..=1.0).contains(l)));
            let n = r.lambdas.len();
            let pair: Vec<usize> = (0..n).map(|i| n - 1 - i).collect();
            assert_eq!(r.lambda_c, compute_lambda_c(&r.lambdas, &pair).values);
            for i in 0..n {
                assert_eq!(r.lambda_c[i], r.lambda_c[n - 1 - i]);
            }
            if extra == "lambda_mode = per_batch" {
                assert!(r.lambdas.iter().all(|&l| l == r.lambdas[0]));
            }
        }
    }
}
