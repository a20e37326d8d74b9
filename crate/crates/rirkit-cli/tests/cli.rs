//! End-to-end checks of the command-line surface. Every run uses the
//! synthetic dataset so no external files are needed.

use std::path::Path;
use std::process::{Command, Output};

fn rirkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rirkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn train_args<'a>(out_dir: &'a str, kind: &'a str, seed: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--arch",
        "desk-b1-l2",
        "--kind",
        kind,
        "--dataset",
        "synthetic",
        "--subset",
        "100",
        "--test-subset",
        "50",
        "--epochs",
        "1",
        "--batch-size",
        "50",
        "--seed",
        seed,
        "--no-augment",
        "--no-timing",
        "--out",
        out_dir,
    ]
}

#[test]
fn train_writes_metrics_config_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let res = rirkit(&train_args(out_s, "rir", "1"));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for file in ["metrics.csv", "config.json", "final.ckpt", "best.ckpt", "last.ckpt"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# params="));
    assert_eq!(lines.next().unwrap(), "epoch,step,lr,train_loss,train_acc,test_acc,wall_ms");

    // Same config in a second directory: identical metrics bytes.
    let out2 = dir.path().join("run2");
    let res2 = rirkit(&train_args(out2.to_str().unwrap(), "rir", "1"));
    assert!(res2.status.success());
    assert_eq!(csv, std::fs::read_to_string(out2.join("metrics.csv")).unwrap());
}

#[test]
fn eval_reports_the_trained_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = rirkit(&train_args(out.to_str().unwrap(), "rir", "2"));
    assert!(res.status.success());

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let reported = last.split(',').nth(5).unwrap();

    let ckpt = out.join("final.ckpt");
    let res = rirkit(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let line = stdout(&res);
    let acc = line.trim().strip_prefix("test_acc ").unwrap();
    assert_eq!(acc, reported, "eval output {line} vs csv row {last}");
}

#[test]
fn ablate_emits_one_row_per_layer_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = rirkit(&train_args(out.to_str().unwrap(), "rir", "3"));
    assert!(res.status.success());
    let ckpt = out.join("final.ckpt");
    let res = rirkit(&["ablate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer_index,stream,test_acc");
    // desk-b1-l2 has 3 blocks x 2 fused layers: 2*6 + baseline + header.
    assert_eq!(lines.len(), 1 + 1 + 12);
    assert!(lines[1].starts_with("-1,none,"));
}

#[test]
fn ablate_refuses_plain_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = rirkit(&train_args(out.to_str().unwrap(), "cnn", "4"));
    assert!(res.status.success());
    let ckpt = out.join("final.ckpt");
    let res = rirkit(&["ablate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unsupported model"));
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = train_args(out.to_str().unwrap(), "rir", "5");
    args[0] = "sweep";
    args.extend(["--blocks", "1", "--layers-per-block", "1,2"]);
    let res = rirkit(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "blocks,layers_per_block,status,final_test_acc");
    assert_eq!(lines.len(), 3);
}

#[test]
fn verify_passes_clean_and_fails_under_fault_injection() {
    let res = rirkit(&["verify", "--configs", "20"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = stdout(&res);
    assert!(text.contains("all 12 checks passed"), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 12);

    let res = rirkit(&["verify", "--configs", "20", "--inject-fault"]);
    assert!(!res.status.success());
    assert!(stdout(&res).contains("FAIL"));
}

#[test]
fn unknown_names_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let mut args = train_args(out.to_str().unwrap(), "rir", "1");
    args[2] = "not-an-arch";
    let res = rirkit(&args);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown architecture"));
}

#[test]
fn data_path_env_var_is_honored() {
    // Point RIRKIT_DATA at an empty directory: the cifar10 loader must fail
    // mentioning the expected file inside it.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = Command::new(env!("CARGO_BIN_EXE_rirkit"))
        .env("RIRKIT_DATA", dir.path())
        .args([
            "train",
            "--arch",
            "desk-b1-l2",
            "--dataset",
            "cifar10",
            "--epochs",
            "1",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("data_batch_1.bin"), "{err}");
    assert!(err.contains(dir.path().file_name().unwrap().to_str().unwrap()) || err.contains("cannot read"), "{err}");
}

#[test]
fn checkpoint_is_bit_identical_across_reruns_of_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = train_args(out.to_str().unwrap(), "rir", "6");
    assert!(rirkit(&args).status.success());
    let first = std::fs::read(out.join("final.ckpt")).unwrap();
    assert!(rirkit(&args).status.success());
    let second = std::fs::read(out.join("final.ckpt")).unwrap();
    assert_eq!(first, second);
    assert!(first.starts_with(b"RIR1"));
}

#[test]
fn help_lists_all_subcommands() {
    let res = rirkit(&["--help"]);
    assert!(res.status.success());
    let text = stdout(&res);
    for sub in ["train", "eval", "ablate", "sweep", "verify"] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
    let _ = Path::new("unused");
}
