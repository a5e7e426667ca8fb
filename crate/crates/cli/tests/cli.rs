//! End-to-end tests driving the compiled binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dtkd")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("dtkd_cli_tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    let base = format!(
        "dataset = synthetic\nimage_side = 8\nnum_classes = 4\n\
         per_class_train = 12\nper_class_val = 8\n\
         source_classes = 0,1\ntarget_classes = 2,3\n\
         batch_size = 8\nmax_epochs = 2\nseeds = 0\n\
         out_dir = {}\n{extra}",
        dir.join("runs").display()
    );
    fs::write(&path, base).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

#[test]
fn finetune_alpha_zero_matches_tl_run() {
    let dir = tmp("alpha_zero");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();

    // teacher trained directly on the target group
    let teacher_dir = run_ok(&[
        "finetune", "--config", cfg_s, "--arch", "teacher", "--run-name", "teach",
    ]);
    let teacher_ckpt = Path::new(&teacher_dir).join("0").join("best.dtkd");
    assert!(teacher_ckpt.exists());

    let tl_dir = run_ok(&["finetune", "--config", cfg_s, "--run-name", "tl"]);
    let kd_dir = run_ok(&[
        "finetune", "--config", cfg_s, "--run-name", "kd",
        "--teacher", teacher_ckpt.to_str().unwrap(), "--alpha", "0",
    ]);

    let h_tl = fs::read(Path::new(&tl_dir).join("0/history.csv")).unwrap();
    let h_kd = fs::read(Path::new(&kd_dir).join("0/history.csv")).unwrap();
    assert_eq!(h_tl, h_kd, "alpha=0 history must match the TL-only run");
    let m_tl = fs::read(Path::new(&tl_dir).join("0/best.dtkd")).unwrap();
    let m_kd = fs::read(Path::new(&kd_dir).join("0/best.dtkd")).unwrap();
    assert_eq!(m_tl, m_kd, "alpha=0 weights must match the TL-only run");
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tmp("idempotent");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();
    let out1 = run_ok(&["finetune", "--config", cfg_s]);
    let files = ["0/history.csv", "0/best.dtkd", "0/metrics.json", "manifest.json"];
    let first: Vec<Vec<u8>> = files
        .iter()
        .map(|f| fs::read(Path::new(&out1).join(f)).unwrap())
        .collect();
    let out2 = run_ok(&["finetune", "--config", cfg_s]);
    assert_eq!(out1, out2);
    for (f, before) in files.iter().zip(&first) {
        let after = fs::read(Path::new(&out2).join(f)).unwrap();
        assert_eq!(&after, before, "{f} changed between identical runs");
    }
}

#[test]
fn pretrain_then_finetune_with_frozen_backbone() {
    let dir = tmp("pretrain_finetune");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();
    let pre = run_ok(&["pretrain", "--config", cfg_s, "--arch", "student"]);
    let ckpt = Path::new(&pre).join("0/best.dtkd");
    assert!(ckpt.exists());
    let fin = run_ok(&[
        "finetune", "--config", cfg_s, "--init", ckpt.to_str().unwrap(),
        "--run-name", "ft",
    ]);
    assert!(Path::new(&fin).join("0/metrics.json").exists());
}

#[test]
fn evaluate_two_runs() {
    let dir = tmp("evaluate");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();
    let a = run_ok(&["finetune", "--config", cfg_s, "--run-name", "a"]);
    let b = run_ok(&["finetune", "--config", cfg_s, "--run-name", "b", "--seed", "0"]);
    let out = run_ok(&["evaluate", "--config", cfg_s, "--run-a", &a, "--run-b", &b]);
    let tp = fs::read_to_string(Path::new(&out).join("0/tp_change.csv")).unwrap();
    assert!(tp.starts_with("class,tp_before,tp_after,delta,pct_of_headroom"));
    assert!(Path::new(&out).join("0/metrics.json").exists());
}

#[test]
fn attribute_and_gradcheck() {
    let dir = tmp("attribute");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();
    let a = run_ok(&["finetune", "--config", cfg_s]);
    let ckpt = Path::new(&a).join("0/best.dtkd");
    let out = run_ok(&[
        "attribute", "--config", cfg_s, "--checkpoint", ckpt.to_str().unwrap(),
        "--grid", "2x2", "--sample", "1",
    ]);
    let text = fs::read_to_string(Path::new(&out).join("attribution_1.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json["shapley"].as_array().unwrap().len() == 2); // two target classes
    assert!(Path::new(&out).join("sample_1.ppm").exists());

    let report = run_ok(&["gradcheck", "--configs", "10", "--seed", "3"]);
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(json["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn corrupt_preview_writes_ppms() {
    let dir = tmp("preview");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();
    let out = run_ok(&[
        "corrupt-preview", "--config", cfg_s, "--corruption", "quarter_black",
        "--count", "2",
    ]);
    for f in ["0_before.ppm", "0_after.ppm", "1_before.ppm", "1_after.ppm"] {
        let bytes = fs::read(Path::new(&out).join(f)).unwrap();
        assert!(bytes.starts_with(b"P6"));
    }
    let before = fs::read(Path::new(&out).join("0_before.ppm")).unwrap();
    let after = fs::read(Path::new(&out).join("0_after.ppm")).unwrap();
    assert_ne!(before, after);
}

#[test]
fn sweep_emits_csv_and_svgs() {
    let dir = tmp("sweep");
    let cfg = write_config(&dir, "max_epochs = 1\n");
    let cfg_s = cfg.to_str().unwrap();
    let out = run_ok(&[
        "sweep", "--config", cfg_s, "--param", "label_noise_fraction",
        "--values", "0,0.5",
    ]);
    let csv = fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    assert!(csv.starts_with("param,value,seed,tl_acc,kd_acc,improvement"));
    assert_eq!(csv.lines().count(), 1 + 2); // header + 2 values x 1 seed
    assert!(Path::new(&out).join("accuracy.svg").exists());
    assert!(Path::new(&out).join("improvement.svg").exists());
}

#[test]
fn plot_subcommand_renders_history() {
    let dir = tmp("plot");
    let cfg = write_config(&dir, "");
    let cfg_s = cfg.to_str().unwrap();
    let a = run_ok(&["finetune", "--config", cfg_s]);
    let hist = Path::new(&a).join("0/history.csv");
    let svg_path = dir.join("out.svg");
    run_ok(&[
        "plot", "--history", hist.to_str().unwrap(), "--out", svg_path.to_str().unwrap(),
    ]);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.contains("<polyline"));
    assert!(svg.contains("val_acc"));
}

#[test]
fn errors_are_machine_readable() {
    let dir = tmp("errors");
    let bad_cfg = dir.join("bad.cfg");
    fs::write(&bad_cfg, "not_a_key = 1\n").unwrap();
    let out = run(&["finetune", "--config", bad_cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let json: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(json["error"]["kind"], "Config");
    assert!(json["error"]["message"]
        .as_str()
        .unwrap()
        .contains("unknown key"));
}
