use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cadc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadc")).args(args).output().expect("run cadc")
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

/// A small experiment: 2 tiny convs, 60 training samples, 2 epochs.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    std::fs::write(
        dir.join("net.toml"),
        r#"
        name = "tiny"
        input = [1, 8, 8]
        [[layers]]
        kind = "conv"
        c_out = 4
        kernel = [3, 3]
        padding = 1
        [[layers]]
        kind = "conv"
        c_out = 4
        kernel = [3, 3]
        padding = 1
        [[layers]]
        kind = "avgpool"
        size = 4
        [[layers]]
        kind = "dense"
        out = 10
        "#,
    )
    .unwrap();
    let cfg = dir.join("exp.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
            netspec = "net.toml"
            crossbar_sizes = [16, 32, 64]
            dendrite_fns = ["relu", "tanh"]
            calibration_samples = 8
            out_dir = "out"
            {extra}
            [dataset]
            samples = 60
            eval_samples = 20
            [train]
            epochs = 2
            [noise]
            std_grid = [0.0, 0.56]
            adc_bits = [3, 4]
            seeds = [0, 1]
            "#
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn partition_report_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = cadc(&["partition-report", "--config", cfg.to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&dir.path().join("out/partition-report.json"));
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    // conv2: D = 36 -> S = 3, 2, 1 for N = 16, 32, 64
    let s: Vec<u64> = rows.iter().filter(|r| r["layer"] == "conv2").map(|r| r["s_count"].as_u64().unwrap()).collect();
    assert_eq!(s, [3, 2, 1]);
    let csv = std::fs::read_to_string(dir.path().join("out/partition-report.csv")).unwrap();
    assert!(csv.starts_with("crossbar_size,layer,c_in,k1,k2,c_out,unrolled_dim,s_count,"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn cost_report_reproduces_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("resnet18_cost.toml");
    let out = cadc(&["cost-report", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&dir.path().join("cost-report.json"));
    let r = &json["reports"][0]["reductions"];
    let acc = r["accumulation_energy_pct"].as_f64().unwrap();
    let bt = r["buffer_transfer_energy_pct"].as_f64().unwrap();
    assert!((acc - 47.9).abs() <= 1.0, "{acc}");
    assert!((bt - 29.3).abs() <= 1.0, "{bt}");
}

#[test]
fn inference_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "quantized = true");
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = cadc(&["infer", "--config", cfg, "--seed", "4", "--out-dir", d.to_str().unwrap(), "--format", "csv"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["infer.json", "infer.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let json = read_json(&a.join("infer.json"));
    assert_eq!(json["samples"], 20);
    assert_eq!(json["layers"][1]["psum_count"], json["layers"][1]["psums_observed"]);
}

#[test]
fn train_then_infer_with_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = cadc(&["train-toy", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&dir.path().join("out/train-toy.json"));
    assert_eq!(json["history"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("out/weights/conv1.weight.cadc").exists());

    let cfg2 = tiny_config(dir.path(), "weights = \"out/weights\"");
    let out = cadc(&["infer", "--config", cfg2.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::remove_file(dir.path().join("out/weights/dense1.bias.cadc")).unwrap();
    let out = cadc(&["infer", "--config", cfg2.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["error"]["kind"], "config");
}

#[test]
fn sweep_and_noise_sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = cadc(&["sweep", "--config", cfg.to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let out = cadc(&["noise-sweep", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&dir.path().join("out/noise-sweep.json"));
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r["noise_std"] == 0.0) {
        assert_eq!(r["accuracy_mean"], r["noiseless_accuracy"]);
    }
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let out = cadc(&["infer", "--config", "/definitely/missing.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "config");

    let out = cadc(&["infer"]);
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["error"]["kind"], "config");

    let out = cadc(&["frobnicate"]);
    assert!(!out.status.success());
    assert_eq!(stderr_error(&out)["error"]["kind"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    std::fs::write(dir.path().join("net.toml"), "input = [1, 8, 8]\n[[layers]]\nkind = \"conv\"\nc_out = 2\nkernel = [3, 3]\nadc_bits = 9\n").unwrap();
    let out = cadc(&["partition-report", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("adc_bits"));

    let out = cadc(&["--help"]);
    assert!(out.status.success());
}
