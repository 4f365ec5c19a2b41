//! End-to-end checks of the binary: artifact layout and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_outlier-lab"))
}

fn tiny_config(extra: &str) -> String {
    format!(
        r#"
seed = 1

[model]
n_layers = 1
hidden = 16
n_heads = 2
vocab_size = 128
max_seq_len = 16

[train]
max_steps = 12
warmup_steps = 3
batch_size = 4

[data]
synth_bytes = 20000
val_frac = 0.2

[quant]
calib_batches = 4
calib_batch_size = 4

[eval]
n_samples = 4
{extra}
"#
    )
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn pretrain_then_eval_produces_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, tiny_config("lengths = [8, 16]")).unwrap();
    let pre_out = dir.path().join("pre");

    let output = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&pre_out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    assert!(pre_out.join("model.ckpt").exists());
    assert!(pre_out.join("metrics.csv").exists());
    assert!(pre_out.join("config.resolved.toml").exists());
    assert!(pre_out.join("run.json").exists());

    let eval_out = dir.path().join("eval");
    let output = bin()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--checkpoint")
        .arg(pre_out.join("model.ckpt"))
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    assert!(eval_out.join("eval_report.json").exists());
    assert!(eval_out.join("sweep.csv").exists());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, tiny_config("")).unwrap();
    let out = dir.path().join("out");

    let output = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let snapshot = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("seed = 9"), "{snapshot}");
}

#[test]
fn a_config_error_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "not_a_real_key = true").unwrap();

    let output = bin().args(["pretrain", "--config"]).arg(&config).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("not_a_real_key"));
}

#[test]
fn a_missing_config_file_exits_with_code_4() {
    let output = bin()
        .args(["pretrain", "--config", "/no/such/file.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    // An absurd learning rate explodes the parameters: layer norm keeps the
    // forward pass finite for a while, so give the blow-up room to overflow.
    let text = tiny_config("").replace("max_steps = 12", "max_steps = 30\npeak_lr = 1e12");
    std::fs::write(&config, text).unwrap();

    let output = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{}", stderr_of(&output));
    assert!(stderr_of(&output).contains("diverged"));
}

#[test]
fn sweep_combines_cells_and_survives_a_bad_one() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, tiny_config("")).unwrap();
    let bad = dir.path().join("broken.toml");
    std::fs::write(&bad, "[[[").unwrap();
    let out = dir.path().join("sweep");

    let output = bin()
        .arg("sweep")
        .arg(&good)
        .arg(&bad)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));

    let csv = std::fs::read_to_string(out.join("sweep_cells.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,pretrain_len,fp_ppl,max_inf_norm,avg_kurtosis,quant_ppl");
    assert_eq!(lines.len(), 3, "header plus one row per cell");
    assert!(lines[1].starts_with("vanilla,16,"));
    assert!(lines[2].starts_with("broken,0,"));
}

#[test]
fn gen_corpus_writes_deterministic_text() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for path in [&a, &b] {
        let output = bin()
            .args(["gen-corpus", "--seed", "3", "--bytes", "10000", "--out"])
            .arg(path)
            .output()
            .unwrap();
        assert!(output.status.success(), "{}", stderr_of(&output));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.len() >= 10_000);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(!Path::new("runs").exists(), "gen-corpus must not create run dirs");
}
