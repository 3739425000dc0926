use std::path::Path;
use std::process::{Command, Output};

fn dmae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmae"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("DMAE_CONFIG")
        .env_remove("DMAE_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const SMALL: [&str; 14] = [
    "--set",
    "patch.t_long=48",
    "--set",
    "patch.embed_dim=8",
    "--set",
    "mae.encoder_layers=1",
    "--set",
    "pretrain.epochs=1",
    "--set",
    "forecast.epochs=1",
    "--set",
    "forecast.train_stride=8",
    "--set",
    "forecaster.hidden=8",
];

#[test]
fn synth_then_run_eval_and_report_from_the_generated_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmae(
        &[
            "synth",
            "--out",
            "data",
            "--preset",
            "mirage",
            "--n-nodes",
            "4",
            "--n-steps",
            "1152",
            "--daily-period",
            "96",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["dataset.bin", "manifest.csv", "spec.json", "experiment.toml"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }

    let mut args = vec![
        "run",
        "-c",
        "data/experiment.toml",
        "--output-dir",
        "run",
        "--precision",
        "f32",
    ];
    args.extend(SMALL);
    let o = dmae(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("validation MAE change vs baseline"));
    assert!(dir.path().join("run/run_report.json").exists());

    let o = dmae(&["eval", "-c", "run/config.toml", "--split", "train"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("warning"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/eval_train.json")).unwrap()).unwrap();
    assert_eq!(json["train_split"], serde_json::Value::Bool(true));

    let o = dmae(&["report", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(dir.path().join("run/report/recon_spatial.csv").exists());
}

#[test]
fn output_root_resolves_relative_directories() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let mut args = vec!["pretrain", "--ablation", "t-only", "--output-dir", "rel"];
    args.extend(SMALL);
    args.extend([
        "--set",
        "data.n_nodes=4",
        "--set",
        "data.n_steps=1152",
        "--set",
        "data.daily_period=96",
    ]);
    let o = Command::new(env!("CARGO_BIN_EXE_dmae"))
        .args(&args)
        .current_dir(dir.path())
        .env("DMAE_OUTPUT_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(root.join("rel/pretrain/temporal.ckpt").exists());
    assert!(!root.join("rel/pretrain/spatial.ckpt").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmae(&["pretrain", "--mask-ratio", "1.5"], dir.path());
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("mask_ratio"));

    let o = dmae(&["train", "--ablation", "sideways"], dir.path());
    assert_eq!(code(&o), 2, "{}", text(&o));

    let o = dmae(&["run", "-c", "missing.toml"], dir.path());
    assert_eq!(code(&o), 2, "{}", text(&o));

    let o = dmae(&["frobnicate"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "[data]\nsource = \"file\"\npath = \"absent.bin\"\nformat = \"binary\"\nn_nodes = 3\nchannels = 1\n",
    )
    .unwrap();
    let o = dmae(
        &["train", "-c", "bad.toml", "--ablation", "none", "--output-dir", "out"],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", text(&o));

    let o = dmae(&["report", "nowhere"], dir.path());
    assert_eq!(code(&o), 3, "{}", text(&o));
}
