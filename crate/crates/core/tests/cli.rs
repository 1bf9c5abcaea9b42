//! End-to-end runs of the `mmwfm` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmwfm(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmwfm"));
    cmd.args(args);
    match env_out {
        Some(p) => cmd.env("MMWFM_OUT", p),
        None => cmd.env_remove("MMWFM_OUT"),
    };
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mmwfm(args, None);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_on_tiny_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let pre = root.join("pre");

    ok(&["gen-data", "--tiny", "--count", "16", "--task-count", "24", "--seed", "3", "--out", s(&data)]);
    for dir in ["pretrain/image", "pretrain/iq", "tasks/fingerprint/train", "tasks/position/test"] {
        assert!(data.join(dir).join("manifest.txt").exists(), "{dir}");
        assert!(data.join(dir).join("stats.txt").exists(), "{dir}");
    }
    let manifest = fs::read_to_string(data.join("pretrain/iq/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 16);

    // Same seed, same files.
    let again = root.join("again");
    ok(&["gen-data", "--tiny", "--count", "16", "--task-count", "24", "--seed", "3", "--out", s(&again)]);
    for f in ["pretrain/image/image_00007.f32", "tasks/fingerprint/test/iq_00011.f32", "config.txt"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let log = ok(&[
        "pretrain",
        "--tiny",
        "--data",
        s(&data),
        "--epochs",
        "3",
        "--warmup",
        "1",
        "--batch-size",
        "4",
        "--out",
        s(&pre),
    ]);
    assert!(log.contains("combined="));
    let ckpt = pre.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(pre.join("loss.txt")).unwrap().lines().count(), 3 * 4);
    let snapshot = fs::read_to_string(pre.join("config.txt")).unwrap();
    assert!(snapshot.contains("train.mask_ratio_iq = 0.7"));
    assert!(snapshot.contains("model.enc_dim = 64"));

    // Re-running from the snapshot reproduces the checkpoint.
    let rerun = root.join("rerun");
    ok(&["pretrain", "--config", s(&pre.join("config.txt")), "--out", s(&rerun)]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(rerun.join("checkpoint.bin")).unwrap());

    let fp = data.join("tasks/fingerprint");
    for (regime, extra) in [("lp", vec![]), ("ft", vec!["--k", "1"]), ("lora", vec!["--rank", "4", "--alpha", "4"])] {
        let out = root.join(format!("ft_{regime}"));
        let mut args =
            vec!["finetune", "--checkpoint", s(&ckpt), "--data", s(&fp), "--regime", regime, "--epochs", "2"];
        args.extend(extra);
        args.extend(["--out", s(&out)]);
        let text = ok(&args);
        assert!(text.contains("metric=mean_per_class_accuracy"), "{text}");
        assert!(out.join("adapter.bin").exists());
        let eval = ok(&[
            "evaluate",
            "--checkpoint",
            s(&ckpt),
            "--adapter",
            s(&out.join("adapter.bin")),
            "--data",
            s(&fp.join("test")),
            "--out",
            s(&root.join("eval")),
        ]);
        // Evaluating the saved adapter reproduces the fine-tuning metric.
        let last = fs::read_to_string(out.join("metrics.txt")).unwrap().lines().last().unwrap().to_string();
        assert_eq!(eval.trim(), last);
    }

    let pos = ok(&[
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data.join("tasks/position")),
        "--regime",
        "lp",
        "--epochs",
        "1",
        "--out",
        s(&root.join("ft_pos")),
    ]);
    assert!(pos.contains("metric=mean_localization_error"), "{pos}");

    let figs = root.join("figs");
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data.join("pretrain/image")),
        "--index",
        "2",
        "--ratios",
        "0,0.5,0.7,0.85",
        "--out",
        s(&figs),
    ]);
    ok(&[
        "reconstruct",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data.join("pretrain/iq")),
        "--index",
        "1",
        "--out",
        s(&figs),
    ]);
    let mut names: Vec<String> = fs::read_dir(&figs)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "recon_image_00002_r000.pgm",
            "recon_image_00002_r050.pgm",
            "recon_image_00002_r070.pgm",
            "recon_image_00002_r085.pgm",
            "recon_iq_00001_r050.pgm",
            "recon_iq_00001_r070.pgm",
            "recon_iq_00001_r085.pgm",
        ]
    );
    let pgm = fs::read(figs.join("recon_image_00002_r070.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n56 16\n255\n"), "three 16-pixel panes and two gutters");

    let json = ok(&["inspect", "--checkpoint", s(&ckpt), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["config"]["model.enc_dim"], "64");
    assert!(v["params"].as_array().unwrap().iter().any(|r| r["scope"] == "encoder.block"));
}

#[test]
fn inspect_default_model_matches_reference_counts() {
    let out = ok(&["inspect", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let count = |scope: &str| {
        v["params"].as_array().unwrap().iter().find(|r| r["scope"] == scope).unwrap()["params"].as_u64().unwrap()
    };
    assert_eq!(count("encoder"), 6_318_592);
    assert_eq!(count("decoder"), 793_344);
    assert_eq!(count("encoder.block"), 789_760);
    let table = ok(&["inspect"]);
    assert!(table.contains("789760"));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| mmwfm(args, Some(tmp.path())).status.code().unwrap();
    // Usage: unknown verb, bad regime, missing required path.
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["finetune", "--regime", "bogus"]), 2);
    assert_eq!(code(&["pretrain"]), 2);
    // I/O: dataset directory does not exist.
    assert_eq!(code(&["pretrain", "--data", s(&tmp.path().join("missing"))]), 3);
    // I/O: corrupt checkpoint.
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"MMWFM garbage").unwrap();
    assert_eq!(code(&["inspect", "--checkpoint", s(&bad)]), 3);
    // Validation: impossible model shape.
    assert_eq!(code(&["inspect", "--set", "model.patch=10"]), 4);
    assert_eq!(code(&["gen-data", "--count", "0"]), 4);
    // The environment variable picks the default output root.
    assert_eq!(code(&["gen-data", "--tiny", "--count", "2", "--task-count", "2"]), 0);
    assert!(tmp.path().join("gen-data").join("config.txt").exists());
}
