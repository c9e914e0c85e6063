//! End-to-end checks of the `eso` binary: help text, dataset layout, the
//! full stage chain, reports and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use anyhow::{ensure, Result};

const TINY: &str = r#"{
    "seed": 3,
    "phantom": {"dims": [24, 24, 24], "n_objects_range": [3, 5]},
    "patch": {"patch_size": 20, "n_rpn_samples": 60},
    "model": {"features": 4, "rcn_hidden": 8},
    "train": {"backbone": {"iterations": 3}, "rpn_step1": {"iterations": 3}, "rpn_step2": {"iterations": 3},
              "rcn_step1": {"iterations": 3}, "rcn_step2": {"iterations": 3}}
}"#;

fn eso(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eso"))
        .args(args)
        .current_dir(cwd)
        .env("ESO_NUM_THREADS", "1")
        .output()
        .expect("spawn eso")
}

fn ok(args: &[&str], cwd: &Path) -> Result<String> {
    let out = eso(args, cwd);
    ensure!(
        out.status.success(),
        "eso {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    eso(args, cwd).status.code().unwrap_or(-1)
}

fn setup() -> Result<tempfile::TempDir> {
    let dir = tempfile::tempdir()?;
    std::fs::write(dir.path().join("cfg.json"), TINY)?;
    Ok(dir)
}

fn train_chain(d: &Path, upto: usize) -> Result<()> {
    let stages = ["backbone", "rpn_step1", "rpn_step2", "rcn_step1", "rcn_step2"];
    for (i, s) in stages.iter().take(upto).enumerate() {
        let out = format!("ck/{s}");
        let mut args = vec!["train", "--config", "cfg.json", "--data", "data", "--stage", s, "--ckpt-out", &out];
        let prev = (i > 0).then(|| format!("ck/{}", stages[i - 1]));
        if let Some(p) = &prev {
            args.extend(["--ckpt-in", p.as_str()]);
        }
        ok(&args, d)?;
    }
    Ok(())
}

#[test]
fn help_lists_commands_and_defaults() -> Result<()> {
    let d = setup()?;
    let top = ok(&["--help"], d.path())?;
    for c in ["gen", "train", "infer", "eval"] {
        assert!(top.contains(c), "missing {c} in\n{top}");
    }
    let gen = ok(&["gen", "--help"], d.path())?;
    assert!(gen.contains("[default: 24]"), "{gen}");
    let train = ok(&["train", "--help"], d.path())?;
    assert!(train.contains("rcn_step2"), "{train}");
    Ok(())
}

#[test]
fn gen_writes_layout_and_is_reproducible() -> Result<()> {
    let d = setup()?;
    let p = d.path();
    ok(&["gen", "--config", "cfg.json", "--out", "a", "--n-cases", "2"], p)?;
    ok(&["gen", "--config", "cfg.json", "--out", "b", "--n-cases", "2"], p)?;
    ok(&["gen", "--config", "cfg.json", "--out", "c", "--n-cases", "2", "--seed", "4"], p)?;
    for f in ["manifest.json", "case_0/volume.raw", "case_0/seg.raw", "case_0/case.json", "case_1/case.json"] {
        let a = std::fs::read(p.join("a").join(f))?;
        assert_eq!(a, std::fs::read(p.join("b").join(f))?, "{f} differs");
    }
    let a = std::fs::read(p.join("a/case_0/volume.raw"))?;
    assert_eq!(a.len(), 3 * 24 * 24 * 24 * 4);
    assert_ne!(a, std::fs::read(p.join("c/case_0/volume.raw"))?);
    Ok(())
}

#[test]
fn full_chain_infer_and_eval() -> Result<()> {
    let d = setup()?;
    let p = d.path();
    ok(&["gen", "--config", "cfg.json", "--out", "data", "--n-cases", "2"], p)?;
    train_chain(p, 5)?;
    for f in ["params.bin", "model.json", "train_log.csv", "run_config.json"] {
        assert!(p.join("ck/rcn_step2").join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(p.join("ck/rcn_step1/train_log.csv"))?;
    assert_eq!(log.lines().next(), Some("iteration,total,rmse,cls,rater,reg,reg_count,w_reg"));
    assert_eq!(log.lines().count(), 4);

    for case in ["case_0", "case_1"] {
        let out = format!("dets/{case}.json");
        let src = format!("data/{case}");
        ok(&["infer", "--config", "cfg.json", "--ckpt", "ck/rcn_step2", "--case", &src, "--out", &out], p)?;
    }
    let dets: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("dets/case_0.json"))?)?;
    for d in dets.as_array().expect("array") {
        for key in ["centre_mm", "score", "scale_vox", "box_side_mm", "class_probs", "per_rater_probs"] {
            assert!(d.get(key).is_some(), "detection lacks {key}");
        }
        assert_eq!(d["per_rater_probs"].as_array().unwrap().len(), 6);
    }

    let stdout = ok(
        &["eval", "--config", "cfg.json", "--detections", "dets", "--data", "data", "--report", "rep"],
        p,
    )?;
    assert!(stdout.contains("sensitivity"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("rep/report.json"))?)?;
    assert_eq!(report["n_cases"], 2);
    let csv = std::fs::read_to_string(p.join("rep/report.csv"))?;
    assert_eq!(csv.lines().count(), 1 + report["n_gt"].as_u64().unwrap() as usize);

    // an extra detections file that matches no case
    std::fs::copy(p.join("dets/case_0.json"), p.join("dets/case_9.json"))?;
    assert_eq!(code(&["eval", "--detections", "dets", "--data", "data", "--report", "rep2"], p), 6);
    Ok(())
}

#[test]
fn exit_codes() -> Result<()> {
    let d = setup()?;
    let p = d.path();
    std::fs::write(p.join("bad.json"), "{\n  \"seed\": 1,\n  nope\n}")?;
    let out = eso(&["gen", "--config", "bad.json", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    std::fs::write(p.join("unknown.json"), r#"{"phantom": {"dimz": [8, 8, 8]}}"#)?;
    assert_eq!(code(&["gen", "--config", "unknown.json", "--out", "x"], p), 2);

    ok(&["gen", "--config", "cfg.json", "--out", "data", "--n-cases", "1"], p)?;
    // stage after backbone without a checkpoint
    assert_eq!(
        code(&["train", "--config", "cfg.json", "--data", "data", "--stage", "rpn_step1", "--ckpt-out", "o"], p),
        4
    );
    // missing checkpoint directory
    assert_eq!(
        code(&["infer", "--config", "cfg.json", "--ckpt", "nowhere", "--case", "data/case_0", "--out", "o.json"], p),
        3
    );
    train_chain(p, 2)?;
    // skipping rpn_step2
    assert_eq!(
        code(
            &[
                "train", "--config", "cfg.json", "--data", "data", "--stage", "rcn_step1", "--ckpt-in", "ck/rpn_step1",
                "--ckpt-out", "o",
            ],
            p
        ),
        4
    );
    // inference needs a fully trained checkpoint
    assert_eq!(
        code(&["infer", "--config", "cfg.json", "--ckpt", "ck/rpn_step1", "--case", "data/case_0", "--out", "o.json"], p),
        5
    );
    // checkpoint from a different architecture
    std::fs::write(p.join("wide.json"), TINY.replace("\"features\": 4", "\"features\": 5"))?;
    assert_eq!(
        code(
            &[
                "train", "--config", "wide.json", "--data", "data", "--stage", "rpn_step2", "--ckpt-in", "ck/rpn_step1",
                "--ckpt-out", "o",
            ],
            p
        ),
        5
    );
    Ok(())
}
