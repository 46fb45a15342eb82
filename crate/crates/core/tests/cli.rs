use std::path::Path;
use std::process::{Command, Output};

use mcbeit::checkpoint::load_checkpoint;

// A model small enough for a few-second end-to-end pass.
#[rustfmt::skip]
const TINY: &[&str] = &[
    "--model.layers", "1",
    "--model.dim", "16",
    "--model.heads", "2",
    "--model.vocab", "16",
    "--data.image_size", "16",
    "--data.n_train", "16",
    "--data.n_test", "8",
    "--batch_size", "8",
    "--epochs", "2",
    "--warmup_epochs", "1",
    "--probe.epochs", "5",
    "--finetune.epochs", "1",
    "--finetune.warmup_epochs", "0",
];

fn mcbeit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcbeit"))
        .args(args)
        .env("MCBEIT_OUT", out)
        .output()
        .expect("run mcbeit")
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcbeit(dir.path(), &["tokenizer-fit", "--model.depth", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.depth"));
}

#[test]
fn out_of_range_omega_names_the_range() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcbeit(dir.path(), &["tokenizer-fit", "--target.omega=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("target.omega") && err.contains("range"),
        "{err}"
    );
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny tokenizer\nmodel.vocab = 8\ntokenizer.iters = 2\n",
    )
    .unwrap();
    let mut args = vec!["tokenizer-fit", "--config", cfg.to_str().unwrap()];
    args.extend(TINY);
    args.extend(["--model.vocab", "12"]);
    let o = mcbeit(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = load_checkpoint(&dir.path().join("codebook.ckpt")).unwrap();
    assert!(ck.params.is_none());
    assert_eq!(ck.config.model.vocab, 12);
    assert_eq!(ck.config.tokenizer.iters, 2);
    assert_eq!(ck.require_codebook().unwrap().vocab(), 12);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = mcbeit(out, &with_tiny(&["pretrain", "--checkpoint_every", "1"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "epoch0001.ckpt",
        "epoch0002.ckpt",
        "final.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,lr,loss,target_entropy\n"));
    // 16 images in batches of 8 for 2 epochs
    assert_eq!(metrics.lines().count(), 1 + 4);

    let ckpt = out.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let before = std::fs::read(ckpt).unwrap();
    let o = mcbeit(out, &["probe", "--checkpoint", ckpt, "--run-id", "p1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(ckpt).unwrap(),
        before,
        "probe must not touch the checkpoint"
    );
    let o = mcbeit(out, &["finetune", "--checkpoint", ckpt, "--run-id", "f1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("p1,probe,") && lines[2].starts_with("f1,finetune,"));

    let o = mcbeit(
        out,
        &["inspect-targets", "--checkpoint", ckpt, "--index", "3"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("inspect/img3_affinity.pgm").exists());
    assert!(out.join("inspect/img3_top3.csv").exists());
    let o = mcbeit(
        out,
        &["inspect-targets", "--checkpoint", ckpt, "--index", "999"],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn resume_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(mcbeit(out, &with_tiny(&["pretrain"])).status.success());
    let first = out.join("first.ckpt");
    std::fs::rename(out.join("final.ckpt"), &first).unwrap();
    let mut args = with_tiny(&["pretrain", "--resume", first.to_str().unwrap()]);
    args.extend(["--epochs", "3"]);
    let o = mcbeit(out, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_checkpoint(&out.join("final.ckpt")).unwrap().step, 6);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("4,"));
}

#[test]
fn tau_ablation_adds_the_single_choice_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = with_tiny(&["ablate", "--axis", "tau", "--values", "1,4"]);
    args.extend(["--epochs", "1", "--warmup_epochs", "0"]);
    let o = mcbeit(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablation_tau.csv")).unwrap();
    let values: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(values, ["1", "4", "single"]);
}

#[test]
fn corrupted_checkpoint_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"mcbeit-checkpoint v9\nstep 0\nend\n").unwrap();
    let o = mcbeit(
        dir.path(),
        &["probe", "--checkpoint", bad.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn grad_check_command_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["grad-check", "--precision", "f64", "--samples", "2"];
    args.extend(TINY);
    let o = mcbeit(dir.path(), &args);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.contains("PASS"));
}
