//! End-to-end runs of the `mba` binary: outputs and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use mba_core::pilot::ActivationPattern;

const TINY: &str = "seed = 3\nn_subcarriers = 4\nn_train = 16\nn_val = 8\nn_test = 8\n\
                    epochs_can = 1\nepochs_cmn = 1\nwidth = 4\nattn_width = 2\n\
                    mc_draws = 4000\nrandom_designs = 100\n";

fn mba(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mba"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        format!("{TINY}output_dir = {}\n{extra}", dir.join("out").display()),
    )
    .unwrap();
    path.display().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn unreadable_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = mba(dir.path(), &["design-psi", "--config", "missing.cfg"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("noseed.cfg"), "n_t = 4\n").unwrap();
    assert_eq!(code(&mba(dir.path(), &["design-psi", "--config", "noseed.cfg"])), 1);

    let cfg = write_config(dir.path(), "");
    assert_eq!(
        code(&mba(dir.path(), &["design-psi", "--config", &cfg, "--set", "b=40"])),
        1
    );
    assert_eq!(
        code(&mba(
            dir.path(),
            &["design-psi", "--config", &cfg, "--set", "no_such_key=1"]
        )),
        1
    );
}

#[test]
fn design_psi_writes_pattern_and_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = mba(dir.path(), &["design-psi", "--config", &cfg, "--set", "b=12"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/pattern.txt")).unwrap();
    let pattern = ActivationPattern::from_text(&text).unwrap();
    assert_eq!(pattern.b(), 12);
    let psi = std::fs::read_to_string(dir.path().join("out/psi.txt")).unwrap();
    // header plus one line per training slot
    assert_eq!(psi.lines().count(), 1 + 12);
    assert!(String::from_utf8_lossy(&out.stdout).contains("J_LS"));
}

#[test]
fn train_then_eval_and_verify_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");

    // no checkpoint yet: a config problem (train first), not an I/O one
    let missing = mba(dir.path(), &["eval", "--config", &cfg]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    let trained = mba(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(code(&trained), 0, "{}", String::from_utf8_lossy(&trained.stderr));
    assert!(dir.path().join("out/model.irsw").is_file());
    let loss = std::fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2);

    let eval = mba(dir.path(), &["eval", "--config", &cfg]);
    assert_eq!(code(&eval), 0);
    let stdout = String::from_utf8_lossy(&eval.stdout);
    let values: Vec<f64> = stdout
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(values.len(), 7);
    assert!(values.iter().all(|v| v.is_finite()));

    let ck = dir.path().join("out/model.irsw").display().to_string();
    let verify = mba(
        dir.path(),
        &["verify", "--config", &cfg, "--set", &format!("checkpoint={ck}")],
    );
    assert_eq!(code(&verify), 0, "{}", String::from_utf8_lossy(&verify.stdout));
    assert!(String::from_utf8_lossy(&verify.stdout)
        .lines()
        .all(|l| l.starts_with("PASS")));
}

#[test]
fn failed_check_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // two Monte-Carlo draws cannot match the trace formula to 3%
    let cfg = write_config(dir.path(), "");
    let out = mba(dir.path(), &["verify", "--config", &cfg, "--set", "mc_draws=2"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn generate_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = mba(dir.path(), &["generate", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let irst = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "irst"))
        .count();
    assert!(irst >= 3, "{irst} .irst files");
}
