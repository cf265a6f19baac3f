use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[data]\ngrid_xy = 32\nn_chest = 2\nn_abdomen = 2\nn_heldout = 1\n";

fn scope(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scope")).current_dir(dir).env("SCOPE_THREADS", "1").args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.ini"), config).unwrap();
    dir
}

#[test]
fn extend_before_training_names_the_missing_step() {
    let dir = setup(&format!("{SMALL}[vae]\nsteps = 2\nbatch = 2\n"));
    let o = scope(dir.path(), &["extend", "--config", "run.ini", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("train-vae"), "{}", stderr(&o));
    for step in ["gen-data", "preprocess", "train-vae"] {
        assert_eq!(scope(dir.path(), &[step, "--config", "run.ini", "--out", "o"]).status.code(), Some(0));
    }
    let o = scope(dir.path(), &["extend", "--config", "run.ini", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("train-ldm"), "{}", stderr(&o));
}

#[test]
fn rerun_is_idempotent_but_changed_outputs_need_force() {
    let dir = setup(SMALL);
    let args = ["gen-data", "--config", "run.ini", "--out", "o"];
    assert_eq!(scope(dir.path(), &args).status.code(), Some(0));
    let manifest = fs::read(dir.path().join("o/data/manifest.csv")).unwrap();
    assert_eq!(scope(dir.path(), &args).status.code(), Some(0));

    let o = scope(dir.path(), &["gen-data", "--config", "run.ini", "--out", "o", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("o/data/manifest.csv")).unwrap(), manifest);

    let o = scope(dir.path(), &["gen-data", "--config", "run.ini", "--out", "o", "--seed", "9", "--force"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_ne!(fs::read(dir.path().join("o/data/manifest.csv")).unwrap(), manifest);
    assert!(!dir.path().join("o/.scope.lock").exists());
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = setup(SMALL);
    fs::create_dir_all(dir.path().join("o")).unwrap();
    fs::write(dir.path().join("o/.scope.lock"), "123").unwrap();
    let o = scope(dir.path(), &["gen-data", "--config", "run.ini", "--out", "o"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("lock"), "{}", stderr(&o));
    assert!(!dir.path().join("o/data").exists());
}

#[test]
fn config_errors_cite_key_and_line() {
    let dir = setup("[data]\nseed = 1\n\n[vae]\nlatent_dim = 30\n");
    let o = scope(dir.path(), &["gen-data", "--config", "run.ini"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("vae.latent_dim") && e.contains("line 5"), "{e}");

    let dir = setup("[data]\nbogus = 1\n");
    let o = scope(dir.path(), &["gen-data", "--config", "run.ini"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.bogus") && stderr(&o).contains("line 2"));
}

#[test]
fn bridge_violation_is_a_config_error() {
    let dir = setup("[data]\nchest_window = 0, 60\nabdomen_window = 120, 192\n");
    let o = scope(dir.path(), &["gen-data", "--config", "run.ini", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
