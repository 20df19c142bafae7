use std::path::Path;
use std::process::{Command, Output};

fn causalpix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_causalpix"))
        .args(args)
        .current_dir(dir)
        .env_remove("CAUSALPIX_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
    "model": {
        "layers_per_block": 1, "n_filters": 4, "n_mixtures": 2, "dropout_rate": 0.5,
        "use_downsampling": true, "use_shortcuts": true, "n_classes": null, "small_field": null
    },
    "data": {"kind": "synthetic", "n": 12, "side": 8, "seed": 3},
    "downscale": 1, "n_train": 8, "n_eval": 4,
    "steps": 2, "batch_size": 4, "eval_every": 1, "wall_clock": false,
    "out_dir": "out"
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn version_prints_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalpix(&["version"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("causalpix "));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalpix(&["train", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(causalpix(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(causalpix(&[], dir.path()).status.code(), Some(2));
}

#[test]
fn unknown_ablation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalpix(&["ablate", "no_such_thing", "--steps", "0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_dropout"));
}

#[test]
fn zero_steps_writes_checkpoint_and_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalpix(&["train", "--steps", "0", "--out", "zero"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("zero/metrics.csv")).unwrap();
    assert_eq!(csv, "step,train_bpd,eval_bpd,seconds\n");
    assert!(dir.path().join("zero/checkpoint.cpix").is_file());
}

#[test]
fn ablate_tags_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = causalpix(&["ablate", "no_dropout", "--config", &cfg, "--steps", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,train_bpd,eval_bpd,seconds,ablation"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with(",no_dropout")));
}

#[test]
fn training_is_byte_reproducible_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = causalpix(&["train", "--config", &cfg, "--out", out], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["metrics.csv", "checkpoint.cpix"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let o = causalpix(&["eval", "--checkpoint", "a/checkpoint.cpix"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("eval_bpd "));
}

#[test]
fn seed_env_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_causalpix"))
        .args(["train", "--config", &cfg, "--steps", "0"])
        .current_dir(dir.path())
        .env("CAUSALPIX_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(dir.path().join("out/run.json")).unwrap();
    assert!(resolved.contains("\"seed\": 77"), "{resolved}");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"batch_size": 0}"#).unwrap();
    let o = causalpix(&["train", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
    assert!(!dir.path().join("runs").exists());
    std::fs::write(&p, r#"{"batch_sise": 4}"#).unwrap();
    let o = causalpix(&["train", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));
}

#[test]
fn probe_causality_passes_on_the_desk_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalpix(&["probe", "causality"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn probe_field_matches_the_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    let o = causalpix(&["probe", "field", "--depth", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("probe: matches"));
}

#[test]
fn samples_are_deterministic_ppm_files() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["s1", "s2"] {
        let o = causalpix(&["sample", "--n", "1", "--size", "4", "--seed", "9", "--out", out], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let name = "sample-seed9-000.ppm";
    let a = std::fs::read(dir.path().join("s1").join(name)).unwrap();
    assert!(a.starts_with(b"P6\n4 4\n255\n"));
    assert_eq!(a, std::fs::read(dir.path().join("s2").join(name)).unwrap());
}
