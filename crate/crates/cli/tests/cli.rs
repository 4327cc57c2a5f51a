use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
classes = 3
per_class = 20
resolution = 8
shots = 2

[generator]
corpus_per_class = 4
steps = 4
arch = { resolution = 8, patch = 4, width = 16, heads = 2, mlp_hidden = 16, depth = 3, text_width = 16, text_layers = 1, text_heads = 2, time_dim = 8 }
schedule = { steps = 100, kind = "linear", beta_min = 1e-3, beta_max = 0.05 }

[classifier]
corpus_per_class = 1
steps = 3
batch_size = 8
arch = { resolution = 8, patch = 4, width = 16, heads = 2, layers = 1, mlp_hidden = 16, text_width = 16, text_layers = 1, text_heads = 2, embed_dim = 8 }

[dream]
epochs = 1
batch_size = 2
rank = 2

[generation]
per_class = 2
steps = 2

[mixture]
batch_size = 4
rank = 2
epochs = 1
"#;

fn datadream(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datadream"))
        .args(args)
        .env("DATADREAM_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = datadream(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn out_of_range_lambda_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = datadream(&["train-classifier", "--lambda", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mixture.lambda"), "{}", stderr(&o));
}

#[test]
fn unknown_override_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = datadream(&["dream", "--set", "dream.epoch=3"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("dream.epoch"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = format!("dataset.image_folder=\"{}\"", dir.path().join("nope").display());
    let o = datadream(&["pretrain-classifier", "-c", &cfg, "--set", &missing], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pretrain-classifier"), "{}", stderr(&o));
}

#[test]
fn stages_run_under_the_env_root_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("out");
    let o = datadream(&["evaluate", "-c", &cfg, "--method", "zero-shot", "--lambda", "0.5"], &root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("zero_shot"));
    assert!(root.join("results.jsonl").exists());
    let again = datadream(&["evaluate", "-c", &cfg, "--method", "zero-shot", "--lambda", "0.5"], &root);
    assert!(again.status.success());
    assert!(!stderr(&again).contains("running"), "{}", stderr(&again));
    assert_eq!(o.stdout, again.stdout);
}

#[test]
fn dream_accepts_a_regime() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("out");
    let o = datadream(&["dream", "-c", &cfg, "--regime", "cls"], &root);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("cls-r0-k2"), "{out}");
}
