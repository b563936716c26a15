use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [2]

[dataset]
per_class = 60

[budget]
k_list = [2]

[behavior.ssl]
steps = 30

[l2d.train]
epochs = 2
finetune_steps = 5
"#;

fn popdefer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popdefer")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn evaluate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = popdefer(&["evaluate", "--config", &config, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tables.push(std::fs::read(out.join("seed2/k2/metrics.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let text = String::from_utf8(tables.remove(0)).unwrap();
    assert!(text.starts_with("seed,k,L,H,variant,"));
}

#[test]
fn stages_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(popdefer(&["pretrain", "--config", &config, "--out", out_s]).status.success());
    assert!(out.join("seed2/features.csv").exists());
    assert!(out.join("seed2/backbone.bin").exists());
    assert!(popdefer(&["train-behavior", "--config", &config, "--out", out_s, "--k", "2"]).status.success());
    let acc = std::fs::read_to_string(out.join("seed2/k2/behavior_accuracy.csv")).unwrap();
    assert_eq!(acc.lines().next(), Some("encoder,expert_group,binary_accuracy"));
    assert!(popdefer(&["pseudo-label", "--config", &config, "--out", out_s, "--seed", "5"]).status.success());
    assert!(out.join("seed5/k2/pseudo_labels_np_attention.csv").exists());
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[behavior.ssl]\ntau = \"high\"\n").unwrap();
    let o = popdefer(&["sweep", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage `sweep`") && err.contains("behavior.ssl.tau"), "{err}");

    let config = small_config(dir.path());
    let o = popdefer(&["train-l2d", "--config", &config, "--k", "100000", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage `train-behavior`"), "{err}");
}
