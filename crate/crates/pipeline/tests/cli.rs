use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 3\n[data.world]\nn_students = 40\nn_problems = 30\nn_kcs = 8\nn_archetypes = 2\n[mastery]\nepochs = 1\n[predictor]\nepochs = 3\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("small.toml");
    if !config.exists() {
        std::fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_stratpred"))
        .args(["--config", config.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()])
        .args(args)
        .env_remove("STRATPRED_REPORTS_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stage_before_its_inputs_names_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["cluster"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `gen-data` first"), "{}", stderr(&out));

    assert!(run(tmp.path(), &["gen-data"]).status.success());
    let out = run(tmp.path(), &["--method", "as", "cluster"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `embed` first"), "{}", stderr(&out));
}

#[test]
fn embed_is_deterministic_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["gen-data"][..], &["--ablation", "ss", "embed"]] {
        assert!(run(tmp.path(), &args).status.success());
    }
    let first = std::fs::read(tmp.path().join("out/embeddings.tsv")).unwrap();
    assert!(run(tmp.path(), &["--ablation", "ss", "embed"]).status.success());
    assert_eq!(first, std::fs::read(tmp.path().join("out/embeddings.tsv")).unwrap());
}

#[test]
fn artifacts_from_another_seed_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(tmp.path(), &["gen-data"]).status.success());
    let out = run(tmp.path(), &["--seed", "9", "--ablation", "ss", "embed"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("rerun `gen-data`"), "{}", stderr(&out));
}

#[test]
fn pipeline_writes_reports_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["pipeline"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let reports = tmp.path().join("out/reports");
    assert!(std::fs::read_dir(&reports).unwrap().count() > 0);
    let manifest = std::fs::read_to_string(tmp.path().join("out/manifest.tsv")).unwrap();
    assert!(manifest.lines().any(|l| l.starts_with("evaluate\t")));
}

#[test]
fn embeddings_from_another_ablation_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(tmp.path(), &["gen-data"]).status.success());
    assert!(run(tmp.path(), &["--ablation", "ss", "embed"]).status.success());
    let out = run(tmp.path(), &["--ablation", "ns", "cluster"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("rerun `embed`"), "{}", stderr(&out));
}
