use std::fs;
use std::path::{Path, PathBuf};

use ps3_cli::run_args;
use ps3_core::checkpoint::Checkpoint;
use ps3_core::Model;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn manifest(&self) -> String {
        self.root.join("cohort/manifest.json").display().to_string()
    }

    fn out(&self) -> String {
        self.root.join("run").display().to_string()
    }

    fn config(&self) -> String {
        self.root.join("run.json").display().to_string()
    }
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn small_cohort(patients: usize, seed: u64) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("synth.json");
    fs::write(
        &spec,
        r#"{"n_patches": [40, 60], "n_segments": [2, 6], "n_genes": 80, "n_pathways": 6}"#,
    )
    .unwrap();
    run_args([
        "ps3",
        "synth",
        "--out",
        &s(&root.join("cohort")),
        "--config",
        &s(&spec),
        "--patients",
        &patients.to_string(),
        "--seed",
        &seed.to_string(),
    ])
    .unwrap();
    fs::write(root.join("run.json"), r#"{"n_p": 6, "epochs": 2}"#).unwrap();
    Run { _dir: dir, root }
}

fn stage(run: &Run, extra: &[&str]) {
    let (m, o, c) = (run.manifest(), run.out(), run.config());
    run_args(["ps3", "prototype", "--manifest", &m, "--out", &o]).unwrap();
    let mut argv = vec![
        "ps3",
        "train",
        "--config",
        &c,
        "--manifest",
        &m,
        "--out",
        &o,
        "--folds",
        "2",
    ];
    argv.extend_from_slice(extra);
    run_args(argv).unwrap();
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn end_to_end_writes_every_artifact_with_fixed_headers() {
    let run = small_cohort(24, 1);
    stage(&run, &[]);
    run_args(["ps3", "eval", "--out", &run.out(), "--attention"]).unwrap();
    let out = PathBuf::from(run.out());
    let expect = [
        ("prototypes/report_lengths.csv", "patient_id,segments"),
        ("train/history.csv", "fold,epoch,learning_rate,loss,degenerate_batches"),
        ("train/predictions.csv", "fold,patient_id,time,event,risk"),
        ("train/summary.csv", "fold,n_train,n_test,n_t,c_index"),
        ("eval/metrics.csv", "fold,n_test,c_index"),
        ("eval/km.csv", "group,time,survival,at_risk"),
        ("eval/logrank.csv", "statistic,p_value,n_low,n_high"),
        ("eval/attention_summary.csv", "query,key,rank,token,mean_dispersion"),
    ];
    for (file, h) in expect {
        assert_eq!(header(&out.join(file)), h, "{file}");
    }
    for k in 0..2 {
        assert!(out.join(format!("train/fold_{k}.ckpt")).is_file());
    }
    let preds = fs::read_to_string(out.join("train/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 25);
}

#[test]
fn eval_reproduces_training_concordance() {
    let run = small_cohort(24, 2);
    stage(&run, &[]);
    run_args(["ps3", "eval", "--out", &run.out()]).unwrap();
    let out = PathBuf::from(run.out());
    let train: Vec<String> = fs::read_to_string(out.join("train/summary.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().to_string())
        .collect();
    let eval: Vec<String> = fs::read_to_string(out.join("eval/metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().to_string())
        .collect();
    assert_eq!(train, eval);
}

#[test]
fn unknown_fusion_mode_is_a_usage_error() {
    let err = run_args([
        "ps3",
        "train",
        "--manifest",
        "m.json",
        "--out",
        "o",
        "--fusion-mode",
        "early",
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
    let err = run_args([
        "ps3",
        "train",
        "--config",
        &s(&cfg),
        "--manifest",
        "m.json",
        "--out",
        "o",
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("learning_rat"));
}

#[test]
fn missing_slide_names_the_patient() {
    let run = small_cohort(8, 3);
    let slide = run.root.join("cohort/slides/P0004.ps3e");
    assert!(slide.is_file(), "synthetic slide layout changed");
    fs::remove_file(&slide).unwrap();
    let err = run_args(["ps3", "prototype", "--manifest", &run.manifest(), "--out", &run.out()]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("P0004"), "{err}");
}

#[test]
fn missing_prototypes_name_the_patient() {
    let run = small_cohort(8, 4);
    run_args(["ps3", "prototype", "--manifest", &run.manifest(), "--out", &run.out()]).unwrap();
    fs::remove_file(PathBuf::from(run.out()).join("prototypes/slides/P0002.ps3e")).unwrap();
    let err = run_args([
        "ps3",
        "train",
        "--config",
        &run.config(),
        "--manifest",
        &run.manifest(),
        "--out",
        &run.out(),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("P0002"), "{err}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let run = small_cohort(16, 5);
    stage(&run, &["--epochs", "0"]);
    let out = PathBuf::from(run.out());
    for k in 0..2 {
        let ckpt = Checkpoint::load(&out.join(format!("train/fold_{k}.ckpt"))).unwrap();
        let mut init = Model::init(ckpt.model.spec.clone(), ckpt.config.seed).unwrap();
        Checkpoint::round_to_f32(&mut init.params);
        assert_eq!(ckpt.model, init);
        assert_eq!(ckpt.config.seed, ps3_cli::commands::fold_seed(0, k));
    }
    assert_eq!(
        header(&out.join("train/history.csv")),
        "fold,epoch,learning_rate,loss,degenerate_batches"
    );
    assert_eq!(
        fs::read_to_string(out.join("train/history.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let run = small_cohort(16, 6);
    stage(&run, &[]);
    let out = PathBuf::from(run.out());
    let files = [
        "train/history.csv",
        "train/predictions.csv",
        "train/fold_0.ckpt",
        "train/fold_1.ckpt",
    ];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    stage(&run, &[]);
    let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn effective_config_reproduces_the_run() {
    let run = small_cohort(16, 7);
    stage(&run, &["--seed", "11", "--fusion-mode", "late"]);
    let out = PathBuf::from(run.out());
    let cfg = out.join("train/effective_config.json");
    let before = fs::read(out.join("train/fold_1.ckpt")).unwrap();
    let saved = run.root.join("saved.json");
    fs::copy(&cfg, &saved).unwrap();
    run_args(["ps3", "train", "--config", &s(&saved)]).unwrap();
    assert_eq!(fs::read(out.join("train/fold_1.ckpt")).unwrap(), before);
}

#[test]
fn eval_rejects_training_flags() {
    let err = run_args(["ps3", "eval", "--out", "o", "--epochs", "3"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pathway_only_runs_without_prototypes() {
    let run = small_cohort(16, 8);
    let (m, o, c) = (run.manifest(), run.out(), run.config());
    run_args([
        "ps3",
        "train",
        "--config",
        &c,
        "--manifest",
        &m,
        "--out",
        &o,
        "--modalities",
        "p",
        "--folds",
        "2",
    ])
    .unwrap();
    run_args(["ps3", "eval", "--out", &o]).unwrap();
}
