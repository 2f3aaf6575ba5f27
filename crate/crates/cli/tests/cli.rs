use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use phaseseg::autodiff::Tensor;
use phaseseg::feature_store::{read_labels, read_vocabulary};
use phaseseg::metrics::FoldReport;
use phaseseg::mstcn::Prediction;
use phaseseg::splits::FoldSpec;
use phaseseg::training::write_prediction;

fn phaseseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phaseseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = phaseseg(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Synthetic dataset with 3 folds in `root/data`.
fn dataset(root: &Path) {
    let cfg = r#"{"folds": 3, "synth": {"num_videos": 6, "min_frames": 40, "max_frames": 60, "feat_dim": 4, "num_classes": 3}}"#;
    fs::write(root.join("config.json"), cfg).unwrap();
    ok(&["synth", "--config", "config.json", "--out", "data"], root);
    ok(&["split", "--config", "config.json", "--manifest", "data/manifest.json", "--out", "data/folds.json"], root);
}

fn one_hot(labels: &[usize], c: usize) -> Prediction {
    let t = labels.len();
    let mut p = vec![0.0f32; c * t];
    for (f, &l) in labels.iter().enumerate() {
        p[l * t + f] = 1.0;
    }
    Prediction {
        labels: labels.to_vec(),
        probabilities: Tensor::new(vec![c, t], p).unwrap(),
    }
}

/// Perfect predictions for fold 0, with one video shortened by `cut` frames.
fn oracle_dumps(root: &Path, cut: usize) -> Vec<String> {
    let spec = FoldSpec::read(root.join("data/folds.json")).unwrap();
    let vocab = read_vocabulary(root.join("data/vocabulary.json")).unwrap();
    let dir = root.join("preds");
    fs::create_dir_all(&dir).unwrap();
    for (i, id) in spec.folds[0].iter().enumerate() {
        let labels = read_labels(root.join(format!("data/labels/{id}.csv")), &vocab).unwrap();
        let mut l = labels.as_slice().to_vec();
        if i == 0 {
            l.truncate(l.len() - cut);
        }
        write_prediction(&one_hot(&l, vocab.len()), dir.join(format!("{id}.pspd"))).unwrap();
    }
    spec.folds[0].clone()
}

const EVAL: [&str; 9] = [
    "eval", "--manifest", "data/manifest.json", "--splits", "data/folds.json", "--fold", "0", "--predictions", "preds",
];

#[test]
fn eval_scores_perfect_dumps_and_honours_exclusion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);
    let ids = oracle_dumps(root, 0);
    ok(&[&EVAL[..], &["--out", "fold0.json"]].concat(), root);
    let r: FoldReport = serde_json::from_str(&fs::read_to_string(root.join("fold0.json")).unwrap()).unwrap();
    assert_eq!(r.fold, Some(0));
    assert_eq!(r.num_videos, ids.len());
    assert_eq!((r.accuracy, r.edit, r.f1_50, r.miou, r.pr_auc), (100.0, 100.0, 100.0, 100.0, 100.0));
    assert!(r.excluded_classes.is_empty());

    ok(&[&EVAL[..], &["--metrics-exclude", "0", "--out", "excl.json"]].concat(), root);
    let r: FoldReport = serde_json::from_str(&fs::read_to_string(root.join("excl.json")).unwrap()).unwrap();
    assert_eq!(r.excluded_classes, [0]);
    assert_eq!(r.accuracy, 100.0);

    let out = phaseseg(&[&EVAL[..], &["--metrics-exclude", "7", "--out", "x.json"]].concat(), root);
    assert_eq!(code(&out), 7);
}

#[test]
fn error_categories_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);

    let out = phaseseg(&["split", "--manifest", "nowhere.json", "--out", "f.json"], root);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.json"));

    fs::write(root.join("bad.json"), r#"{"train": {"epochs": "many"}}"#).unwrap();
    let out = phaseseg(&["split", "--config", "bad.json", "--manifest", "data/manifest.json", "--out", "f.json"], root);
    assert_eq!(code(&out), 4);
    fs::write(root.join("unknown.json"), r#"{"model": {"depth": 3}}"#).unwrap();
    let out = phaseseg(
        &["train", "--config", "unknown.json", "--manifest", "data/manifest.json", "--splits", "data/folds.json", "--fold", "0", "--out", "r"],
        root,
    );
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));

    let out = phaseseg(
        &["train", "--manifest", "data/manifest.json", "--splits", "data/folds.json", "--fold", "3", "--out", "r"],
        root,
    );
    assert_eq!(code(&out), 5);

    let out = phaseseg(&[&EVAL[..], &["--out", "x.json"]].concat(), root);
    assert_eq!(code(&out), 3, "no dumps yet");

    let ids = oracle_dumps(root, 5);
    let vocab = read_vocabulary(root.join("data/vocabulary.json")).unwrap();
    let full = read_labels(root.join(format!("data/labels/{}.csv", ids[0])), &vocab).unwrap().len();
    let out = phaseseg(&[&EVAL[..], &["--out", "x.json"]].concat(), root);
    assert_eq!(code(&out), 6);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains(&format!("{} frames", full - 5)) && msg.contains(&format!("{full}")), "{msg}");
}

#[test]
fn train_writes_run_directory_and_ribbon_renders_it() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset(root);
    let tiny = r#"{"model": {"pg_layers": 3, "refine_stages": 1, "refine_layers": 3, "hidden_maps": 8}, "train": {"epochs": 2}}"#;
    fs::write(root.join("tiny.json"), tiny).unwrap();
    ok(
        &["train", "--config", "tiny.json", "--manifest", "data/manifest.json", "--splits", "data/folds.json", "--fold", "1", "--out", "run"],
        root,
    );
    for f in ["model.psck", "model_config.json", "run_manifest.json", "resolved_config.json"] {
        assert!(root.join("run").join(f).is_file(), "{f}");
    }
    let (model, params) = phaseseg_cli::load_run(&root.join("run")).unwrap();
    assert_eq!((model.hidden_maps, model.num_classes, model.feat_dim), (8, 3, 4));
    assert_eq!(params.count(), phaseseg::mstcn::parameter_count(&model));

    let spec = FoldSpec::read(root.join("data/folds.json")).unwrap();
    let id = &spec.folds[1][0];
    let dump = format!("run/predictions/{id}.pspd");
    let labels = format!("data/labels/{id}.csv");
    ok(
        &["ribbon", "--labels", &labels, "--vocabulary", "data/vocabulary.json", "--predictions", &dump, "--out", "r.svg"],
        root,
    );
    let svg = fs::read_to_string(root.join("r.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(r#"<g class="band""#).count(), 2);
}
