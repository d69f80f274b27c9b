use std::path::Path;

use optibox::cli::{run, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use optibox::evalkit::{write_lines, Prediction};
use optibox::geometry::{best_target_proposal, ThresholdMode};
use optibox::synthdata::{load_dataset, Split};

const SMALL: [&str; 8] = [
    "--set",
    "scenes_train=30",
    "--set",
    "scenes_val=8",
    "--set",
    "scenes_test=8",
    "--set",
    "epochs=2",
];

fn cmd(name: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut argv = vec![name, "--out", out.to_str().unwrap()];
    argv.extend(SMALL);
    argv.extend(extra);
    run(argv)
}

fn manifest_value(out: &Path, command: &str, key: &str) -> String {
    let text = std::fs::read_to_string(out.join(format!("manifest_{command}.txt"))).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from manifest"))
        .to_string()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(["bogus"]), EXIT_USAGE);
}

#[test]
fn unknown_setting_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        cmd("gen-data", dir.path(), &["--set", "no_such_key=1"]),
        EXIT_DATA
    );
}

#[test]
fn override_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# file layer\nbatch = 7\nlr = 0.5\nseed = 3\n").unwrap();
    let code = cmd(
        "gen-data",
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "lr=0.25",
            "--seed",
            "9",
        ],
    );
    assert_eq!(code, EXIT_OK);
    assert_eq!(manifest_value(dir.path(), "gen-data", "batch"), "7");
    assert_eq!(manifest_value(dir.path(), "gen-data", "lr"), "0.25");
    assert_eq!(manifest_value(dir.path(), "gen-data", "seed"), "9");
    // untouched keys keep the preset value
    assert_eq!(manifest_value(dir.path(), "gen-data", "decay"), "0.1");
}

#[test]
fn eval_accepts_a_predictions_file() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmd("gen-data", dir.path(), &[]), EXIT_OK);
    let records = load_dataset(&dir.path().join("dataset.jsonl")).unwrap();
    let preds: Vec<Prediction> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .flat_map(|r| {
            let boxes = r.proposal_boxes();
            r.queries.iter().map(move |q| {
                let i = best_target_proposal(&boxes, &q.gt, 0.0, ThresholdMode::Inclusive).unwrap();
                Prediction {
                    query_id: q.id.clone(),
                    selected: boxes[i].to_array(),
                    refined: None,
                    scores: Vec::new(),
                }
            })
        })
        .collect();
    let file = dir.path().join("best.jsonl");
    write_lines(&preds, &file).unwrap();
    let set = format!("predictions={}", file.display());
    assert_eq!(cmd("eval", dir.path(), &["--set", &set]), EXIT_OK);
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("metrics.txt").exists());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmd("gen-data", dir.path(), &[]), EXIT_OK);
    assert_eq!(cmd("train-optibox", dir.path(), &[]), EXIT_DATA);
    assert_eq!(cmd("eval", dir.path(), &[]), EXIT_DATA);
}

#[test]
fn divergence_exits_with_the_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["gen-data", "pretrain-autoencoder", "pretrain-projections"] {
        assert_eq!(cmd(c, dir.path(), &[]), EXIT_OK, "{c}");
    }
    assert_eq!(
        cmd("train-grounder", dir.path(), &["--set", "lr=1e300"]),
        EXIT_NUMERIC
    );
}
