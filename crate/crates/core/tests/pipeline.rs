use std::path::Path;

use jrm::experiment::{self, ExperimentConfig};
use jrm::rl::RlConfig;
use jrm::trainer::TrainConfig;
use serde_json::Value;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![1],
        n_train: 24,
        n_eval: 12,
        jobs: 1,
        train: TrainConfig {
            epochs: 1,
            batch_size: 8,
            eval_every: 2,
            ..TrainConfig::default()
        },
        rl: RlConfig {
            iterations: 3,
            eval_prompts: 8,
            ..RlConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn standard_run_writes_every_artifact_and_report_tolerates_missing_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let summary = experiment::standard(&small(), out).unwrap();
    assert_eq!(summary, read(&out.join("summary.json")));

    let run = experiment::alpha_dir(out, 1, 0.7);
    for f in ["metrics.csv", "eval.json", "train_report.json", "rl_metrics.csv", "rl_report.json", "selfcorrect_report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("checkpoint/manifest.json").is_file());
    let analyze = experiment::seed_dir(out, 1).join("analyze");
    assert!(analyze.join("repr_stats.json").is_file() && analyze.join("pca_points.csv").is_file());
    for key in ["heldout_if_accuracy_last", "effective_rank", "final_epoch_rank_loss", "rl_final_gt_if"] {
        assert!(summary[key]["holds"].is_boolean(), "{key}");
        assert_eq!(summary[key]["by_alpha"]["0.7"]["per_seed"].as_array().unwrap().len(), 1);
    }

    std::fs::remove_file(run.join("rl_metrics.csv")).unwrap();
    std::fs::remove_file(run.join("selfcorrect_report.json")).unwrap();
    std::fs::remove_dir_all(&analyze).unwrap();
    let partial = experiment::report(out).unwrap();
    assert_eq!(partial["rl_final_gt_if"], "absent");
    assert_eq!(partial["selfcorrect"], "absent");
    assert_eq!(partial["effective_rank"], "absent");
    assert_eq!(partial["heldout_if_accuracy_last"], summary["heldout_if_accuracy_last"]);
    assert!(!experiment::failed_checks(&partial).contains(&"rl_final_gt_if".to_string()));
}

#[test]
fn report_without_a_run_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let e = experiment::report(tmp.path()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}
