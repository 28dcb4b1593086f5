//! Black-box tests of the command-line binary: exit codes, artifact
//! files, resume behavior, and the report path.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_egtas")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("egtas-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let (code, _, stderr) = run(&["frobnicate"]);
    assert_eq!(code, 1, "{stderr}");
}

#[test]
fn unknown_task_is_a_usage_error() {
    let dir = tmp_dir("usage");
    let dataset = dir.join("sbm.json");
    let (code, _, _) = run(&["gen-dataset", "--kind", "sbm", "--out", &s(&dataset)]);
    assert_eq!(code, 0);
    let (code, _, stderr) = run(&[
        "sample", "--dataset", &s(&dataset), "--task", "bogus",
        "--num-samples", "1", "--out", &s(&dir.join("a.ndjson")),
    ]);
    assert_eq!(code, 1, "{stderr}");
}

#[test]
fn missing_archive_is_a_data_error() {
    let dir = tmp_dir("data-error");
    let (code, _, stderr) = run(&[
        "fit-surrogate",
        "--archive", &s(&dir.join("missing.ndjson")),
        "--out-model", &s(&dir.join("m.json")),
        "--out-report", &s(&dir.join("r.json")),
    ]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn bad_dataset_file_is_a_data_error() {
    let dir = tmp_dir("bad-dataset");
    let dataset = dir.join("broken.json");
    std::fs::write(&dataset, "{\"edges\": []}").unwrap();
    let (code, _, stderr) = run(&[
        "sample", "--dataset", &s(&dataset), "--task", "nc",
        "--num-samples", "1", "--out", &s(&dir.join("a.ndjson")),
    ]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn gen_dataset_writes_file_and_manifest() {
    let dir = tmp_dir("gen");
    let dataset = dir.join("sbm.json");
    let (code, _, _) = run(&["gen-dataset", "--kind", "sbm", "--out", &s(&dataset), "--seed", "4"]);
    assert_eq!(code, 0);
    assert!(dataset.exists());
    let manifest_path = dir.join("sbm.manifest.json");
    assert!(manifest_path.exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["command"], "gen-dataset");
    assert!(manifest["operation_table"].is_object());
}

#[test]
fn sample_resumes_without_changing_existing_lines() {
    let dir = tmp_dir("resume");
    let dataset = dir.join("sbm.json");
    run(&["gen-dataset", "--kind", "sbm", "--out", &s(&dataset)]);
    let archive = dir.join("arch.ndjson");
    let worker = format!("{} worker --echo", bin());

    let base = [
        "sample", "--dataset", &s(&dataset), "--task", "nc",
        "--out", &s(&archive), "--seed", "9", "--evaluator-cmd", &worker,
    ];
    let (code, _, _) = run(&[&base[..], &["--num-samples", "4"]].concat());
    assert_eq!(code, 0);
    let first = std::fs::read_to_string(&archive).unwrap();
    assert_eq!(first.lines().count(), 4);

    let (code, _, _) = run(&[&base[..], &["--num-samples", "10"]].concat());
    assert_eq!(code, 0);
    let second = std::fs::read_to_string(&archive).unwrap();
    assert_eq!(second.lines().count(), 10);
    assert!(second.starts_with(&first), "resume rewrote the existing prefix");
}

#[test]
fn resume_with_a_different_seed_is_rejected() {
    let dir = tmp_dir("resume-seed");
    let dataset = dir.join("sbm.json");
    run(&["gen-dataset", "--kind", "sbm", "--out", &s(&dataset)]);
    let archive = dir.join("arch.ndjson");
    let worker = format!("{} worker --echo", bin());
    run(&[
        "sample", "--dataset", &s(&dataset), "--task", "nc", "--num-samples", "3",
        "--out", &s(&archive), "--seed", "9", "--evaluator-cmd", &worker,
    ]);
    let (code, _, stderr) = run(&[
        "sample", "--dataset", &s(&dataset), "--task", "nc", "--num-samples", "6",
        "--out", &s(&archive), "--seed", "10", "--evaluator-cmd", &worker,
    ]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn report_on_empty_history_notes_no_generations_and_succeeds() {
    let dir = tmp_dir("report-empty");
    let history = dir.join("hist.ndjson");
    let archive = dir.join("arch.ndjson");
    std::fs::write(&history, "").unwrap();
    std::fs::write(&archive, "").unwrap();
    let (code, stdout, _) = run(&[
        "report", "--history", &s(&history), "--archive", &s(&archive),
        "--out", &s(&dir.join("report.txt")),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("no generations"), "{stdout}");
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let dir = tmp_dir("pipeline");
    let dataset = dir.join("sbm.json");
    run(&["gen-dataset", "--kind", "sbm", "--out", &s(&dataset), "--seed", "2"]);

    let archive = dir.join("arch.ndjson");
    let worker = format!("{} worker --echo", bin());
    let (code, _, stderr) = run(&[
        "sample", "--dataset", &s(&dataset), "--task", "nc", "--num-samples", "40",
        "--out", &s(&archive), "--seed", "2", "--evaluator-cmd", &worker,
    ]);
    assert_eq!(code, 0, "{stderr}");

    let model = dir.join("surrogate.json");
    let report = dir.join("surrogate-report.json");
    let (code, _, stderr) = run(&[
        "fit-surrogate", "--archive", &s(&archive),
        "--out-model", &s(&model), "--out-report", &s(&report),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(model.exists() && report.exists());

    let history = dir.join("hist.ndjson");
    let result = dir.join("result.json");
    let (code, stdout, stderr) = run(&[
        "search", "--surrogate", &s(&model), "--dataset", &s(&dataset), "--task", "nc",
        "--generations", "6", "--population", "8", "--retrain-steps", "40",
        "--out-history", &s(&history), "--out-result", &s(&result),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("best architecture"), "{stdout}");
    assert_eq!(std::fs::read_to_string(&history).unwrap().lines().count(), 6);
    let result_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    assert!(result_json["predicted"].is_number());
    assert!(result_json["retrained"]["value"].is_number());
    assert!(result_json["spec"]["topology"].is_string());

    let report_txt = dir.join("report.txt");
    let (code, stdout, stderr) = run(&[
        "report", "--history", &s(&history), "--archive", &s(&archive),
        "--out", &s(&report_txt),
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("generation,best_pred,mean_pred"), "{stdout}");
    assert!(stdout.contains("holdout_ktau"), "{stdout}");
}
