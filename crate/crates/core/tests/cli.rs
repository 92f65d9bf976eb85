//! End-to-end coverage of the `mathq` binary: flag plumbing, output files,
//! and the exit-code policy (findings are results; config and schema
//! problems are errors).

mod common;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use mathq_verify::dataset::save_dataset;
use mathq_verify::gateway::FixtureEntry;
use mathq_verify::pipeline::{load_traces, ExecutionMode};

fn mathq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mathq"))
        .args(args)
        .output()
        .expect("spawn mathq binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Corpus dataset + fixture + config for one or more scripted models.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
    config: PathBuf,
}

fn workspace(models: &[&str]) -> Workspace {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().to_path_buf();
    let dataset = root.join("corpus.jsonl");
    save_dataset(&common::corpus_set(), &dataset).expect("write corpus");

    let entries: Vec<FixtureEntry> = models
        .iter()
        .flat_map(|m| common::oracle_entries(m))
        .collect();
    let fixture = root.join("fixture.jsonl");
    common::write_fixture_file(&fixture, &entries);

    // Top-level keys must precede the [[endpoints]] tables or TOML folds them
    // into the last endpoint entry.
    let mut toml = String::new();
    if models.len() > 1 {
        toml.push_str(&format!("verifier = \"{}\"\n\n", models[0]));
    }
    for model in models {
        toml.push_str(&format!(
            "[[endpoints]]\nmodel_id = \"{model}\"\nfixture = \"{}\"\n\n",
            fixture.display()
        ));
    }
    let config = root.join("run.toml");
    fs::write(&config, toml).expect("write config");
    Workspace {
        _dir: dir,
        root,
        dataset,
        config,
    }
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn verify_writes_artifacts_and_exits_zero_despite_unjudgeable_items() {
    let ws = workspace(&["oracle-a"]);
    let out_dir = ws.root.join("run");
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&ws.config),
        "--out",
        &path_arg(&out_dir),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let summary = stdout_of(&out);
    assert!(
        summary.contains("10 valid, 18 invalid, 2 unjudgeable"),
        "unexpected summary: {summary}"
    );

    let traces = load_traces(out_dir.join("traces.jsonl")).expect("readable traces");
    assert_eq!(traces.len(), 30);
    let retained = fs::read_to_string(out_dir.join("retained.txt")).unwrap();
    assert_eq!(retained.lines().count(), 10);
    assert!(retained.lines().all(|l| l.starts_with('v')));
    let unjudgeable = fs::read_to_string(out_dir.join("unjudgeable.txt")).unwrap();
    assert_eq!(
        unjudgeable.lines().collect::<Vec<_>>(),
        common::GARBLED_IDS.to_vec()
    );
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn verify_mode_flag_overrides_config() {
    let ws = workspace(&["oracle-a"]);
    let out_dir = ws.root.join("run");
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&ws.config),
        "--out",
        &path_arg(&out_dir),
        "--mode",
        "early-exit",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let traces = load_traces(out_dir.join("traces.jsonl")).unwrap();
    // Early exit leaves later stages skipped on the s1-failing questions.
    let i01 = traces.iter().find(|t| t.question_id == "i01").unwrap();
    assert_eq!(i01.executed.len(), 1);
    assert_eq!(i01.skipped.len(), 4);
}

#[test]
fn verify_rejects_unknown_ablation_and_bad_config() {
    let ws = workspace(&["oracle-a"]);
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&ws.config),
        "--out",
        &path_arg(&ws.root.join("run")),
        "--ablate",
        "s9",
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("s9"), "stderr: {}", stderr_of(&out));

    let broken = ws.root.join("broken.toml");
    fs::write(&broken, "concurency = 3\n").unwrap();
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&broken),
        "--out",
        &path_arg(&ws.root.join("run2")),
    ]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("concurency"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn eval_on_oracle_traces_reports_perfect_scores() {
    let ws = workspace(&["oracle-a"]);
    let run_dir = ws.root.join("run");
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&ws.config),
        "--out",
        &path_arg(&run_dir),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let csv_path = ws.root.join("summary.csv");
    let out = mathq(&[
        "eval",
        "--traces",
        &path_arg(&run_dir),
        "--dataset",
        &path_arg(&ws.dataset),
        "--out",
        &path_arg(&csv_path),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let report = stdout_of(&out);
    // The two garbled questions are excluded from the cells, so the
    // remaining 28 score perfectly and the exclusions are reported.
    assert!(
        report.contains("accuracy 100.00%"),
        "unexpected report: {report}"
    );
    assert!(
        report.contains("verdict-extraction failures: 2"),
        "unexpected report: {report}"
    );

    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("model,acc,f1,prec,inv,s1_s2,s3,s4,s5")
    );
    let row = lines.next().expect("one data row");
    assert!(
        row.starts_with("oracle-a,100.00,100.00,100.00,2,"),
        "unexpected row: {row}"
    );
}

#[test]
fn eval_requires_labels() {
    let ws = workspace(&["oracle-a"]);
    let run_dir = ws.root.join("run");
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&ws.config),
        "--out",
        &path_arg(&run_dir),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    // Strip the labels from the dataset.
    let unlabeled = ws.root.join("unlabeled.jsonl");
    let stripped: String = fs::read_to_string(&ws.dataset)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.remove("label");
            obj.remove("error_category");
            format!("{v}\n")
        })
        .collect();
    fs::write(&unlabeled, stripped).unwrap();

    let out = mathq(&[
        "eval",
        "--traces",
        &path_arg(&run_dir),
        "--dataset",
        &path_arg(&unlabeled),
    ]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("label"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn vote_assembles_traces_sweeps_and_replays_saved_store() {
    let ws = workspace(&["oracle-a", "oracle-b"]);
    for model in ["oracle-a", "oracle-b"] {
        let out = mathq(&[
            "verify",
            "--dataset",
            &path_arg(&ws.dataset),
            "--config",
            &path_arg(&ws.config),
            "--out",
            &path_arg(&ws.root.join(model)),
            "--model",
            model,
        ]);
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    }

    let votes = ws.root.join("votes.jsonl");
    let sweep_csv = ws.root.join("sweep.csv");
    let runs = format!(
        "{},{}",
        ws.root.join("oracle-a").display(),
        ws.root.join("oracle-b").display()
    );
    let out = mathq(&[
        "vote",
        "--traces",
        &runs,
        "--dataset",
        &path_arg(&ws.dataset),
        "--configs",
        "2:1,2:2",
        "--save-votes",
        &path_arg(&votes),
        "--out",
        &path_arg(&sweep_csv),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    // Identical oracle voters agree everywhere: 10 true positives, no false
    // positives, and the garbled pair never counts as an acceptance.
    let csv = fs::read_to_string(&sweep_csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("n,k,voters,precision,recall,f1,tp,fp")
    );
    assert_eq!(
        lines.next(),
        Some("2,1,oracle-a+oracle-b,100.00,100.00,100.00,10,0")
    );
    assert_eq!(
        lines.next(),
        Some("2,2,oracle-a+oracle-b,100.00,100.00,100.00,10,0")
    );

    // The saved store replays to the same rows, restricted by --voters.
    let out = mathq(&[
        "vote",
        "--votes",
        &path_arg(&votes),
        "--dataset",
        &path_arg(&ws.dataset),
        "--configs",
        "1:1",
        "--voters",
        "oracle-b",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let table = stdout_of(&out);
    assert!(table.contains("oracle-b"), "unexpected table: {table}");

    // Asking for more voters than the roster holds is a config error.
    let out = mathq(&[
        "vote",
        "--votes",
        &path_arg(&votes),
        "--dataset",
        &path_arg(&ws.dataset),
        "--configs",
        "3:1",
    ]);
    assert!(!out.status.success());
    assert!(
        stderr_of(&out).contains("3 voters"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn stats_reports_composition_and_zero_self_divergence() {
    let ws = workspace(&["oracle-a"]);
    let csv_path = ws.root.join("distribution.csv");
    let out = mathq(&[
        "stats",
        "--dataset",
        &path_arg(&ws.dataset),
        "--out",
        &path_arg(&csv_path),
        "--compare",
        &path_arg(&ws.dataset),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let report = stdout_of(&out);
    assert!(report.contains("30 questions"), "report: {report}");
    assert!(
        report.contains("labels: 10 valid, 20 invalid"),
        "report: {report}"
    );
    assert!(
        report.contains("contradiction_error: 4"),
        "report: {report}"
    );
    assert!(
        report.contains("total variation") && report.contains("0.0000"),
        "report: {report}"
    );
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("category,difficulty_bin,count"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn validate_dataset_passes_clean_files() {
    let ws = workspace(&["oracle-a"]);
    let out = mathq(&[
        "validate-dataset",
        "--dataset",
        &path_arg(&ws.dataset),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("ok"));

    // The same corpus without labels fails the labeled schema but passes
    // the unlabeled one.
    let unlabeled = ws.root.join("unlabeled.jsonl");
    let stripped: String = fs::read_to_string(&ws.dataset)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.remove("label");
            obj.remove("error_category");
            format!("{v}\n")
        })
        .collect();
    fs::write(&unlabeled, stripped).unwrap();
    let out = mathq(&["validate-dataset", "--dataset", &path_arg(&unlabeled)]);
    assert!(!out.status.success());
    let out = mathq(&[
        "validate-dataset",
        "--dataset",
        &path_arg(&unlabeled),
        "--schema",
        "unlabeled",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
}

#[test]
fn verify_ablation_is_recorded_and_consistent_with_lib_semantics() {
    let ws = workspace(&["oracle-a"]);
    let out_dir = ws.root.join("run");
    let out = mathq(&[
        "verify",
        "--dataset",
        &path_arg(&ws.dataset),
        "--config",
        &path_arg(&ws.config),
        "--out",
        &path_arg(&out_dir),
        "--ablate",
        "s4",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(
        manifest["stages"],
        serde_json::json!(["s1", "s2", "s3", "s5"])
    );

    let traces = load_traces(out_dir.join("traces.jsonl")).unwrap();
    let lib_traces = common::oracle_pipeline(ExecutionMode::FullTrace)
        .verify_dataset(&common::corpus_set())
        .unwrap();
    for (cli_trace, lib_trace) in traces.iter().zip(&lib_traces) {
        assert!(cli_trace
            .executed
            .iter()
            .all(|v| v.stage.as_str() != "s4"));
        // Contradiction questions flip to Valid; everything else matches
        // the un-ablated run.
        if lib_trace.question_id.starts_with('c') {
            assert_eq!(cli_trace.verdict, mathq_verify::FinalVerdict::Valid);
        } else {
            assert_eq!(cli_trace.verdict, lib_trace.verdict);
        }
    }
}

#[test]
fn verify_reruns_are_byte_identical_via_cli() {
    let ws = workspace(&["oracle-a"]);
    let dir_a = ws.root.join("a");
    let dir_b = ws.root.join("b");
    for dir in [&dir_a, &dir_b] {
        let out = mathq(&[
            "verify",
            "--dataset",
            &path_arg(&ws.dataset),
            "--config",
            &path_arg(&ws.config),
            "--out",
            &path_arg(dir),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    }
    assert_eq!(
        fs::read(dir_a.join("traces.jsonl")).unwrap(),
        fs::read(dir_b.join("traces.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(dir_a.join("retained.txt")).unwrap(),
        fs::read(dir_b.join("retained.txt")).unwrap()
    );
}

#[test]
fn piped_stdout_closing_early_is_not_an_error() {
    use std::io::Write as _;

    let dir = tempfile::tempdir().expect("tempdir");
    let dataset = dir.path().join("wide.jsonl");
    let mut file = io::BufWriter::new(fs::File::create(&dataset).expect("create dataset"));
    // Enough distinct categories that the stats report overflows any pipe
    // buffer, so the child is still writing when the reader hangs up.
    for i in 0..12_000 {
        writeln!(
            file,
            r#"{{"id":"q{i}","question":"What is 1 + 1?","category":"cat-{i:05}"}}"#
        )
        .expect("write dataset");
    }
    file.flush().expect("flush dataset");

    let mut child = Command::new(env!("CARGO_BIN_EXE_mathq"))
        .args(["stats", "--dataset"])
        .arg(&dataset)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn mathq binary");
    drop(child.stdout.take());
    let out = child.wait_with_output().expect("wait for mathq");

    assert!(
        out.status.success(),
        "closed pipe treated as failure: {:?}, stderr: {}",
        out.status,
        stderr_of(&out)
    );
    assert_eq!(stderr_of(&out), "", "expected silence after the reader left");
}
