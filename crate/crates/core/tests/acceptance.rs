//! Acceptance gate: one test per criterion, each printing a single
//! `[PASS]`/`[FAIL]` line (visible with `--nocapture`, and always on
//! failure). Tolerances are pinned as constants next to the expectations
//! they guard. Everything runs offline on scripted backends except the
//! final `#[ignore]`d live smoke test.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use mathq_verify::dataset::{
    compare_distributions, dataset_stats, load_dataset, save_dataset, Binning, DistributionTable,
    QuestionSet, SchemaKind,
};
use mathq_verify::domain::ParseSource;
use mathq_verify::ensemble::{sweep_configs, vote, EnsembleConfig, ModelVote, VoteVector};
use mathq_verify::gateway::ModelEndpoint;
use mathq_verify::metrics::{compute_scores, ConfusionCounts, Prediction};
use mathq_verify::pipeline::{filter_valid, load_traces, ExecutionMode, Pipeline, PipelineConfig};
use mathq_verify::stages::extract_verdict;
use mathq_verify::{ErrorCategory, FinalVerdict, GroundTruth, MathQuestion, StageId, StageOutcome};

/// Score tolerance, in percentage points.
const PP_TOLERANCE: f64 = 0.01;
/// Slack for float formatting on top of the pp tolerance.
const F64_SLACK: f64 = 1e-9;

fn criterion(name: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("[PASS] {name}: {detail}"),
        Err(detail) => {
            println!("[FAIL] {name}: {detail}");
            panic!("acceptance criterion {name:?} failed: {detail}");
        }
    }
}

fn mathq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mathq"))
        .args(args)
        .output()
        .expect("spawn mathq binary")
}

fn expect_success(out: &Output, what: &str) -> Result<(), String> {
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{what} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

#[test]
fn voting_oracle_equivalence() {
    criterion("voting-oracle-equivalence", || {
        let start = Instant::now();
        let mut checked = 0u32;
        for n in 1..=5usize {
            let voters: Vec<String> = (1..=n).map(|i| format!("m{i}")).collect();
            for k in 1..=n {
                let cfg = EnsembleConfig::new(n, k).map_err(|e| e.to_string())?;
                for bits in 0..(1u32 << n) {
                    let votes: Vec<ModelVote> = (0..n)
                        .map(|i| ModelVote {
                            model_id: voters[i].clone(),
                            vote: if bits >> i & 1 == 1 {
                                Prediction::Positive
                            } else {
                                Prediction::Negative
                            },
                        })
                        .collect();
                    let v = VoteVector::new("q", votes).map_err(|e| e.to_string())?;
                    let got = vote(&v, &cfg).map_err(|e| e.to_string())?;
                    let want = bits.count_ones() as usize >= k;
                    if got != want {
                        return Err(format!(
                            "vote() disagrees with popcount oracle at n={n} k={k} bits={bits:b}"
                        ));
                    }
                    checked += 1;
                }
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 1.0 {
            return Err(format!("took {elapsed:.2?}, bound is 1 s"));
        }
        Ok(format!(
            "{checked} vote vectors match the popcount oracle in {elapsed:.2?}"
        ))
    });
}

/// Synthetic vote store over 2147 questions (1299 positive) realizing the
/// reference ensemble table: nine vote patterns over six voters, with the
/// question count carrying each pattern chosen so every roster's TP/FP
/// totals land on the published values.
fn synthetic_vote_store() -> (BTreeMap<String, VoteVector>, BTreeMap<String, bool>) {
    const PATTERNS: [([u8; 6], u64, u64); 9] = [
        ([1, 1, 1, 1, 1, 1], 660, 54),
        ([1, 1, 1, 1, 1, 0], 36, 5),
        ([1, 1, 1, 1, 0, 0], 103, 16),
        ([1, 1, 1, 0, 0, 0], 16, 20),
        ([1, 0, 1, 0, 0, 0], 80, 42),
        ([0, 1, 1, 0, 0, 0], 92, 21),
        ([0, 1, 0, 0, 0, 0], 42, 50),
        ([0, 0, 1, 0, 0, 0], 101, 103),
        ([0, 0, 0, 0, 0, 0], 169, 537),
    ];
    let voters: Vec<String> = (1..=6).map(|i| format!("m{i}")).collect();
    let mut store = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut seq = 0usize;
    for (bits, positives, negatives) in PATTERNS {
        for (count, label) in [(positives, true), (negatives, false)] {
            for _ in 0..count {
                let id = format!("q{seq:04}");
                seq += 1;
                let votes: Vec<ModelVote> = (0..6)
                    .map(|i| ModelVote {
                        model_id: voters[i].clone(),
                        vote: if bits[i] == 1 {
                            Prediction::Positive
                        } else {
                            Prediction::Negative
                        },
                    })
                    .collect();
                store.insert(
                    id.clone(),
                    VoteVector::new(&id, votes).expect("distinct voters"),
                );
                labels.insert(id, label);
            }
        }
    }
    (store, labels)
}

#[test]
fn ensemble_sweep_arithmetic() {
    criterion("ensemble-sweep-arithmetic", || {
        let start = Instant::now();
        let (store, labels) = synthetic_vote_store();
        let total = labels.len();
        let positives = labels.values().filter(|&&v| v).count();
        if total != 2147 || positives != 1299 {
            return Err(format!(
                "store shape wrong: {total} questions, {positives} positives"
            ));
        }

        // (n, k, roster by voter number, expected precision/recall/f1 in %).
        let expected: Vec<(usize, usize, Vec<usize>, f64, f64, f64)> = vec![
            (1, 1, vec![1], 86.72, 68.90, 76.79),
            (2, 1, vec![1, 2], 83.19, 79.21, 81.15),
            (2, 2, vec![1, 2], 89.56, 62.74, 73.79),
            (3, 1, vec![1, 2, 3], 78.42, 86.99, 82.48),
            (3, 2, vec![1, 2, 3], 86.20, 75.98, 80.77),
            (3, 3, vec![1, 2, 4], 91.42, 61.51, 73.54),
            (4, 4, vec![1, 2, 4, 5], 92.19, 53.58, 67.77),
            (5, 5, vec![1, 2, 4, 5, 6], 92.44, 50.81, 65.57),
        ];
        let configs: Vec<(EnsembleConfig, Vec<String>)> = expected
            .iter()
            .map(|(n, k, roster, ..)| {
                let cfg = EnsembleConfig::new(*n, *k).expect("valid shape");
                let voters = roster.iter().map(|i| format!("m{i}")).collect();
                (cfg, voters)
            })
            .collect();
        let rows = sweep_configs(&store, &labels, &configs).map_err(|e| e.to_string())?;

        for (row, (n, k, _, prec, rec, f1)) in rows.iter().zip(&expected) {
            for (name, got, want) in [
                ("precision", row.scores.precision * 100.0, *prec),
                ("recall", row.scores.recall * 100.0, *rec),
                ("f1", row.scores.f1 * 100.0, *f1),
            ] {
                if (got - want).abs() > PP_TOLERANCE + F64_SLACK {
                    return Err(format!(
                        "(n={n}, k={k}) {name}: got {got:.4}%, expected {want:.2}% ±{PP_TOLERANCE}"
                    ));
                }
            }
        }
        let elapsed = start.elapsed();
        if elapsed.as_secs_f64() >= 5.0 {
            return Err(format!("took {elapsed:.2?}, bound is 5 s"));
        }
        Ok(format!(
            "all 8 ensemble rows within ±{PP_TOLERANCE} pp in {elapsed:.2?}"
        ))
    });
}

#[test]
fn score_cross_consistency() {
    criterion("score-cross-consistency", || {
        // The single-verifier row of the sweep, expressed as raw confusion
        // counts over the same 2147 questions.
        let c = ConfusionCounts {
            true_positive: 895,
            false_positive: 137,
            true_negative: 711,
            false_negative: 404,
            invalid_excluded: 0,
        };
        let s = compute_scores(c);
        for (name, got, want) in [
            ("accuracy", s.accuracy * 100.0, 74.80),
            ("precision", s.precision * 100.0, 86.72),
            ("recall", s.recall * 100.0, 68.90),
        ] {
            if (got - want).abs() > PP_TOLERANCE + F64_SLACK {
                return Err(format!(
                    "{name}: got {got:.4}%, expected {want:.2}% ±{PP_TOLERANCE}"
                ));
            }
        }
        Ok(format!(
            "accuracy {:.2}% from counts (895, 137, 711, 404) matches the single-verifier row",
            s.accuracy * 100.0
        ))
    });
}

#[test]
fn dataset_integrity() {
    criterion("dataset-integrity", || {
        // Reference composition: five error categories plus valid questions.
        const COUNTS: [(ErrorCategory, u64); 5] = [
            (ErrorCategory::InstructionError, 143),
            (ErrorCategory::NonsemanticError, 119),
            (ErrorCategory::MinimalDomainError, 171),
            (ErrorCategory::ContradictionError, 300),
            (ErrorCategory::CompletenessError, 115),
        ];
        const VALID: u64 = 1299;
        let math_categories = ["Algebra", "Geometry", "Number Theory", "Combinatorics"];
        let mut records = Vec::new();
        let mut push = |label: GroundTruth, count: u64, tag: &str| {
            for i in 0..count {
                let id = format!("{tag}{i:04}");
                let mut q = MathQuestion::new(
                    &id,
                    format!("Compute the value asked for by item {id}."),
                )
                .with_label(label);
                q.category = Some(math_categories[i as usize % math_categories.len()].into());
                q.difficulty = Some(1.0 + (i % 7) as f64);
                records.push(q);
            }
        };
        push(GroundTruth::valid(), VALID, "ok");
        for (category, count) in COUNTS {
            push(
                GroundTruth::new(false, category).expect("consistent label"),
                count,
                category.as_str(),
            );
        }

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("valimath.jsonl");
        let set = QuestionSet::new(records, path.display().to_string())
            .map_err(|e| e.to_string())?;
        save_dataset(&set, &path).map_err(|e| e.to_string())?;

        let loaded = load_dataset(&path, SchemaKind::Labeled).map_err(|e| e.to_string())?;
        let stats =
            dataset_stats(&loaded, Binning::default()).map_err(|e| e.to_string())?;
        if stats.total != 2147 {
            return Err(format!("expected 2147 records, loaded {}", stats.total));
        }
        let tally = stats.labels.ok_or("labeled set must produce a tally")?;
        if tally.valid != VALID {
            return Err(format!("valid count {} != {VALID}", tally.valid));
        }
        for (category, want) in COUNTS {
            let got = tally.per_error[&category];
            if got != want {
                return Err(format!("{} count {got} != {want}", category.as_str()));
            }
        }
        if tally.valid + tally.invalid_total() != 2147 {
            return Err("tally does not sum to the record count".to_string());
        }

        // The linter must reject records violating the label invariants.
        let bad = dir.path().join("bad.jsonl");
        fs::write(
            &bad,
            concat!(
                "{\"id\":\"b1\",\"question\":\"Find x.\",\"label\":\"invalid\"}\n",
                "{\"id\":\"b2\",\"question\":\"Find y.\",\"label\":\"valid\",\"error_category\":\"contradiction_error\"}\n",
            ),
        )
        .map_err(|e| e.to_string())?;
        let out = mathq(&["validate-dataset", "--dataset", &bad.display().to_string()]);
        if out.status.success() {
            return Err("validate-dataset accepted invariant-violating records".to_string());
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        if !stdout.contains("line 1") || !stdout.contains("line 2") {
            return Err(format!("linter output missed a violation:\n{stdout}"));
        }
        let out = mathq(&["validate-dataset", "--dataset", &path.display().to_string()]);
        expect_success(&out, "validate-dataset on the clean file")?;

        Ok("2147 records tally per category; linter rejects invariant violations".to_string())
    });
}

fn verdicts_by_id(traces_path: &Path) -> Result<BTreeMap<String, FinalVerdict>, String> {
    let traces = load_traces(traces_path).map_err(|e| e.to_string())?;
    Ok(traces
        .into_iter()
        .map(|t| (t.question_id, t.verdict))
        .collect())
}

/// Writes the corpus dataset, its prompt-keyed fixture, and a config TOML
/// into `dir`; returns the config path.
fn write_cli_workspace(dir: &Path) -> Result<std::path::PathBuf, String> {
    let dataset = dir.join("corpus.jsonl");
    save_dataset(&common::corpus_set(), &dataset).map_err(|e| e.to_string())?;
    let fixture = dir.join("fixture.jsonl");
    common::write_fixture_file(&fixture, &common::oracle_entries(common::ORACLE_MODEL));
    let config = dir.join("run.toml");
    fs::write(
        &config,
        format!(
            "[[endpoints]]\nmodel_id = \"{}\"\nfixture = \"{}\"\n",
            common::ORACLE_MODEL,
            fixture.display()
        ),
    )
    .map_err(|e| e.to_string())?;
    Ok(config)
}

#[test]
fn pipeline_semantics() {
    criterion("pipeline-semantics", || {
        let set = common::corpus_set();
        let full = common::oracle_pipeline(ExecutionMode::FullTrace)
            .verify_dataset(&set)
            .map_err(|e| e.to_string())?;
        let early = common::oracle_pipeline(ExecutionMode::EarlyExit)
            .verify_dataset(&set)
            .map_err(|e| e.to_string())?;

        // (a) Early-exit and full-trace agree on every final verdict.
        for (f, e) in full.iter().zip(&early) {
            if f.verdict != e.verdict {
                return Err(format!(
                    "{}: full-trace {:?} vs early-exit {:?}",
                    f.question_id, f.verdict, e.verdict
                ));
            }
        }
        // (b) Valid exactly when every executed stage passed.
        for t in &full {
            let all_pass = t.executed.iter().all(|v| v.outcome == StageOutcome::Pass);
            if (t.verdict == FinalVerdict::Valid) != all_pass {
                return Err(format!(
                    "{}: final {:?} inconsistent with stage outcomes",
                    t.question_id, t.verdict
                ));
            }
        }

        // (c) CLI ablation: dropping stage K flips exactly the questions
        // whose sole failure was stage K, and flips them to Valid.
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = write_cli_workspace(dir.path())?;
        let dataset = dir.path().join("corpus.jsonl");
        let base_dir = dir.path().join("base");
        let out = mathq(&[
            "verify",
            "--dataset",
            &dataset.display().to_string(),
            "--config",
            &config.display().to_string(),
            "--out",
            &base_dir.display().to_string(),
        ]);
        expect_success(&out, "baseline verify")?;
        let base = verdicts_by_id(&base_dir.join("traces.jsonl"))?;

        for stage in StageId::ALL {
            let out_dir = dir.path().join(format!("ablate-{}", stage.as_str()));
            let out = mathq(&[
                "verify",
                "--dataset",
                &dataset.display().to_string(),
                "--config",
                &config.display().to_string(),
                "--out",
                &out_dir.display().to_string(),
                "--ablate",
                stage.as_str(),
            ]);
            expect_success(&out, &format!("verify --ablate {}", stage.as_str()))?;
            let ablated = verdicts_by_id(&out_dir.join("traces.jsonl"))?;
            for q in set.records() {
                let sole_failure_here =
                    q.label.expect("labeled corpus").error_category.stage() == Some(stage);
                let flipped = ablated[&q.id] != base[&q.id];
                if flipped != sole_failure_here {
                    return Err(format!(
                        "--ablate {}: {} flipped={flipped}, sole-failure={sole_failure_here}",
                        stage.as_str(),
                        q.id
                    ));
                }
                if flipped && ablated[&q.id] != FinalVerdict::Valid {
                    return Err(format!(
                        "--ablate {}: {} flipped to {:?}, expected Valid",
                        stage.as_str(),
                        q.id,
                        ablated[&q.id]
                    ));
                }
            }
        }
        Ok(format!(
            "finals agree across modes on {} questions; ablation flips exactly the sole-failure set per stage",
            set.len()
        ))
    });
}

#[test]
fn determinism_and_resume() {
    criterion("determinism-and-resume", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = write_cli_workspace(dir.path())?;
        let dataset = dir.path().join("corpus.jsonl");

        // A cached config variant for the resumed run.
        let cached_config = dir.path().join("run-cached.toml");
        let base_toml = fs::read_to_string(&config).map_err(|e| e.to_string())?;
        fs::write(
            &cached_config,
            format!(
                "cache_dir = \"{}\"\n{base_toml}",
                dir.path().join("cache").display()
            ),
        )
        .map_err(|e| e.to_string())?;

        // The first twelve questions stand in for an interrupted run.
        let head_path = dir.path().join("corpus-head.jsonl");
        let head = QuestionSet::new(
            common::corpus_questions().into_iter().take(12).collect(),
            head_path.display().to_string(),
        )
        .map_err(|e| e.to_string())?;
        save_dataset(&head, &head_path).map_err(|e| e.to_string())?;

        let verify = |dataset: &Path, config: &Path, out: &Path| -> Result<(), String> {
            let output = mathq(&[
                "verify",
                "--dataset",
                &dataset.display().to_string(),
                "--config",
                &config.display().to_string(),
                "--out",
                &out.display().to_string(),
            ]);
            expect_success(&output, "verify")
        };

        // Two independent runs are byte-identical.
        let run_a = dir.path().join("a");
        let run_b = dir.path().join("b");
        verify(&dataset, &config, &run_a)?;
        verify(&dataset, &config, &run_b)?;
        let bytes_a = fs::read(run_a.join("traces.jsonl")).map_err(|e| e.to_string())?;
        let bytes_b = fs::read(run_b.join("traces.jsonl")).map_err(|e| e.to_string())?;
        if bytes_a != bytes_b {
            return Err("two identical runs produced different trace bytes".to_string());
        }

        // Interrupt-and-resume: a partial run into the same directory with a
        // warm cache, then the full dataset, equals the uninterrupted run.
        let resumed = dir.path().join("resumed");
        verify(&head_path, &cached_config, &resumed)?;
        verify(&dataset, &cached_config, &resumed)?;
        let bytes_resumed =
            fs::read(resumed.join("traces.jsonl")).map_err(|e| e.to_string())?;
        if bytes_resumed != bytes_a {
            return Err("resumed run differs from an uninterrupted run".to_string());
        }
        Ok(format!(
            "trace files are byte-identical across reruns and across interrupt-resume ({} bytes)",
            bytes_a.len()
        ))
    });
}

fn random_soup(rng: &mut StdRng, tokens: &[&str], max_segments: usize) -> String {
    let segments = rng.gen_range(0..max_segments);
    let mut s = String::new();
    for _ in 0..segments {
        if rng.gen_bool(0.2) {
            s.push_str(tokens[rng.gen_range(0..tokens.len())]);
        } else {
            s.push(char::from_u32(rng.gen_range(0x20..0x2FF)).unwrap_or('x'));
        }
    }
    s
}

#[test]
fn verdict_parsing_totality() {
    criterion("verdict-parsing-totality", || {
        let mut rng = StdRng::seed_from_u64(0x5eed_cafe);
        let tokens = [
            "VERDICT",
            "PASS",
            "FAIL",
            ":",
            "\n",
            "MATH-QUESTION",
            "YES",
            "NO",
            "**",
            "- ",
            "> ",
            "verdict",
        ];
        let mut seen = BTreeSet::new();
        for _ in 0..10_000 {
            let s = random_soup(&mut rng, &tokens, 80);
            let parsed = extract_verdict(&s);
            // Reaching here without a panic is the point; record the
            // outcome to show all three variants actually occur.
            seen.insert(match parsed.outcome {
                StageOutcome::Pass => "pass",
                StageOutcome::Fail => "fail",
                StageOutcome::Invalid => "invalid",
            });
        }
        if seen.len() != 3 {
            return Err(format!(
                "fuzz corpus only reached outcomes {seen:?}; widen the generator"
            ));
        }

        let mut outcome_checked = 0u32;
        for i in 0..1_000 {
            let prefix = random_soup(&mut rng, &tokens, 40);
            let (suffix, want) = if i % 2 == 0 {
                ("\nVERDICT: PASS", StageOutcome::Pass)
            } else {
                ("\nVERDICT: FAIL", StageOutcome::Fail)
            };
            let s = format!("{prefix}{suffix}");
            let parsed = extract_verdict(&s);
            if parsed.parse_source != ParseSource::RuleBased {
                return Err(format!(
                    "well-formed final verdict line not parsed rule-based for {s:?}"
                ));
            }
            // A prefix that happens to spell out all three surface flags
            // legitimately overrides the verdict line; skip only those.
            let lower = prefix.to_lowercase();
            let flags_possible =
                lower.contains("question") && (lower.contains("cue") || lower.contains("leak"));
            if !flags_possible {
                if parsed.outcome != want {
                    return Err(format!(
                        "final {suffix:?} parsed as {:?} for prefix {prefix:?}",
                        parsed.outcome
                    ));
                }
                outcome_checked += 1;
            }
        }
        Ok(format!(
            "10000 fuzz strings parse totally (all three outcomes observed); {outcome_checked} suffixed strings honor the final verdict line"
        ))
    });
}

#[test]
fn oracle_retention_distribution() {
    criterion("oracle-retention-distribution", || {
        let set = common::corpus_set();
        let traces = common::oracle_pipeline(ExecutionMode::FullTrace)
            .verify_dataset(&set)
            .map_err(|e| e.to_string())?;
        let report = filter_valid(&traces);

        let retained: BTreeSet<&str> = report.retained.iter().map(String::as_str).collect();
        let labeled_valid: BTreeSet<&str> = set
            .records()
            .iter()
            .filter(|q| q.label.expect("labeled corpus").validity)
            .map(|q| q.id.as_str())
            .collect();
        if retained != labeled_valid {
            return Err(format!(
                "retained set {retained:?} differs from labeled-valid set {labeled_valid:?}"
            ));
        }
        let unjudgeable: BTreeSet<&str> =
            report.unjudgeable.iter().map(String::as_str).collect();
        if unjudgeable != common::GARBLED_IDS.iter().copied().collect() {
            return Err(format!(
                "unjudgeable set {unjudgeable:?} should be exactly the garbled questions"
            ));
        }

        let binning = Binning::default();
        let subset = |ids: &BTreeSet<&str>| -> Vec<MathQuestion> {
            set.records()
                .iter()
                .filter(|q| ids.contains(q.id.as_str()))
                .cloned()
                .collect()
        };
        let retained_table = DistributionTable::from_records(&subset(&retained), binning);
        let valid_table = DistributionTable::from_records(&subset(&labeled_valid), binning);
        let divergence =
            compare_distributions(&retained_table, &valid_table).map_err(|e| e.to_string())?;
        if divergence.total_variation != 0.0 {
            return Err(format!(
                "total variation {} between retained and labeled-valid distributions",
                divergence.total_variation
            ));
        }
        Ok(format!(
            "retained set equals the {} labeled-valid questions; distribution divergence is exactly 0",
            labeled_valid.len()
        ))
    });
}

#[test]
fn score_bounds_and_identity() {
    criterion("score-bounds-and-identity", || {
        let mut rng = StdRng::seed_from_u64(0xfeed_beef);
        let mut degenerate_seen = 0u32;
        for case in 0..1_000 {
            // Small ranges early so zero denominators actually occur.
            let bound = if case % 2 == 0 { 4 } else { 10_000 };
            let c = ConfusionCounts {
                true_positive: rng.gen_range(0..bound),
                false_positive: rng.gen_range(0..bound),
                true_negative: rng.gen_range(0..bound),
                false_negative: rng.gen_range(0..bound),
                invalid_excluded: rng.gen_range(0..bound),
            };
            let s = compute_scores(c);
            for (name, value) in [
                ("accuracy", s.accuracy),
                ("precision", s.precision),
                ("recall", s.recall),
                ("f1", s.f1),
            ] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(format!("{name} out of bounds: {value} for {c:?}"));
                }
            }
            let total = c.true_positive + c.false_positive + c.true_negative + c.false_negative;
            let checks = [
                ("accuracy", s.degenerate.accuracy, total == 0, s.accuracy),
                (
                    "precision",
                    s.degenerate.precision,
                    c.true_positive + c.false_positive == 0,
                    s.precision,
                ),
                (
                    "recall",
                    s.degenerate.recall,
                    c.true_positive + c.false_negative == 0,
                    s.recall,
                ),
                (
                    "f1",
                    s.degenerate.f1,
                    s.precision + s.recall == 0.0,
                    s.f1,
                ),
            ];
            for (name, flagged, should_flag, value) in checks {
                if flagged != should_flag {
                    return Err(format!(
                        "{name} degenerate flag {flagged} but denominator-zero is {should_flag} for {c:?}"
                    ));
                }
                if flagged && value != 0.0 {
                    return Err(format!("{name} flagged degenerate but reported {value}"));
                }
                if flagged {
                    degenerate_seen += 1;
                }
            }
            if !s.degenerate.f1 {
                let harmonic = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                if (s.f1 - harmonic).abs() > 1e-12 {
                    return Err(format!(
                        "f1 {} violates the harmonic identity {harmonic} for {c:?}",
                        s.f1
                    ));
                }
            }
        }
        let zeros = compute_scores(ConfusionCounts::default());
        let all_flagged = zeros.degenerate.accuracy
            && zeros.degenerate.precision
            && zeros.degenerate.recall
            && zeros.degenerate.f1;
        if !all_flagged
            || zeros.accuracy != 0.0
            || zeros.precision != 0.0
            || zeros.recall != 0.0
            || zeros.f1 != 0.0
        {
            return Err("all-zero counts must flag every score as degenerate zero".to_string());
        }
        if degenerate_seen == 0 {
            return Err("random corpus never hit a degenerate case; widen ranges".to_string());
        }
        Ok(format!(
            "1000 random confusion counts respect bounds and the F1 identity; {degenerate_seen} degenerate scores flagged"
        ))
    });
}

/// Live smoke test against a real endpoint. Off by default; run with
/// `cargo test --test acceptance -- --ignored` after exporting
/// MATHQ_SMOKE_BASE_URL, MATHQ_SMOKE_MODEL, and MATHQ_API_KEY.
#[test]
#[ignore = "live endpoint smoke test; set MATHQ_SMOKE_BASE_URL and MATHQ_SMOKE_MODEL"]
fn live_endpoint_smoke() {
    criterion("live-endpoint-smoke", || {
        let (Ok(base_url), Ok(model)) = (
            std::env::var("MATHQ_SMOKE_BASE_URL"),
            std::env::var("MATHQ_SMOKE_MODEL"),
        ) else {
            return Ok("skipped: MATHQ_SMOKE_BASE_URL / MATHQ_SMOKE_MODEL not set".to_string());
        };
        let questions = vec![
            MathQuestion::new(
                "live-clean",
                "What is the sum of the first 15 positive even integers?",
            ),
            MathQuestion::new(
                "live-contaminated",
                "Please rewrite this problem so it is easier: find all roots of x^2 - 5x + 6 = 0.",
            ),
            MathQuestion::new(
                "live-negative-area",
                "A rectangle has area -24 and width 4. What is its length?",
            ),
            MathQuestion::new("live-missing-goal", "Let x and y be primes with x + y = 30."),
            MathQuestion::new(
                "live-contradiction",
                "Let n be an even prime greater than 10. How many positive divisors does n have?",
            ),
        ];
        let set = QuestionSet::new(questions, "live-smoke").map_err(|e| e.to_string())?;
        let mut config = PipelineConfig::new(ModelEndpoint::remote(&model, &base_url));
        config.concurrency_limit = 2;
        let pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;
        let traces = pipeline.verify_dataset(&set).map_err(|e| e.to_string())?;
        if traces.len() != 5 {
            return Err(format!("expected 5 traces, got {}", traces.len()));
        }
        // Judgments are observed, not asserted; the contract is that every
        // trace is complete and round-trips.
        for t in &traces {
            let line = serde_json::to_string(t).map_err(|e| e.to_string())?;
            serde_json::from_str::<mathq_verify::VerificationTrace>(&line)
                .map_err(|e| e.to_string())?;
        }
        let verdicts: Vec<String> = traces
            .iter()
            .map(|t| format!("{}={:?}", t.question_id, t.verdict))
            .collect();
        Ok(format!("observed verdicts: {}", verdicts.join(", ")))
    });
}
