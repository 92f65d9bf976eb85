//! Subcommand driver for the `mathq` binary.
//!
//! A thin single-threaded layer: parse flags, load artifacts, call the
//! library, print a summary. Concurrency lives in the pipeline; nothing here
//! mutates its inputs. Exit policy: data-quality findings (invalid or
//! unjudgeable questions) are results and exit 0; config, schema, and IO
//! problems exit nonzero with a message on stderr. The one exception is
//! `validate-dataset`, whose whole purpose is to reject bad files.
//!
//! Stdout is written through fallible handles: when a downstream reader
//! closes the pipe early (`mathq stats | head`), the broken-pipe error is
//! recognized in `run` and the process exits quietly with success instead
//! of panicking. SIGPIPE stays ignored so remote-endpoint socket errors
//! surface as retryable IO errors rather than killing the process.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mathq_verify::config::RunConfig;
use mathq_verify::dataset::{
    compare_distributions, dataset_stats, load_dataset, validate_file, write_distribution_csv,
    Binning, DistributionTable, SchemaKind,
};
use mathq_verify::ensemble::{
    load_votes, save_votes, sweep_configs, votes_from_traces, EnsembleConfig, VoteVector,
};
use mathq_verify::metrics::{
    compute_scores, confusion, invalid_count, stepwise_accuracy, write_summary_csv,
    write_voting_csv, EvaluationReport, Prediction, Scores, StepwiseMode, VotingReportRow,
};
use mathq_verify::pipeline::{filter_valid, load_traces, ExecutionMode, Pipeline};
use mathq_verify::{StageId, VerificationTrace};

#[derive(Parser)]
#[command(
    name = "mathq",
    version,
    about = "Five-stage validity checking for natural-language math questions"
)]
struct Cli {
    /// Increase log detail (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification pipeline over a dataset and write a trace file.
    Verify(VerifyArgs),
    /// Score a trace file against a labeled dataset.
    Eval(EvalArgs),
    /// Sweep (n,k) ensemble configurations over stored votes.
    Vote(VoteArgs),
    /// Report dataset composition; optionally compare two distributions.
    Stats(StatsArgs),
    /// Lint a dataset file, reporting every violation.
    ValidateDataset(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeFlag {
    /// Stop at the first failing stage.
    EarlyExit,
    /// Run every enabled stage regardless of failures.
    Full,
}

impl From<ModeFlag> for ExecutionMode {
    fn from(m: ModeFlag) -> Self {
        match m {
            ModeFlag::EarlyExit => ExecutionMode::EarlyExit,
            ModeFlag::Full => ExecutionMode::FullTrace,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemaFlag {
    /// Every record must carry a label.
    Labeled,
    /// Labels are optional but checked when present.
    Unlabeled,
}

impl From<SchemaFlag> for SchemaKind {
    fn from(s: SchemaFlag) -> Self {
        match s {
            SchemaFlag::Labeled => SchemaKind::Labeled,
            SchemaFlag::Unlabeled => SchemaKind::Unlabeled,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// Questions to verify (JSONL; labels optional and ignored).
    #[arg(long)]
    dataset: PathBuf,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for traces.jsonl, manifest.json, and id lists.
    #[arg(long)]
    out: PathBuf,
    /// Verify with this configured endpoint instead of the default verifier.
    #[arg(long)]
    model: Option<String>,
    /// Execution mode, overriding the config.
    #[arg(long, value_enum)]
    mode: Option<ModeFlag>,
    /// Disable stages, e.g. --ablate s4 or --ablate s4,s5.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Worker thread count, overriding the config.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Ignore any configured completion cache.
    #[arg(long)]
    no_cache: bool,
    /// Prompt template directory, overriding the config.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trace file, or a run directory containing traces.jsonl.
    #[arg(long)]
    traces: PathBuf,
    /// Labeled dataset supplying ground truth.
    #[arg(long)]
    dataset: PathBuf,
    /// Write the one-row summary CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VoteArgs {
    /// Stored vote file (JSONL).
    #[arg(long, conflicts_with = "traces")]
    votes: Option<PathBuf>,
    /// Per-model trace files or run directories (comma-separated).
    #[arg(long, value_delimiter = ',')]
    traces: Vec<PathBuf>,
    /// Labeled dataset supplying ground truth.
    #[arg(long)]
    dataset: PathBuf,
    /// Ensemble shapes to sweep, e.g. 3:1,3:2,3:3.
    #[arg(long, value_delimiter = ',', required = true)]
    configs: Vec<String>,
    /// Ballot order; each n:k shape uses the first n (default: stored order).
    #[arg(long, value_delimiter = ',')]
    voters: Vec<String>,
    /// With --traces, also write the assembled vote store here.
    #[arg(long)]
    save_votes: Option<PathBuf>,
    /// Write the sweep CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset to summarize (labels optional).
    #[arg(long)]
    dataset: PathBuf,
    /// Second dataset; prints the distribution divergence against it.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Difficulty bin width.
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Write the category x difficulty distribution CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset file to lint.
    #[arg(long)]
    dataset: PathBuf,
    /// Schema to enforce.
    #[arg(long, value_enum, default_value_t = SchemaFlag::Labeled)]
    schema: SchemaFlag,
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Verify(args) => cmd_verify(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Vote(args) => cmd_vote(args),
        Command::Stats(args) => cmd_stats(args),
        Command::ValidateDataset(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            // Best effort: a closed stderr has nobody left to tell.
            writeln!(io::stderr(), "error: {e:#}").ok();
            ExitCode::FAILURE
        }
    }
}

/// A reader hanging up mid-output is the user saying "enough", not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause
            .downcast_ref::<io::Error>()
            .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

/// `--traces` accepts either the trace file itself or the run directory
/// `verify` wrote.
fn resolve_traces_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("traces.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for id in ids {
        writeln!(out, "{id}").with_context(|| format!("writing {}", path.display()))?;
    }
    out.flush()
        .with_context(|| format!("writing {}", path.display()))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let run = RunConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    let mut config = match &args.model {
        Some(id) => run.pipeline_config_for(id)?,
        None => run.pipeline_config()?,
    };
    if let Some(mode) = args.mode {
        config.mode = mode.into();
    }
    for name in &args.ablate {
        let stage: StageId = name.parse().map_err(|e| anyhow!("--ablate: {e}"))?;
        if !config.stage_mask.remove(&stage) {
            bail!("--ablate {name}: stage is not in the configured mask");
        }
    }
    if let Some(c) = args.concurrency {
        config.concurrency_limit = c;
    }
    if args.no_cache {
        config.cache_dir = None;
    }
    if let Some(dir) = &args.templates {
        config.templates_dir = Some(dir.clone());
    }

    let set = load_dataset(&args.dataset, SchemaKind::Unlabeled)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let pipeline = Pipeline::new(config)?;
    let traces = pipeline.run_to_dir(&set, &args.out)?;

    let report = filter_valid(&traces);
    write_id_list(&args.out.join("retained.txt"), &report.retained)?;
    write_id_list(&args.out.join("unjudgeable.txt"), &report.unjudgeable)?;

    let invalid = traces.len() - report.retained.len() - report.unjudgeable.len();
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "verified {} questions with {}: {} valid, {} invalid, {} unjudgeable",
        traces.len(),
        pipeline.config().endpoint.model_id,
        report.retained.len(),
        invalid,
        report.unjudgeable.len()
    )?;
    writeln!(out, "traces: {}", args.out.join("traces.jsonl").display())?;
    Ok(())
}

fn print_scores(out: &mut impl Write, s: &Scores) -> io::Result<()> {
    writeln!(
        out,
        "accuracy {}  precision {}  recall {}  f1 {}",
        pct(s.accuracy),
        pct(s.precision),
        pct(s.recall),
        pct(s.f1)
    )?;
    if s.degenerate.accuracy || s.degenerate.precision || s.degenerate.recall || s.degenerate.f1 {
        writeln!(
            out,
            "note: some scores are degenerate (empty denominator reported as 0)"
        )?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let trace_path = resolve_traces_path(&args.traces);
    let traces = load_traces(&trace_path)?;
    if traces.is_empty() {
        bail!("{}: no traces to evaluate", trace_path.display());
    }
    let set = load_dataset(&args.dataset, SchemaKind::Labeled).with_context(|| {
        format!(
            "loading dataset {} (eval requires labels)",
            args.dataset.display()
        )
    })?;
    let labels = set.validity_labels().expect("labeled schema");
    let categories = set.category_labels().expect("labeled schema");

    let mut predictions = BTreeMap::new();
    for t in &traces {
        let pred = Prediction::from_final(t.verdict);
        if predictions.insert(t.question_id.clone(), pred).is_some() {
            bail!(
                "{}: duplicate trace for question {:?}",
                trace_path.display(),
                t.question_id
            );
        }
    }
    let c = confusion(&predictions, &labels)?;
    // Stepwise attribution needs full traces; EarlyExit runs legitimately
    // lack them, so the failure becomes a note rather than an error.
    let (stepwise, stepwise_note) =
        match stepwise_accuracy(&traces, &categories, StepwiseMode::FinalDetection) {
            Ok(table) => (Some(table), None),
            Err(e) => (None, Some(e.to_string())),
        };
    let report = EvaluationReport {
        model_id: traces[0].model_id.clone(),
        confusion: c,
        scores: compute_scores(c),
        invalid_count: invalid_count(&traces),
        stepwise,
        stepwise_note,
    };

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{}: {} traces (tp {}  fp {}  tn {}  fn {})",
        report.model_id,
        traces.len(),
        c.true_positive,
        c.false_positive,
        c.true_negative,
        c.false_negative
    )?;
    print_scores(&mut out, &report.scores)?;
    writeln!(out, "verdict-extraction failures: {}", report.invalid_count)?;
    match (&report.stepwise, &report.stepwise_note) {
        (Some(t), _) => {
            writeln!(out, "stepwise detection:")?;
            for (name, slice) in [
                ("s1+s2", t.s1_s2),
                ("s3", t.s3),
                ("s4", t.s4),
                ("s5", t.s5),
            ] {
                writeln!(
                    out,
                    "  {name}: {} ({}/{})",
                    pct(slice.rate()),
                    slice.detected,
                    slice.size
                )?;
            }
        }
        (None, Some(note)) => writeln!(out, "stepwise detection unavailable: {note}")?,
        (None, None) => unreachable!("absent table always carries a note"),
    }
    if let Some(path) = &args.out {
        let file =
            File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_summary_csv(BufWriter::new(file), std::slice::from_ref(&report))?;
        writeln!(out, "summary csv: {}", path.display())?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<EnsembleConfig> {
    let (n, k) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("--configs entry {s:?} is not of the form n:k"))?;
    let n = n
        .trim()
        .parse::<usize>()
        .with_context(|| format!("--configs entry {s:?}: bad n"))?;
    let k = k
        .trim()
        .parse::<usize>()
        .with_context(|| format!("--configs entry {s:?}: bad k"))?;
    Ok(EnsembleConfig::new(n, k)?)
}

fn cmd_vote(args: &VoteArgs) -> Result<()> {
    let store: BTreeMap<String, VoteVector> = if let Some(path) = &args.votes {
        if args.save_votes.is_some() {
            bail!("--save-votes only applies when assembling from --traces");
        }
        load_votes(path)?
    } else if !args.traces.is_empty() {
        let mut runs: Vec<Vec<VerificationTrace>> = Vec::with_capacity(args.traces.len());
        for path in &args.traces {
            runs.push(load_traces(resolve_traces_path(path))?);
        }
        let store = votes_from_traces(&runs)?;
        if let Some(path) = &args.save_votes {
            save_votes(path, &store)?;
            writeln!(io::stdout(), "vote store: {}", path.display())?;
        }
        store
    } else {
        bail!("vote needs --votes FILE or --traces RUN,RUN,...");
    };

    let set = load_dataset(&args.dataset, SchemaKind::Labeled).with_context(|| {
        format!(
            "loading dataset {} (vote requires labels)",
            args.dataset.display()
        )
    })?;
    let labels = set.validity_labels().expect("labeled schema");

    let roster: Vec<String> = if args.voters.is_empty() {
        store
            .values()
            .next()
            .map(|v| v.votes.iter().map(|mv| mv.model_id.clone()).collect())
            .unwrap_or_default()
    } else {
        args.voters.clone()
    };

    let mut configs = Vec::with_capacity(args.configs.len());
    for entry in &args.configs {
        let shape = parse_shape(entry)?;
        if shape.n > roster.len() {
            bail!(
                "--configs {entry}: needs {} voters but only {} are available ({})",
                shape.n,
                roster.len(),
                roster.join(", ")
            );
        }
        configs.push((shape, roster[..shape.n].to_vec()));
    }

    let rows = sweep_configs(&store, &labels, &configs)?;
    let mut out = io::stdout().lock();
    print_vote_table(&mut out, &rows)?;
    if let Some(path) = &args.out {
        let file =
            File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_voting_csv(BufWriter::new(file), &rows)?;
        writeln!(out, "sweep csv: {}", path.display())?;
    }
    Ok(())
}

fn print_vote_table(out: &mut impl Write, rows: &[VotingReportRow]) -> io::Result<()> {
    writeln!(
        out,
        "{:>2} {:>2}  {:>9} {:>9} {:>9} {:>6} {:>6}  voters",
        "n", "k", "precision", "recall", "f1", "tp", "fp"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:>2} {:>2}  {:>9} {:>9} {:>9} {:>6} {:>6}  {}",
            r.n,
            r.k,
            pct(r.scores.precision),
            pct(r.scores.recall),
            pct(r.scores.f1),
            r.confusion.true_positive,
            r.confusion.false_positive,
            r.voters.join("+")
        )?;
    }
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let set = load_dataset(&args.dataset, SchemaKind::Unlabeled)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let binning = Binning {
        width: args.bin_width,
        origin: 0.0,
    };
    let stats = dataset_stats(&set, binning)?;

    let mut out = io::stdout().lock();
    writeln!(out, "{}: {} questions", args.dataset.display(), stats.total)?;
    writeln!(out, "math categories:")?;
    for (category, count) in &stats.category_counts {
        writeln!(out, "  {category}: {count}")?;
    }
    if let Some(tally) = &stats.labels {
        writeln!(
            out,
            "labels: {} valid, {} invalid",
            tally.valid,
            tally.invalid_total()
        )?;
        for (category, count) in &tally.per_error {
            writeln!(out, "  {}: {count}", category.as_str())?;
        }
    }
    if let Some(path) = &args.out {
        let file =
            File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_distribution_csv(BufWriter::new(file), &stats.distribution)?;
        writeln!(out, "distribution csv: {}", path.display())?;
    }
    if let Some(other_path) = &args.compare {
        let other = load_dataset(other_path, SchemaKind::Unlabeled)
            .with_context(|| format!("loading dataset {}", other_path.display()))?;
        let other_table = DistributionTable::from_records(other.records(), binning);
        let divergence = compare_distributions(&stats.distribution, &other_table)?;
        writeln!(
            out,
            "total variation vs {}: {:.4}",
            other_path.display(),
            divergence.total_variation
        )?;
    }
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let issues = validate_file(&args.dataset, args.schema.into());
    let mut out = io::stdout().lock();
    for issue in &issues {
        writeln!(out, "line {}: {}", issue.line, issue.message)?;
    }
    if issues.is_empty() {
        writeln!(out, "{}: ok", args.dataset.display())?;
        Ok(())
    } else {
        bail!(
            "{}: {} invalid record(s)",
            args.dataset.display(),
            issues.len()
        )
    }
}
