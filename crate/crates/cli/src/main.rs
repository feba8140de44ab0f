//! `lance`: generate, evaluate and review counterfactual test suites.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use lance_core::backends::{from_name, replay::recording_backends, Backends};
use lance_core::edit::CounterfactualRecord;
use lance_core::evaluation::{evaluate_run, DeltaMode, ReportOptions};
use lance_core::fixtures::write_fixture_suite;
use lance_core::gates::audit;
use lance_core::insights::{class_reports, delta_p_by_record, write_reports, InsightOptions};
use lance_core::model::{
    load_config, Baseline, LogicalClock, ManifestWriter, Payload, PerturbMode, PerturbationType, PipelineConfig, RunView,
    TestSuite,
};
use lance_core::perturbation::collect_finetune_dataset;
use lance_core::pipeline::{run_lance, ClockKind, RunOptions};
use lance_core::review::ReviewStore;
use lance_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_ABORTED: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "lance", version, about = "Language-guided counterfactual stress tests for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Exhaustive,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Lance,
    LanceR,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a counterfactual suite; resumes an existing run in --out.
    Generate {
        #[arg(long)]
        suite: PathBuf,
        /// JSON config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum, default_value = "lance")]
        baseline: BaselineArg,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Stamp records with wall-clock time instead of the logical clock.
        #[arg(long)]
        wall_clock: bool,
        /// Record every backend call to this replay fixture.
        #[arg(long)]
        record_replay: Option<PathBuf>,
        /// Stop after this many samples.
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Score the original, reconstructed and counterfactual suites.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "stub")]
        classifier: String,
        /// Compare each counterfactual with its own source image.
        #[arg(long)]
        paired: bool,
        #[arg(long)]
        include_random: bool,
        /// Report directory; defaults to `<manifest dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster accepted edits per class and rank clusters by confidence drop.
    Insights {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "stub")]
        classifier: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "type")]
        only_type: Option<PerturbationType>,
        /// Defaults to `<manifest dir>/insights`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect instruction-tuning triples for the caption perturber.
    CollectDataset {
        /// A run manifest or a text file with one caption per line.
        #[arg(long)]
        captions: PathBuf,
        /// Triples per perturbation type.
        #[arg(long, default_value_t = 100)]
        per_type: usize,
        #[arg(long, default_value = "stub")]
        backend: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive every stored gate decision and report mismatches.
    GateAudit {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Serve the review API for a run.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write the stub fixture suite.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

/// A failure and the exit status it maps to.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ConfigParse(_) | Error::ConfigInvalid { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_ABORTED,
        };
        Failure(code, e.to_string())
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate {
            suite,
            config,
            out,
            mode,
            baseline,
            run_id,
            wall_clock,
            record_replay,
            max_samples,
        } => generate(GenerateArgs {
            suite,
            config,
            out,
            mode,
            baseline,
            run_id,
            wall_clock,
            record_replay,
            max_samples,
        }),
        Command::Evaluate {
            manifest,
            classifier,
            paired,
            include_random,
            out,
        } => evaluate(&manifest, &classifier, paired, include_random, out),
        Command::Insights {
            manifest,
            classifier,
            k,
            only_type,
            out,
        } => insights(&manifest, &classifier, k, only_type, out),
        Command::CollectDataset {
            captions,
            per_type,
            backend,
            seed,
            out,
        } => collect_dataset(&captions, per_type, &backend, seed, &out),
        Command::GateAudit { manifest } => gate_audit(&manifest),
        Command::Serve { manifest, addr } => serve(&manifest, addr),
        Command::Fixtures { out, count } => write_fixture_suite(&out, count)
            .map(|s| {
                println!("wrote {} fixture images to {}", s.len(), out.display());
                0
            })
            .map_err(Failure::from),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

struct GenerateArgs {
    suite: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    mode: Option<Mode>,
    baseline: BaselineArg,
    run_id: String,
    wall_clock: bool,
    record_replay: Option<PathBuf>,
    max_samples: Option<usize>,
}

fn generate(args: GenerateArgs) -> CmdResult {
    let mut config = match &args.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = args.mode {
        config.mode = match m {
            Mode::Sample => PerturbMode::Sample,
            Mode::Exhaustive => PerturbMode::Exhaustive,
        };
    }
    config.validate()?;
    let suite = TestSuite::load_dir(&args.suite)?;
    let backends = from_name(&config.backend, config.seed)?;
    let (backends, log) = match &args.record_replay {
        Some(_) => {
            let (b, log) = recording_backends(backends);
            (b, Some(log))
        }
        None => (backends, None),
    };
    let options = RunOptions {
        run_id: args.run_id,
        baseline: match args.baseline {
            BaselineArg::Lance => Baseline::Lance,
            BaselineArg::LanceR => Baseline::LanceR,
        },
        clock: if args.wall_clock { ClockKind::System } else { ClockKind::Logical },
        sync: true,
        max_samples: args.max_samples,
    };
    let summary = run_lance(&suite, &args.suite, &config, &backends, &args.out, &options)?;
    if let (Some(path), Some(log)) = (&args.record_replay, log) {
        log.write(path)?;
    }
    println!(
        "{}: {}/{} samples, {} edits proposed, {} counterfactuals accepted of {} generated, {} skipped",
        summary.run_id,
        summary.completed,
        summary.samples,
        summary.proposed_edits,
        summary.accepted,
        summary.counterfactuals,
        summary.skipped
    );
    for (cause, n) in &summary.state.rejections {
        println!("  rejected by {cause}: {n}");
    }
    println!("manifest: {}", summary.manifest.display());
    Ok(if summary.skipped > 0 || !summary.finished() { EXIT_PARTIAL } else { 0 })
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Backends named in the run's own config snapshot.
fn run_backends(view: &RunView) -> Result<Backends, Failure> {
    Ok(from_name(&view.start.config.backend, view.start.config.seed)?)
}

/// Evaluates the run and appends predictions it did not already hold.
fn scored_view(manifest: &Path, classifier: &str, options: ReportOptions) -> Result<(RunView, lance_core::evaluation::Evaluation), Failure> {
    let view = RunView::load(manifest)?;
    let backends = run_backends(&view)?;
    let eval = evaluate_run(&view, &manifest_dir(manifest), &backends, classifier, options)?;
    let fresh: Vec<_> = eval
        .predictions
        .iter()
        .filter(|p| !view.predictions.iter().any(|q| q.record_id == p.record_id && q.classifier == p.classifier))
        .cloned()
        .collect();
    if !fresh.is_empty() {
        let mut w = ManifestWriter::open(manifest, view.run_id.clone(), Box::new(LogicalClock::default()))?;
        for p in fresh {
            w.append(Payload::Prediction(p))?;
        }
    }
    Ok((view, eval))
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| Failure(EXIT_ABORTED, format!("{}: {e}", path.display())))
}

fn evaluate(manifest: &Path, classifier: &str, paired: bool, include_random: bool, out: Option<PathBuf>) -> CmdResult {
    let options = ReportOptions {
        delta_mode: if paired { DeltaMode::Paired } else { DeltaMode::Suite },
        include_random,
    };
    let (_, eval) = scored_view(manifest, classifier, options)?;
    let out = out.unwrap_or_else(|| manifest_dir(manifest).join("report"));
    std::fs::create_dir_all(&out).map_err(|e| Failure(EXIT_ABORTED, format!("{}: {e}", out.display())))?;
    let report = &eval.report;
    write_file(&out.join("report.json"), &serde_json::to_string_pretty(report).map_err(Error::from)?)?;
    write_file(&out.join("report.txt"), &report.to_text())?;
    write_file(&out.join("per_type.csv"), &report.per_type_csv()?)?;
    write_file(&out.join("per_class.csv"), &report.per_class_csv()?)?;
    print!("{}", report.to_text());
    for (id, cause) in &eval.failures {
        eprintln!("not scored: {id}: {cause}");
    }
    Ok(if eval.failures.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn insights(manifest: &Path, classifier: &str, k: Option<usize>, only_type: Option<PerturbationType>, out: Option<PathBuf>) -> CmdResult {
    let (view, eval) = scored_view(manifest, classifier, ReportOptions::default())?;
    let backends = run_backends(&view)?;
    let delta_p = delta_p_by_record(&eval.predictions, classifier);
    let options = InsightOptions {
        k: k.unwrap_or(view.start.config.k_clusters),
        seed: view.start.config.seed,
        only_type,
    };
    let reports = class_reports(&view.counterfactuals, &delta_p, backends.joint_embed.as_ref(), options)?;
    let out = out.unwrap_or_else(|| manifest_dir(manifest).join("insights"));
    write_reports(&out, &reports)?;
    for r in &reports {
        print!("{}", r.to_text());
    }
    println!("reports: {}", out.display());
    Ok(0)
}

fn read_captions(path: &Path) -> Result<Vec<String>, Failure> {
    if let Ok(view) = RunView::load(path) {
        return Ok(view.captions.into_iter().map(|c| c.text).collect());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn collect_dataset(captions: &Path, per_type: usize, backend: &str, seed: u64, out: &Path) -> CmdResult {
    let captions = read_captions(captions)?;
    if captions.is_empty() {
        return Err(Failure(EXIT_USAGE, "no captions found".into()));
    }
    let backends = from_name(backend, seed)?;
    let quotas: BTreeMap<PerturbationType, usize> = PerturbationType::TYPED.iter().map(|t| (*t, per_type)).collect();
    let report = collect_finetune_dataset(&captions, backends.language_model.as_ref(), &quotas, out)?;
    for (t, n) in &report.counts {
        println!("{t}: {n}/{per_type}");
    }
    for (ci, t, cause) in &report.failures {
        eprintln!("caption {ci} ({t}): {cause}");
    }
    let short = report.counts.values().any(|n| *n < per_type);
    Ok(if short || !report.failures.is_empty() { EXIT_PARTIAL } else { 0 })
}

fn gate_audit(manifest: &Path) -> CmdResult {
    let view = RunView::load(manifest)?;
    let mut sets: Vec<(&str, &[lance_core::gates::GateResult])> = Vec::new();
    for e in &view.edits {
        sets.push((&e.id, &e.gates));
    }
    for c in &view.counterfactuals {
        sets.push((&c.id, &c.gates));
        for cand in &c.candidates {
            sets.push((&c.id, &cand.gates));
        }
    }
    let (checked, findings) = audit(sets);
    for f in &findings {
        println!("{}: {} stored {} but recomputes to {}", f.record_id, f.gate, f.stored, f.recomputed);
    }
    let inconsistent: Vec<&CounterfactualRecord> = view
        .counterfactuals
        .iter()
        .filter(|c| c.accepted && (c.gates.iter().any(|g| !g.passed) || c.revalidate(&view.start.config) == Some(false)))
        .collect();
    for c in &inconsistent {
        println!("{}: accepted but its gates do not all pass on recomputation", c.id);
    }
    println!(
        "checked {checked} gate results over {} records: {} mismatches, {} inconsistent acceptances",
        view.edits.len() + view.counterfactuals.len(),
        findings.len(),
        inconsistent.len()
    );
    Ok(if findings.is_empty() && inconsistent.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn serve(manifest: &Path, addr: SocketAddr) -> CmdResult {
    let store = ReviewStore::open(manifest, Box::new(LogicalClock::default()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure(EXIT_ABORTED, e.to_string()))?;
    println!("serving {} on http://{addr}", manifest.display());
    rt.block_on(lance_review::serve(Arc::new(store), addr))
        .map_err(|e| Failure(EXIT_ABORTED, e.to_string()))?;
    Ok(0)
}
