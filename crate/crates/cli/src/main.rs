use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ids_core::config::AblationMode;
use ids_core::flow::{load_labeled_flows, open_dataset, stratified_split};
use ids_core::library::{ExperienceLibrary, LibraryError};
use ids_core::metrics::{curve_to_csv, render_comparison, MetricsReport};
use ids_core::pipeline::{load_split, run_ablation, run_build, run_evaluate, BuildIo, RunReport, Runtime};
use ids_core::synthetic::{synthetic_flows, write_flows_csv, DEFAULT_PROTOTYPES};
use ids_core::RunConfig;

/// Experience-library intrusion detection: sample, build, evaluate, ablate.
#[derive(Parser, Debug)]
#[command(name = "ids", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sampling and generation seed.
    #[arg(long, global = true, env = "IDS_SEED")]
    seed: Option<u64>,
    /// Mock agents and the hash embedder; no network access.
    #[arg(long, global = true)]
    offline: bool,
    /// Retrieval similarity threshold in [-1, 1].
    #[arg(long, global = true, env = "IDS_TAU", allow_negative_numbers = true)]
    tau: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Default)]
struct DataArgs {
    /// Flow CSV, optionally gzip-compressed.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split manifest written by `sample`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Experience library file.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Directory for reports, curves and transcripts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    ZeroShot,
    LibraryOnly,
    Full,
}

impl From<Mode> for AblationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::ZeroShot => AblationMode::ZeroShot,
            Mode::LibraryOnly => AblationMode::LibraryOnly,
            Mode::Full => AblationMode::Full,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic flow dataset as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 625)]
        per_class: usize,
        #[arg(long, default_value_t = DEFAULT_PROTOTYPES)]
        prototypes: usize,
    },
    /// Draw a class-balanced build/eval split and write its manifest.
    Sample {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Total build-set size.
        #[arg(long)]
        build: Option<u64>,
        /// Total eval-set size.
        #[arg(long)]
        eval: Option<u64>,
        #[arg(long, default_value = "manifest.json")]
        out: PathBuf,
    },
    /// Construct the experience library from the build set.
    Build {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Continue an interrupted build from its checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Classify the eval set against a frozen library.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "library-only")]
        mode: Mode,
    },
    /// Full build, library-only and zero-shot runs on one split.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Rules per class in a library.
    Stats {
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Render saved reports as a comparison table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = cli.tau {
        cfg.tau = tau;
    }
    if cli.offline {
        cfg.make_offline();
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(d) = &data.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(m) = &data.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(l) = &data.library {
        cfg.library = l.clone();
    }
    if let Some(o) = &data.out_dir {
        cfg.output_dir = o.clone();
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Fail early, before any work, when the library cannot be written.
fn ensure_writable(path: &Path) -> Result<()> {
    let denied = |e: &std::io::Error| e.kind() == std::io::ErrorKind::PermissionDenied;
    if path.exists() {
        if let Err(e) = fs::OpenOptions::new().append(true).open(path) {
            if denied(&e) {
                return Err(LibraryError::ReadOnlyLibrary).with_context(|| path.display().to_string());
            }
            return Err(e.into());
        }
    }
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let probe = dir.join(".ids-write-probe");
    match fs::File::create(&probe) {
        Ok(_) => {
            fs::remove_file(&probe)?;
            Ok(())
        }
        Err(e) if denied(&e) => Err(LibraryError::ReadOnlyLibrary).with_context(|| path.display().to_string()),
        Err(e) => Err(e.into()),
    }
}

fn summarize(name: &str, r: &RunReport) {
    let m = r.metrics.as_ref();
    eprintln!(
        "{name}: {} flows, {} classified, {} errored, accuracy {:.2}%, macro F1 {:.2}%, library {} -> {}",
        r.total,
        r.classified,
        r.errored,
        m.map_or(0.0, |m| m.accuracy * 100.0),
        m.map_or(0.0, |m| m.macro_f1 * 100.0),
        r.library_before,
        r.library_after,
    );
}

fn cmd_synth(cfg: &RunConfig, out: &Path, per_class: usize, prototypes: usize) -> Result<()> {
    let flows = synthetic_flows(&cfg.classes, per_class, prototypes, cfg.seed);
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_flows_csv(std::io::BufWriter::new(file), &flows)?;
    eprintln!("wrote {} flows to {}", flows.len(), out.display());
    Ok(())
}

fn cmd_sample(cfg: &mut RunConfig, dataset: Option<PathBuf>, build: Option<u64>, eval: Option<u64>, out: &Path) -> Result<()> {
    if let Some(d) = dataset {
        cfg.dataset = Some(d);
    }
    cfg.quota_build = build.unwrap_or(cfg.quota_build);
    cfg.quota_eval = eval.unwrap_or(cfg.quota_eval);
    let path = cfg.dataset.as_ref().context("no dataset given (--dataset or config `dataset`)")?;
    let (flows, report) = load_labeled_flows(open_dataset(path)?, &cfg.schema_map, &cfg.classes)?;
    eprintln!(
        "read {} rows: {} accepted, {} rejected, {} values normalized",
        report.rows_read, report.rows_accepted, report.rows_rejected, report.normalized_values
    );
    let split = stratified_split(&flows, &cfg.classes, cfg.quota_build, cfg.quota_eval, cfg.seed)?;
    let manifest = split.manifest(cfg.quota_build, cfg.quota_eval);
    let mut text = manifest.to_json();
    text.push('\n');
    write_file(out, &text)?;
    println!("{:<16} {:>10} {:>10} {:>10} {:>8}", "Class", "Available", "Build", "Eval", "Deficit");
    for c in &manifest.classes {
        println!("{:<16} {:>10} {:>10} {:>10} {:>8}", c.class, c.available, c.build, c.eval, c.deficit);
    }
    Ok(())
}

fn cmd_build(cfg: &mut RunConfig, data: &DataArgs, mode: Option<Mode>, resume: bool) -> Result<()> {
    apply_data(cfg, data);
    if let Some(m) = mode {
        cfg.mode = m.into();
    }
    cfg.validate()?;
    ensure_writable(&cfg.library)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (build, _, _) = load_split(cfg)?;
    let mut rt = Runtime::from_config(cfg)?;
    let mut library = ExperienceLibrary::for_embedder(rt.embedder.as_ref());
    let io = BuildIo {
        library_path: Some(cfg.library.clone()),
        transcript_path: Some(cfg.output_dir.join("build_transcript.jsonl")),
        checkpoint_path: Some(cfg.output_dir.join("build.checkpoint")),
        resume,
    };
    let report = run_build(cfg, &build, &mut library, &mut rt, &io)?;
    write_file(&cfg.output_dir.join("build_curve.csv"), &curve_to_csv(&report.curve))?;
    write_file(&cfg.output_dir.join("build_report.json"), &report.to_json())?;
    summarize("build", &report);
    print!("{}", library.stats(&cfg.classes).render());
    Ok(())
}

fn cmd_evaluate(cfg: &mut RunConfig, data: &DataArgs, mode: Mode) -> Result<()> {
    apply_data(cfg, data);
    cfg.mode = mode.into();
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (_, eval, _) = load_split(cfg)?;
    let library = if cfg.mode.retrieves() {
        Some(ExperienceLibrary::load_read_only(&cfg.library).with_context(|| format!("opening {}", cfg.library.display()))?)
    } else {
        None
    };
    let rt = Runtime::from_config(cfg)?;
    let name = format!("eval_{}", cfg.mode.label());
    let transcript = cfg.output_dir.join(format!("{name}_transcript.jsonl"));
    let report = run_evaluate(cfg, &eval, library.as_ref(), &rt, Some(&transcript))?;
    write_file(&cfg.output_dir.join(format!("{name}.json")), &report.to_json())?;
    summarize(&name, &report);
    Ok(())
}

fn cmd_ablate(cfg: &mut RunConfig, data: &DataArgs) -> Result<()> {
    apply_data(cfg, data);
    cfg.validate()?;
    ensure_writable(&cfg.library)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (build, eval, _) = load_split(cfg)?;
    let io = BuildIo {
        library_path: Some(cfg.library.clone()),
        transcript_path: Some(cfg.output_dir.join("ablation_build_transcript.jsonl")),
        checkpoint_path: None,
        resume: false,
    };
    let make = || Runtime::from_config(cfg);
    let (report, _) = run_ablation(cfg, &build, &eval, &make, &io)?;
    let dir = &cfg.output_dir;
    write_file(&dir.join("ablation_full_build.json"), &report.full_build.to_json())?;
    write_file(&dir.join("ablation_library_only.json"), &report.library_only.to_json())?;
    write_file(&dir.join("ablation_zero_shot.json"), &report.zero_shot.to_json())?;
    write_file(&dir.join("ablation_full_curve.csv"), &curve_to_csv(&report.full_build.curve))?;
    write_file(&dir.join("ablation_zero_shot_curve.csv"), &curve_to_csv(&report.zero_shot_build_curve))?;
    write_file(&dir.join("ablation_table.txt"), &report.table)?;
    let mut summary = serde_json::to_string_pretty(&serde_json::json!({
        "split_hash": report.split_hash,
        "config_hash": cfg.hash(),
        "reports": ["ablation_full_build.json", "ablation_library_only.json", "ablation_zero_shot.json"],
        "table": report.table,
    }))?;
    summary.push('\n');
    write_file(&dir.join("ablation.json"), &summary)?;
    println!("split {}", report.split_hash);
    print!("{}", report.table);
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, library: Option<PathBuf>) -> Result<()> {
    let path = library.unwrap_or_else(|| cfg.library.clone());
    let lib = ExperienceLibrary::load_read_only(&path).with_context(|| format!("opening {}", path.display()))?;
    print!("{}", lib.stats(&cfg.classes).render());
    Ok(())
}

fn row_name(report: &serde_json::Value) -> String {
    let phase = report["phase"].as_str().unwrap_or("evaluate");
    match (phase, report["mode"].as_str().unwrap_or("")) {
        ("build", "full") => "Full (construction)".into(),
        ("build", m) => format!("{m} (construction)"),
        (_, "zero_shot") => "Zero-Shot".into(),
        (_, "library_only") => "Library Only".into(),
        (_, "full") => "Full".into(),
        (_, m) => m.to_string(),
    }
}

fn cmd_report(inputs: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let Some(m) = v.get("metrics").filter(|m| !m.is_null()) else {
            bail!("{} has no metrics", path.display());
        };
        let metrics: MetricsReport = serde_json::from_value(m.clone()).with_context(|| format!("metrics in {}", path.display()))?;
        rows.push((row_name(&v), metrics));
    }
    let baseline = rows.iter().position(|(n, _)| n == "Zero-Shot");
    print!("{}", render_comparison(&rows, baseline));
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth {
            out,
            per_class,
            prototypes,
        } => cmd_synth(&cfg, out, *per_class, *prototypes),
        Command::Sample {
            dataset,
            build,
            eval,
            out,
        } => cmd_sample(&mut cfg, dataset.clone(), *build, *eval, out),
        Command::Build { data, mode, resume } => cmd_build(&mut cfg, data, *mode, *resume),
        Command::Evaluate { data, mode } => cmd_evaluate(&mut cfg, data, *mode),
        Command::Ablate { data } => cmd_ablate(&mut cfg, data),
        Command::Stats { library } => cmd_stats(&cfg, library.clone()),
        Command::Report { inputs } => cmd_report(inputs),
    }
}
