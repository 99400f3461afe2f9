
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use spkguard_core::audio::{extract_dir, read_labels, ExtractOptions};
use spkguard_core::corpus::{generate_synthetic_corpus, CorpusManifest, FeatureSet};
use spkguard_core::eval::{build_report, MANIFEST_FILE};
use spkguard_core::runner::{self, RunError, RunOptions};
use spkguard_core::Dataset;

use spkguard_cli::config::{ConfigIssue, Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "spkguard", version, about = "Condition detection from speech with adversarial speaker unlearning")]
struct Cli {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding features, models and reports.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing outputs and retrain completed folds.
    #[arg(long, global = true)]
    force: bool,
    /// Built-in defaults applied before the config file.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Paper)]
    profile: Profile,
    /// Extra `KEY=VALUE` setting; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus into the run directory.
    Synth,
    /// Extract features from `<wav-dir>/<speaker>/<recording>.wav`.
    Extract {
        #[arg(long)]
        wav_dir: Option<PathBuf>,
        /// CSV with header `speaker_id,label,severity`.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Drop one random segment in four for victims.
        #[arg(long)]
        subsample_victims: bool,
    },
    /// Train one model family over all LOSO folds.
    Train {
        #[arg(value_enum)]
        model: Model,
        /// Feature file; defaults to `<run-dir>/features.csv`.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Summarize a run directory.
    Report {
        /// Write the CSV files only.
        #[arg(long)]
        csv_only: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Icm,
    Ism,
    Dam,
    Usm,
}

/// Failure classes with their exit codes.
enum Failure {
    /// Invalid input detected before any work (exit 1).
    Invalid(Vec<String>),
    /// Failure while working (exit 2).
    Runtime(String),
}

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure::Invalid(vec![msg.into()])
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_env("SPKGUARD_LOG")
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msgs)) => {
            for m in msgs {
                eprintln!("error: {m}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let mut issues: Vec<ConfigIssue> = Vec::new();
    cfg.apply_text(cli.profile.text(), cli.profile.source_name(), &mut issues);
    if let Some(path) = &cli.config {
        match fs::read_to_string(path) {
            Ok(text) => cfg.apply_text(&text, &path.display().to_string(), &mut issues),
            Err(e) => issues.push(ConfigIssue {
                source: path.display().to_string(),
                line: None,
                msg: e.to_string(),
            }),
        }
    }
    for (i, s) in cli.sets.iter().enumerate() {
        let issue = |msg: String| ConfigIssue {
            source: format!("--set #{}", i + 1),
            line: None,
            msg,
        };
        match s.split_once('=') {
            Some((k, v)) => {
                if let Err(m) = cfg.set(k.trim(), v.trim()) {
                    issues.push(issue(m));
                }
            }
            None => issues.push(issue(format!("expected KEY=VALUE, got {s:?}"))),
        }
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = Some(d.clone());
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::Extract {
            wav_dir,
            labels,
            subsample_victims,
        } => {
            if let Some(w) = wav_dir {
                cfg.wav_dir = Some(w.clone());
            }
            if let Some(l) = labels {
                cfg.labels = Some(l.clone());
            }
            cfg.subsample_victims |= subsample_victims;
        }
        Command::Train { features: Some(f), .. } => cfg.features = Some(f.clone()),
        _ => {}
    }
    cfg.validate(&mut issues);
    if cfg.run_dir.is_none() {
        issues.push(ConfigIssue {
            source: "config".into(),
            line: None,
            msg: "run_dir is required (--run-dir or run_dir = ...)".into(),
        });
    }
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Invalid(issues.iter().map(ToString::to_string).collect()))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let run_dir = cfg.run_dir.clone().expect("validated");
    match &cli.command {
        Command::Synth => cmd_synth(&cfg, &run_dir, cli.force),
        Command::Extract { .. } => cmd_extract(&cfg, &run_dir, cli.force),
        Command::Train { model, .. } => cmd_train(&cfg, &run_dir, *model, cli.force),
        Command::Report { csv_only } => cmd_report(&cfg, &run_dir, *csv_only),
    }
}

fn refuse_overwrite(run_dir: &Path, force: bool) -> Result<(), Failure> {
    let features = run_dir.join("features.csv");
    if features.exists() && !force {
        return Err(Failure::invalid(format!("{} already exists; pass --force to overwrite", features.display())));
    }
    Ok(())
}

fn print_corpus_summary(manifest: &CorpusManifest) {
    let b = manifest.class_balance();
    let total = b.victim_speakers + b.non_victim_speakers;
    println!(
        "speakers: {total} ({} victim, {} non-victim; {:.2}% / {:.2}%)",
        b.victim_speakers,
        b.non_victim_speakers,
        100.0 * b.victim_speakers as f64 / total.max(1) as f64,
        100.0 * b.non_victim_speakers as f64 / total.max(1) as f64,
    );
    println!(
        "frames: {} ({:.2}% victim, {:.2}% non-victim)",
        manifest.frame_count(),
        b.victim_frame_share(),
        100.0 - b.victim_frame_share()
    );
}

fn write_corpus(run_dir: &Path, manifest: &CorpusManifest, features: &FeatureSet) -> Result<(), Failure> {
    fs::create_dir_all(run_dir).map_err(|e| runtime(format!("{}: {e}", run_dir.display())))?;
    features.save(&run_dir.join("features.csv")).map_err(runtime)?;
    manifest.save(&run_dir.join(MANIFEST_FILE)).map_err(runtime)?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<(), Failure> {
    refuse_overwrite(run_dir, force)?;
    let (manifest, features) = generate_synthetic_corpus(&cfg.synth).map_err(runtime)?;
    write_corpus(run_dir, &manifest, &features)?;
    print_corpus_summary(&manifest);
    Ok(())
}

fn cmd_extract(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<(), Failure> {
    let mut missing = Vec::new();
    if cfg.wav_dir.is_none() {
        missing.push("wav_dir is required (--wav-dir)".to_string());
    }
    if cfg.labels.is_none() {
        missing.push("labels is required (--labels)".to_string());
    }
    if !missing.is_empty() {
        return Err(Failure::Invalid(missing));
    }
    refuse_overwrite(run_dir, force)?;
    let labels = read_labels(cfg.labels.as_ref().expect("checked")).map_err(|e| Failure::invalid(e.to_string()))?;
    let opts = ExtractOptions {
        analysis: cfg.analysis.clone(),
        subsample_victims: cfg.subsample_victims,
        seed: cfg.synth.seed,
    };
    let report = extract_dir(cfg.wav_dir.as_ref().expect("checked"), &labels, &opts).map_err(runtime)?;
    let manifest = CorpusManifest::from_features(&report.features);
    write_corpus(run_dir, &manifest, &report.features)?;
    print_corpus_summary(&manifest);
    for id in &report.degenerate {
        warn!("speaker {id}: constant audio, normalized to zeros");
    }
    if report.errors.is_empty() {
        Ok(())
    } else {
        for e in &report.errors {
            eprintln!("skipped: {e}");
        }
        Err(Failure::Runtime(format!("{} input(s) could not be used", report.errors.len())))
    }
}

fn describe_run_error(e: &RunError) -> String {
    match e {
        RunError::FoldsFailed { errors, .. } => {
            let mut s = e.to_string();
            for inner in errors {
                s.push_str(&format!("\n  {inner}"));
            }
            s
        }
        other => other.to_string(),
    }
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path, model: Model, force: bool) -> Result<(), Failure> {
    let features_path = cfg.features_path().expect("run_dir is set");
    if !features_path.is_file() {
        return Err(Failure::invalid(format!("feature file {} not found", features_path.display())));
    }
    let features = FeatureSet::load(&features_path).map_err(|e| Failure::invalid(e.to_string()))?;
    let data = Dataset::from_features(&features);
    if data.n_speakers() < 2 {
        return Err(Failure::invalid(format!("need at least 2 speakers, found {}", data.n_speakers())));
    }
    if model == Model::Usm {
        runner::dam_encoders_present(&data, run_dir).map_err(|e| Failure::invalid(format!("{e}; run `train dam` first")))?;
    }
    let manifest = CorpusManifest::from_features(&features);
    runner::write_manifest(run_dir, &manifest).map_err(runtime)?;
    fs::write(run_dir.join("config.txt"), cfg.to_text()).map_err(runtime)?;
    let opts = RunOptions {
        run_dir: run_dir.to_path_buf(),
        jobs: cfg.jobs,
        force,
    };
    info!("training {model:?} on {} frames from {} speakers", data.len(), data.n_speakers());
    let summary = match model {
        Model::Icm => runner::run_icm(&data, &cfg.train, &opts),
        Model::Dam => runner::run_dam(&data, &cfg.train, &opts),
        Model::Usm => runner::run_usm(&data, &cfg.train, &opts),
        Model::Ism => {
            let record = runner::run_ism(&data, &cfg.train, &opts).map_err(|e| Failure::Runtime(describe_run_error(&e)))?;
            println!("ISM top-1 accuracy: {:.2}% on {} held-out frames", record.accuracy, record.n_test_frames);
            return Ok(());
        }
    }
    .map_err(|e| Failure::Runtime(describe_run_error(&e)))?;
    println!(
        "{model:?}: {} fold(s) trained, {} already complete",
        summary.trained.len(),
        summary.skipped.len()
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig, run_dir: &Path, csv_only: bool) -> Result<(), Failure> {
    if !run_dir.is_dir() {
        return Err(Failure::invalid(format!("run directory {} not found", run_dir.display())));
    }
    let (report, written) = build_report(run_dir, cfg.ttest, csv_only).map_err(runtime)?;
    if !csv_only {
        print!("{}", report.to_text());
    }
    for p in &written {
        info!("wrote {}", run_dir.join(p).display());
    }
    if report.is_partial() {
        let detail: Vec<String> = report.missing.iter().map(|(m, ids)| format!("{m}: {}", ids.join(" "))).collect();
        return Err(Failure::Runtime(format!("partial run, missing folds: {}", detail.join("; "))));
    }
    Ok(())
}
