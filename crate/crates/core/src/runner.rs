//! LOSO fold runner: trains every fold (optionally in parallel) and writes
//! per-fold artifacts under a run directory.
//!
//! ```text
//! run_dir/
//!   manifest.json
//!   icm/fold_000/{model.dspk, trace.csv, audit.log, result.json}
//!   dam/fold_000/...
//!   ism/{model.dspk, trace.csv, result.json}
//!   usm/fold_000/...
//! ```
//!
//! `result.json` is written last, so a fold directory without it is
//! treated as unfinished and retrained.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::adversarial::{train_dam_from, train_icm, train_ism, train_usm, trace_csv, predict_victim, FoldSpec, ProbeResult, ProbeSplit, TrainConfig, TrainError};
use crate::corpus::{CorpusError, CorpusManifest};
use crate::dataset::Dataset;
use crate::eval::{fold_dir, EvalError, FoldResult, ProbeRecord, MANIFEST_FILE, RESULT_FILE};
use crate::nn::{load_model, save_model, NetworkParams, NnError};
use crate::rng::derive_seed;
use crate::scalar::Real;

pub const MODEL_FILE: &str = "model.dspk";
pub const TRACE_FILE: &str = "trace.csv";
pub const AUDIT_FILE: &str = "audit.log";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fold {fold} ({speaker}): {source}")]
    Fold {
        fold: usize,
        speaker: String,
        #[source]
        source: Box<RunError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("missing DAM encoder for fold {fold}: {path}")]
    MissingEncoder { fold: usize, path: PathBuf },
    #[error("{failed} of {total} folds failed")]
    FoldsFailed { failed: usize, total: usize, errors: Vec<RunError> },
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Writes via a temporary file so readers never see a partial result.
fn write_final(path: &Path, body: impl AsRef<[u8]>) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    write(&tmp, body)?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn save<T: Real>(params: &NetworkParams<T>, path: &Path) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(save_model(params, path)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    /// Folds trained concurrently.
    pub jobs: usize,
    /// Retrain folds that already have results.
    pub force: bool,
}

/// Which folds ran and which were reused from an earlier run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub trained: Vec<usize>,
    pub skipped: Vec<usize>,
}

pub fn write_manifest(run_dir: &Path, manifest: &CorpusManifest) -> Result<(), RunError> {
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    Ok(manifest.save(&run_dir.join(MANIFEST_FILE))?)
}

fn run_folds<F>(folds: &[FoldSpec], opts: &RunOptions, model: &str, job: F) -> Result<RunSummary, RunError>
where
    F: Fn(&FoldSpec, &Path) -> Result<(), RunError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<bool, RunError>> = pool.install(|| {
        folds
            .par_iter()
            .map(|fold| {
                let dir = fold_dir(&opts.run_dir, model, fold.fold);
                if !opts.force && dir.join(RESULT_FILE).is_file() {
                    info!("[{model} fold {:03}] already complete, skipping", fold.fold);
                    return Ok(false);
                }
                info!("[{model} fold {:03}] training, held out {}", fold.fold, fold.held_out_id);
                job(fold, &dir).map_err(|e| RunError::Fold {
                    fold: fold.fold,
                    speaker: fold.held_out_id.clone(),
                    source: Box::new(e),
                })?;
                info!("[{model} fold {:03}] done", fold.fold);
                Ok(true)
            })
            .collect()
    });
    let mut summary = RunSummary::default();
    let mut errors = Vec::new();
    for (fold, outcome) in folds.iter().zip(outcomes) {
        match outcome {
            Ok(true) => summary.trained.push(fold.fold),
            Ok(false) => summary.skipped.push(fold.fold),
            Err(e) => {
                warn!("{e}");
                errors.push(e);
            }
        }
    }
    if errors.is_empty() {
        Ok(summary)
    } else {
        Err(RunError::FoldsFailed {
            failed: errors.len(),
            total: folds.len(),
            errors,
        })
    }
}

fn fold_result<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>, fold: &FoldSpec) -> Result<FoldResult, RunError> {
    let probs = predict_victim(params, data, &fold.test_rows(data))?;
    let info = &data.speakers[fold.held_out];
    Ok(FoldResult::from_probs(fold.fold, &info.id, info.condition, info.severity, &probs)?)
}

/// ICM on every fold.
pub fn run_icm<T: Real>(data: &Dataset<T>, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let folds = FoldSpec::loso(data);
    run_folds(&folds, opts, "icm", |fold, dir| {
        let icm = train_icm(data, fold, cfg)?;
        save(&icm.params, &dir.join(MODEL_FILE))?;
        write(&dir.join(TRACE_FILE), trace_csv(&icm.trace))?;
        write(&dir.join(AUDIT_FILE), icm.audit.to_text())?;
        write_final(&dir.join(RESULT_FILE), to_json(&fold_result(&icm.params, data, fold)?))
    })
}

/// DAM on every fold. The ICM initialization of each fold is also written
/// under `icm/` as the baseline.
pub fn run_dam<T: Real>(data: &Dataset<T>, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let folds = FoldSpec::loso(data);
    run_folds(&folds, opts, "dam", |fold, dir| {
        let icm_dir = fold_dir(&opts.run_dir, "icm", fold.fold);
        let icm = train_icm(data, fold, cfg)?;
        save(&icm.params, &icm_dir.join(MODEL_FILE))?;
        write(&icm_dir.join(TRACE_FILE), trace_csv(&icm.trace))?;
        write(&icm_dir.join(AUDIT_FILE), icm.audit.to_text())?;
        write_final(&icm_dir.join(RESULT_FILE), to_json(&fold_result(&icm.params, data, fold)?))?;
        let dam = train_dam_from(data, fold, cfg, icm)?;
        save(&dam.params, &dir.join(MODEL_FILE))?;
        write(&dir.join(TRACE_FILE), trace_csv(&dam.trace))?;
        write(&dir.join(AUDIT_FILE), dam.audit.to_text())?;
        write_final(&dir.join(RESULT_FILE), to_json(&fold_result(&dam.params, data, fold)?))
    })
}

fn probe_record<T>(fold: Option<usize>, probe: &ProbeResult<T>, split: &ProbeSplit) -> ProbeRecord {
    ProbeRecord {
        fold,
        accuracy: probe.accuracy,
        per_speaker: probe.per_speaker.iter().map(|v| v.is_finite().then_some(*v)).collect(),
        n_test_frames: split.test_rows.len(),
    }
}

/// ISM speaker probe over all speakers.
pub fn run_ism<T: Real>(data: &Dataset<T>, cfg: &TrainConfig, opts: &RunOptions) -> Result<ProbeRecord, RunError> {
    let dir = opts.run_dir.join("ism");
    let result = dir.join(RESULT_FILE);
    if !opts.force && result.is_file() {
        info!("[ism] already complete, skipping");
        let text = fs::read_to_string(&result).map_err(io_err(&result))?;
        return serde_json::from_str(&text).map_err(|e| {
            RunError::Eval(EvalError::Parse {
                path: result.clone(),
                msg: e.to_string(),
            })
        });
    }
    let split = ProbeSplit::new(data, cfg.test_fraction, cfg.seed)?;
    let ism = train_ism(data, &split, cfg)?;
    // the condition head is an unused initialization
    let filler = NetworkParams::<T>::init(&cfg.architecture, data.n_speakers(), derive_seed(cfg.seed, u64::MAX));
    let params = NetworkParams::new(ism.encoder.clone(), filler.cond_head, ism.head.clone())?;
    save(&params, &dir.join(MODEL_FILE))?;
    write(&dir.join(TRACE_FILE), trace_csv(&ism.trace))?;
    let record = probe_record(None, &ism, &split);
    write_final(&result, to_json(&record))?;
    info!("[ism] top-1 {:.2}%", record.accuracy);
    Ok(record)
}

/// Checks that every fold has a DAM model before any USM training starts.
pub fn dam_encoders_present<T>(data: &Dataset<T>, run_dir: &Path) -> Result<(), RunError> {
    for fold in FoldSpec::loso(data) {
        let path = fold_dir(run_dir, "dam", fold.fold).join(MODEL_FILE);
        if !path.is_file() {
            return Err(RunError::MissingEncoder { fold: fold.fold, path });
        }
    }
    Ok(())
}

/// USM probe on each fold's frozen DAM encoder.
pub fn run_usm<T: Real>(data: &Dataset<T>, cfg: &TrainConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    dam_encoders_present(data, &opts.run_dir)?;
    let folds = FoldSpec::loso(data);
    let split = ProbeSplit::new(data, cfg.test_fraction, cfg.seed)?;
    run_folds(&folds, opts, "usm", |fold, dir| {
        let dam: NetworkParams<T> = load_model(&fold_dir(&opts.run_dir, "dam", fold.fold).join(MODEL_FILE))?;
        let usm = train_usm(&dam.encoder, data, &split, cfg, derive_seed(cfg.seed, 1000 + fold.fold as u64))?;
        let params = NetworkParams::new(dam.encoder, dam.cond_head, usm.head.clone())?;
        save(&params, &dir.join(MODEL_FILE))?;
        write(&dir.join(TRACE_FILE), trace_csv(&usm.trace))?;
        write(
            &dir.join(AUDIT_FILE),
            format!(
                "encoder_checksum_before {:016x}\nencoder_checksum_after {:016x}\n",
                usm.encoder_checksum_before, usm.encoder_checksum_after
            ),
        )?;
        write_final(&dir.join(RESULT_FILE), to_json(&probe_record(Some(fold.fold), &usm, &split)))
    })
}
