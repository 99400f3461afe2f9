//! The four training procedures.
//!
//! * ICM: encoder + condition head trained on condition labels.
//! * ISM: encoder + speaker head trained on speaker identity.
//! * DAM: starting from the ICM encoder/condition head and the ISM speaker
//!   head, every epoch runs one domain step (encoder frozen, speaker head
//!   trained) followed by two main steps (speaker head frozen, encoder and
//!   condition head trained on `lambda * L_cond - (1 - lambda) * L_spk`,
//!   the speaker term reaching the encoder through the gradient-reversal
//!   layer).
//! * USM: a fresh speaker head trained on frozen DAM embeddings.
//!
//! Frozen blocks are checksummed around every phase and every minibatch is
//! checked against the held-out speaker; see [`AuditLog`].

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::nn::{
    cross_entropy, one_hot, total_loss, Architecture, GradientReversal, LrSchedule, Mlp, MlpGrads, MomentumSgd,
    NetworkParams, NnError, Targets,
};
use crate::rng::{derive_seed, seeded, SplitMix64};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("speaker {0} has a single recording; cannot split by recording")]
    SingleRecording(String),
    #[error("need at least 2 speakers, got {0}")]
    TooFewSpeakers(usize),
    #[error("held-out speaker {speaker} appeared in a training batch ({rows} rows)")]
    Leak { speaker: String, rows: usize },
    #[error("frozen block {block} changed during {phase} phase of epoch {epoch}")]
    FreezeViolation { block: String, phase: String, epoch: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, trace: Vec<EpochLosses> },
}

/// How the three-step epoch maps onto minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepGranularity {
    /// Domain step = one full pass over the batches; each main step = one
    /// full pass.
    Pass,
    /// Every minibatch gets one domain update then two main updates.
    Batch,
}

impl StepGranularity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pass" => Some(Self::Pass),
            "batch" => Some(Self::Batch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Batch => "batch",
        }
    }
}

/// Where the DAM speaker head starts from; see [`init_speaker_head`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerInit {
    IcmEncoder,
    Isolated,
}

impl SpeakerInit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "icm_encoder" => Some(Self::IcmEncoder),
            "isolated" => Some(Self::Isolated),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::IcmEncoder => "icm_encoder",
            Self::Isolated => "isolated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Epoch budget for the ICM/ISM initialization.
    pub init_epochs: usize,
    /// Plateau patience for the initialization and probe runs.
    pub patience: usize,
    /// Epoch budget for the ISM/USM speaker probes.
    pub probe_epochs: usize,
    /// Fraction of each speaker's recordings held out by the probes.
    pub test_fraction: f64,
    pub granularity: StepGranularity,
    pub speaker_init: SpeakerInit,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Published hyperparameters (100 epochs, batch 16, lambda 0.2,
    /// momentum SGD from 1e-9 decaying every 10000 steps).
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lambda: 0.2,
            momentum: 0.9,
            schedule: LrSchedule::default(),
            init_epochs: 20,
            patience: 5,
            probe_epochs: 20,
            test_fraction: 0.2,
            granularity: StepGranularity::Pass,
            speaker_init: SpeakerInit::IcmEncoder,
            seed: 0,
            architecture: Architecture::default(),
        }
    }

    /// Settings that train in about a minute on the synthetic corpus.
    pub fn synthetic() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            schedule: LrSchedule {
                starter_lr: 1e-3,
                ..LrSchedule::default()
            },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return fail(format!("lambda {} must lie in (0, 1)", self.lambda));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.schedule.starter_lr > 0.0 && self.schedule.starter_lr.is_finite()) {
            return fail("starter_lr must be positive".into());
        }
        if self.schedule.decay_steps == 0 {
            return fail("decay_steps must be >= 1".into());
        }
        if !(self.schedule.decay_rate > 0.0 && self.schedule.decay_rate <= 1.0) {
            return fail("decay_rate must lie in (0, 1]".into());
        }
        if self.init_epochs < 1 || self.probe_epochs < 1 {
            return fail("init_epochs and probe_epochs must be >= 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    fn optimizer<T: Real>(&self) -> MomentumSgd<T> {
        MomentumSgd::new(self.momentum, self.schedule)
    }
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub fold: usize,
    pub held_out: usize,
    pub held_out_id: String,
    /// Dataset speaker indices used for training, ascending.
    pub train_speakers: Vec<usize>,
    /// Dataset speaker index to speaker-head class.
    pub speaker_class: HashMap<usize, usize>,
}

impl FoldSpec {
    /// One fold per speaker, in dataset speaker order.
    pub fn loso<T>(data: &Dataset<T>) -> Vec<FoldSpec> {
        (0..data.speakers.len())
            .map(|held_out| {
                let train_speakers: Vec<usize> = (0..data.speakers.len()).filter(|&s| s != held_out).collect();
                let speaker_class = train_speakers.iter().enumerate().map(|(c, &s)| (s, c)).collect();
                FoldSpec {
                    fold: held_out,
                    held_out,
                    held_out_id: data.speakers[held_out].id.clone(),
                    train_speakers,
                    speaker_class,
                }
            })
            .collect()
    }

    pub fn n_train_speakers(&self) -> usize {
        self.train_speakers.len()
    }

    pub fn train_rows<T>(&self, data: &Dataset<T>) -> Vec<usize> {
        (0..data.len()).filter(|&r| data.speaker[r] != self.held_out).collect()
    }

    pub fn test_rows<T>(&self, data: &Dataset<T>) -> Vec<usize> {
        (0..data.len()).filter(|&r| data.speaker[r] == self.held_out).collect()
    }

    fn seed(&self, cfg: &TrainConfig) -> u64 {
        derive_seed(cfg.seed, self.fold as u64)
    }
}

/// Recording-disjoint train/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingSplit {
    pub train_recordings: Vec<usize>,
    pub test_recordings: Vec<usize>,
}

/// Splits one speaker's recordings roughly `(1 - test_fraction) / test_fraction`
/// by count, with at least one recording on each side.
pub fn split_by_recording<T>(data: &Dataset<T>, speaker: usize, test_fraction: f64, seed: u64) -> Result<RecordingSplit, TrainError> {
    let mut recs = data.recordings_of_speaker(speaker);
    if recs.len() < 2 {
        return Err(TrainError::SingleRecording(data.speakers[speaker].id.clone()));
    }
    recs.shuffle(&mut seeded(derive_seed(seed, speaker as u64)));
    let n_test = ((recs.len() as f64 * test_fraction).round() as usize).clamp(1, recs.len() - 1);
    let mut test_recordings = recs[..n_test].to_vec();
    let mut train_recordings = recs[n_test..].to_vec();
    test_recordings.sort_unstable();
    train_recordings.sort_unstable();
    Ok(RecordingSplit {
        train_recordings,
        test_recordings,
    })
}

/// Row-level subject-dependent split over every speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSplit {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl ProbeSplit {
    pub fn new<T>(data: &Dataset<T>, test_fraction: f64, seed: u64) -> Result<Self, TrainError> {
        if data.n_speakers() < 2 {
            return Err(TrainError::TooFewSpeakers(data.n_speakers()));
        }
        let mut is_test = vec![false; data.recordings.len()];
        for s in 0..data.n_speakers() {
            for r in split_by_recording(data, s, test_fraction, seed)?.test_recordings {
                is_test[r] = true;
            }
        }
        let (test_rows, train_rows) = (0..data.len()).partition(|&row| is_test[data.recording[row]]);
        Ok(Self { train_rows, test_rows })
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_cond: f64,
    pub l_spk: f64,
    pub l_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Domain,
    Main,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::Domain => "domain",
            PhaseKind::Main => "main",
        }
    }
}

/// Checksums of one frozen block around a phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenCheck {
    pub block: &'static str,
    pub before: u64,
    pub after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseRecord {
    pub epoch: usize,
    pub kind: PhaseKind,
    pub updates: usize,
    pub frozen: Vec<FrozenCheck>,
}

/// Record of everything the freeze and leak audits observed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    pub held_out_id: Option<String>,
    pub phases: Vec<PhaseRecord>,
    pub batches_checked: usize,
    pub rows_checked: usize,
    pub held_out_rows_seen: usize,
    pub notes: Vec<String>,
}

impl AuditLog {
    fn for_fold(fold: &FoldSpec) -> Self {
        Self {
            held_out_id: Some(fold.held_out_id.clone()),
            ..Self::default()
        }
    }

    /// Phase kinds per epoch, in execution order.
    pub fn schedule(&self) -> Vec<(usize, Vec<PhaseKind>)> {
        let mut out: Vec<(usize, Vec<PhaseKind>)> = Vec::new();
        for p in &self.phases {
            match out.last_mut() {
                Some((e, kinds)) if *e == p.epoch => kinds.push(p.kind),
                _ => out.push((p.epoch, vec![p.kind])),
            }
        }
        out
    }

    /// Checks that every epoch is a repetition of `domain, main, main`.
    /// Under pass granularity that is exactly one cycle per epoch.
    pub fn verify_schedule(&self, granularity: StepGranularity) -> Result<(), String> {
        use PhaseKind::*;
        for (epoch, kinds) in self.schedule() {
            let ok = match granularity {
                StepGranularity::Pass => kinds == [Domain, Main, Main],
                StepGranularity::Batch => {
                    !kinds.is_empty() && kinds.len() % 3 == 0 && kinds.chunks(3).all(|c| c == [Domain, Main, Main])
                }
            };
            if !ok {
                return Err(format!("epoch {epoch}: unexpected phase sequence {kinds:?}"));
            }
        }
        Ok(())
    }

    pub fn frozen_blocks_intact(&self) -> bool {
        self.phases.iter().all(|p| p.frozen.iter().all(|c| c.before == c.after))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(id) = &self.held_out_id {
            let _ = writeln!(s, "held_out {id}");
        }
        let _ = writeln!(s, "batches_checked {}", self.batches_checked);
        let _ = writeln!(s, "rows_checked {}", self.rows_checked);
        let _ = writeln!(s, "held_out_rows_seen {}", self.held_out_rows_seen);
        for n in &self.notes {
            let _ = writeln!(s, "note {n}");
        }
        for p in &self.phases {
            let _ = write!(s, "epoch {} phase {} updates {}", p.epoch, p.kind.name(), p.updates);
            for c in &p.frozen {
                let status = if c.before == c.after { "ok" } else { "CHANGED" };
                let _ = write!(s, " frozen {}={:016x}/{:016x}:{status}", c.block, c.before, c.after);
            }
            s.push('\n');
        }
        s
    }

    fn check_batch<T>(&mut self, data: &Dataset<T>, fold: Option<&FoldSpec>, rows: &[usize]) -> Result<(), TrainError> {
        self.batches_checked += 1;
        self.rows_checked += rows.len();
        if let Some(fold) = fold {
            let leaked = rows.iter().filter(|&&r| data.speaker[r] == fold.held_out).count();
            if leaked > 0 {
                self.held_out_rows_seen += leaked;
                return Err(TrainError::Leak {
                    speaker: fold.held_out_id.clone(),
                    rows: leaked,
                });
            }
        }
        Ok(())
    }
}

fn shuffled_batches(rows: &[usize], batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Tracks the best epoch loss and signals a plateau after `patience`
/// epochs without relative improvement.
struct Plateau {
    best: f64,
    waited: usize,
    patience: usize,
}

impl Plateau {
    fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            waited: 0,
            patience,
        }
    }

    fn stop(&mut self, loss: f64) -> bool {
        if !self.best.is_finite() || loss < self.best - 1e-4 * self.best.abs() {
            self.best = loss;
            self.waited = 0;
        } else {
            self.waited += 1;
        }
        self.waited >= self.patience
    }
}

fn speaker_labels<T>(data: &Dataset<T>, rows: &[usize], class_of: impl Fn(usize) -> usize) -> Vec<usize> {
    rows.iter().map(|&r| class_of(data.speaker[r])).collect()
}

fn cond_labels<T>(data: &Dataset<T>, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| data.cond[r]).collect()
}

/// Result of [`train_icm`].
#[derive(Debug, Clone)]
pub struct IcmModel<T> {
    /// Encoder and condition head are trained; the speaker head is the
    /// untouched initialization.
    pub params: NetworkParams<T>,
    pub trace: Vec<EpochLosses>,
    pub audit: AuditLog,
}

/// Isolated condition model on the fold's training speakers.
pub fn train_icm<T: Real>(data: &Dataset<T>, fold: &FoldSpec, cfg: &TrainConfig) -> Result<IcmModel<T>, TrainError> {
    cfg.validate()?;
    let rows = fold.train_rows(data);
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let seed = fold.seed(cfg);
    let mut params = NetworkParams::init(&cfg.architecture, fold.n_train_speakers().max(1), derive_seed(seed, 1));
    let spk_before = params.spk_head.checksum();
    let mut opt = cfg.optimizer::<T>();
    let mut rng = seeded(derive_seed(seed, 2));
    let mut audit = AuditLog::for_fold(fold);
    let mut trace = Vec::new();
    let mut plateau = Plateau::new(cfg.patience);
    for epoch in 0..cfg.init_epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in shuffled_batches(&rows, cfg.batch_size, &mut rng) {
            audit.check_batch(data, Some(fold), &batch)?;
            let x = data.rows(&batch);
            let labels = cond_labels(data, &batch);
            let enc = params.encoder.forward(x.view())?;
            let cond = params.cond_head.forward(enc.output.view())?;
            let (loss, d_logits) = cross_entropy(cond.output.view(), Targets::Sparse(&labels))?;
            let (g_cond, d_emb) = params.cond_head.backward(&cond, d_logits.view(), true);
            let (g_enc, _) = params.encoder.backward(&enc, d_emb.expect("requested").view(), false);
            opt.step(&mut [&mut params.encoder, &mut params.cond_head], &[&g_enc, &g_cond])?;
            total += loss.to_f64_lossless() * batch.len() as f64;
            count += batch.len();
        }
        let l_cond = total / count as f64;
        if !l_cond.is_finite() {
            return Err(TrainError::Diverged { epoch, trace });
        }
        trace.push(EpochLosses {
            epoch,
            l_cond,
            l_spk: f64::NAN,
            l_t: l_cond,
        });
        if plateau.stop(l_cond) {
            audit.notes.push(format!("icm plateau stop after epoch {epoch}"));
            break;
        }
    }
    if params.spk_head.checksum() != spk_before {
        return Err(TrainError::FreezeViolation {
            block: "spk".into(),
            phase: "icm".into(),
            epoch: trace.len(),
        });
    }
    Ok(IcmModel { params, trace, audit })
}

/// Trains an encoder and a speaker head jointly on `rows`, with speaker
/// classes given by `class_of`. Returns `(encoder, head, trace)`.
fn fit_speaker_model<T: Real>(
    data: &Dataset<T>,
    rows: &[usize],
    n_classes: usize,
    class_of: &dyn Fn(usize) -> usize,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    fold: Option<&FoldSpec>,
    audit: &mut AuditLog,
) -> Result<(Mlp<T>, Mlp<T>, Vec<EpochLosses>), TrainError> {
    let init = NetworkParams::<T>::init(&cfg.architecture, n_classes, derive_seed(seed, 3));
    let (mut encoder, mut head) = (init.encoder, init.spk_head);
    let mut opt = cfg.optimizer::<T>();
    let mut rng = seeded(derive_seed(seed, 4));
    let mut trace = Vec::new();
    let mut plateau = Plateau::new(cfg.patience);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(rows, cfg.batch_size, &mut rng) {
            audit.check_batch(data, fold, &batch)?;
            let x = data.rows(&batch);
            let y = one_hot::<T>(&speaker_labels(data, &batch, class_of), n_classes)?;
            let enc = encoder.forward(x.view())?;
            let spk = head.forward(enc.output.view())?;
            let (loss, d_logits) = cross_entropy(spk.output.view(), Targets::Categorical(y.view()))?;
            let (g_head, d_emb) = head.backward(&spk, d_logits.view(), true);
            let (g_enc, _) = encoder.backward(&enc, d_emb.expect("requested").view(), false);
            opt.step(&mut [&mut encoder, &mut head], &[&g_enc, &g_head])?;
            total += loss.to_f64_lossless() * batch.len() as f64;
        }
        let l_spk = total / rows.len() as f64;
        if !l_spk.is_finite() {
            return Err(TrainError::Diverged { epoch, trace });
        }
        trace.push(EpochLosses {
            epoch,
            l_cond: f64::NAN,
            l_spk,
            l_t: l_spk,
        });
        if plateau.stop(l_spk) {
            audit.notes.push(format!("speaker model plateau stop after epoch {epoch}"));
            break;
        }
    }
    Ok((encoder, head, trace))
}

/// Speaker-identification probe result.
#[derive(Debug, Clone)]
pub struct ProbeResult<T> {
    pub encoder: Mlp<T>,
    pub head: Mlp<T>,
    /// Top-1 accuracy on the held-out recordings, in percent.
    pub accuracy: f64,
    /// Per-speaker top-1 accuracy on held-out recordings, in percent.
    pub per_speaker: Vec<f64>,
    pub trace: Vec<EpochLosses>,
    pub encoder_checksum_before: u64,
    pub encoder_checksum_after: u64,
}

fn top1(probs: ArrayView2<'_, impl Real>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, None), |(bi, bv), (i, &v)| match bv {
                    Some(b) if v <= b => (bi, bv),
                    _ => (i, Some(v)),
                })
                .0
        })
        .collect()
}

fn probe_accuracy<T: Real>(data: &Dataset<T>, rows: &[usize], predicted: &[usize]) -> (f64, Vec<f64>) {
    let mut hits = vec![(0usize, 0usize); data.n_speakers()];
    for (&r, &p) in rows.iter().zip(predicted) {
        let s = data.speaker[r];
        hits[s].1 += 1;
        if p == s {
            hits[s].0 += 1;
        }
    }
    let correct: usize = hits.iter().map(|h| h.0).sum();
    let per = hits
        .iter()
        .map(|&(c, n)| if n == 0 { f64::NAN } else { 100.0 * c as f64 / n as f64 })
        .collect();
    (100.0 * correct as f64 / rows.len().max(1) as f64, per)
}

/// Isolated speaker model over every speaker with a recording-disjoint
/// split; reports top-1 on the held-out recordings. Classes are dataset
/// speaker indices.
pub fn train_ism<T: Real>(data: &Dataset<T>, split: &ProbeSplit, cfg: &TrainConfig) -> Result<ProbeResult<T>, TrainError> {
    cfg.validate()?;
    if data.n_speakers() < 2 {
        return Err(TrainError::TooFewSpeakers(data.n_speakers()));
    }
    if split.train_rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut audit = AuditLog::default();
    let k = data.n_speakers();
    let (encoder, head, trace) = fit_speaker_model(
        data,
        &split.train_rows,
        k,
        &|s| s,
        cfg,
        cfg.probe_epochs,
        derive_seed(cfg.seed, u64::MAX),
        None,
        &mut audit,
    )?;
    let emb = encoder.predict(data.rows(&split.test_rows).view())?;
    let predicted = top1(head.predict(emb.view())?.view());
    let (accuracy, per_speaker) = probe_accuracy(data, &split.test_rows, &predicted);
    let checksum = encoder.checksum();
    Ok(ProbeResult {
        encoder,
        head,
        accuracy,
        per_speaker,
        trace,
        encoder_checksum_before: checksum,
        encoder_checksum_after: checksum,
    })
}

/// Trains a fresh speaker head on fixed embeddings (rows of `embeddings`
/// align with rows of `data`).
#[allow(clippy::too_many_arguments)]
fn fit_head<T: Real>(
    embeddings: &Array2<T>,
    data: &Dataset<T>,
    rows: &[usize],
    n_classes: usize,
    class_of: &dyn Fn(usize) -> usize,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    fold: Option<&FoldSpec>,
    audit: &mut AuditLog,
) -> Result<(Mlp<T>, Vec<EpochLosses>), TrainError> {
    let mut head: Mlp<T> = cfg.architecture.speaker_head(n_classes, derive_seed(seed, 5));
    let mut opt = cfg.optimizer::<T>();
    let mut rng = seeded(derive_seed(seed, 6));
    let mut trace = Vec::new();
    let mut plateau = Plateau::new(cfg.patience);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(rows, cfg.batch_size, &mut rng) {
            audit.check_batch(data, fold, &batch)?;
            let e = embeddings.select(Axis(0), &batch);
            let y = one_hot::<T>(&speaker_labels(data, &batch, class_of), n_classes)?;
            let spk = head.forward(e.view())?;
            let (loss, d_logits) = cross_entropy(spk.output.view(), Targets::Categorical(y.view()))?;
            let (g_head, _) = head.backward(&spk, d_logits.view(), false);
            opt.step(&mut [&mut head], &[&g_head])?;
            total += loss.to_f64_lossless() * batch.len() as f64;
        }
        let l_spk = total / rows.len() as f64;
        if !l_spk.is_finite() {
            return Err(TrainError::Diverged { epoch, trace });
        }
        trace.push(EpochLosses {
            epoch,
            l_cond: f64::NAN,
            l_spk,
            l_t: l_spk,
        });
        if plateau.stop(l_spk) {
            break;
        }
    }
    Ok((head, trace))
}

/// Unlearnt speaker model: a fresh speaker head (same shape as the ISM
/// head) trained on embeddings of a frozen encoder.
pub fn train_usm<T: Real>(encoder: &Mlp<T>, data: &Dataset<T>, split: &ProbeSplit, cfg: &TrainConfig, seed: u64) -> Result<ProbeResult<T>, TrainError> {
    cfg.validate()?;
    if split.train_rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let before = encoder.checksum();
    let embeddings = encoder.predict(data.x.view())?;
    let k = data.n_speakers();
    let (head, trace) = fit_head(&embeddings, data, &split.train_rows, k, &|s| s, cfg, cfg.probe_epochs, seed, None, &mut AuditLog::default())?;
    let after = encoder.checksum();
    if after != before {
        return Err(TrainError::FreezeViolation {
            block: "encoder".into(),
            phase: "usm".into(),
            epoch: trace.len(),
        });
    }
    let test = embeddings.select(Axis(0), &split.test_rows);
    let predicted = top1(head.predict(test.view())?.view());
    let (accuracy, per_speaker) = probe_accuracy(data, &split.test_rows, &predicted);
    Ok(ProbeResult {
        encoder: encoder.clone(),
        head,
        accuracy,
        per_speaker,
        trace,
        encoder_checksum_before: before,
        encoder_checksum_after: after,
    })
}

/// Encoder and condition-head gradients of one main step.
#[derive(Debug, Clone)]
pub struct MainGradients<T> {
    pub encoder: MlpGrads<T>,
    pub cond_head: MlpGrads<T>,
    pub l_cond: T,
    pub l_spk: T,
}

/// Gradients of `lambda * L_cond - (1 - lambda) * L_spk` for the encoder
/// and condition head. The speaker term is back-propagated through the
/// (frozen) speaker head with weight `1 - lambda` and reversed at the
/// gradient-reversal layer, so its sign flips exactly once.
pub fn main_step_gradients<T: Real>(
    params: &NetworkParams<T>,
    x: ArrayView2<T>,
    cond: &[usize],
    spk_onehot: ArrayView2<T>,
    lambda: T,
) -> Result<MainGradients<T>, NnError> {
    let fwd = params.forward(x)?;
    let (l_cond, d_cond) = cross_entropy(fwd.cond_probs().view(), Targets::Sparse(cond))?;
    let (l_spk, d_spk) = cross_entropy(fwd.spk_probs().view(), Targets::Categorical(spk_onehot))?;
    let (g_cond, d_emb_cond) = params.cond_head.backward(&fwd.cond, (d_cond * lambda).view(), true);
    let d_emb_spk = params.spk_head.input_gradient(&fwd.spk, (d_spk * (T::one() - lambda)).view());
    let d_emb = d_emb_cond.expect("requested") + GradientReversal.backward(d_emb_spk.view());
    let (g_enc, _) = params.encoder.backward(&fwd.encoder, d_emb.view(), false);
    Ok(MainGradients {
        encoder: g_enc,
        cond_head: g_cond,
        l_cond,
        l_spk,
    })
}

/// Encoder gradients of `L_cond` alone and of `L_spk` alone (no reversal,
/// no weighting), for checking the composite against its parts.
pub fn encoder_gradient_paths<T: Real>(
    params: &NetworkParams<T>,
    x: ArrayView2<T>,
    cond: &[usize],
    spk_onehot: ArrayView2<T>,
) -> Result<(MlpGrads<T>, MlpGrads<T>), NnError> {
    let enc = params.encoder.forward(x)?;
    let c = params.cond_head.forward(enc.output.view())?;
    let s = params.spk_head.forward(enc.output.view())?;
    let (_, d_cond) = cross_entropy(c.output.view(), Targets::Sparse(cond))?;
    let (_, d_spk) = cross_entropy(s.output.view(), Targets::Categorical(spk_onehot))?;
    let d_emb_cond = params.cond_head.input_gradient(&c, d_cond.view());
    let d_emb_spk = params.spk_head.input_gradient(&s, d_spk.view());
    let (cond_path, _) = params.encoder.backward(&enc, d_emb_cond.view(), false);
    let (spk_path, _) = params.encoder.backward(&enc, d_emb_spk.view(), false);
    Ok((cond_path, spk_path))
}

/// Mutable state of a DAM run within one fold.
#[derive(Debug, Clone)]
pub struct DamState<T> {
    pub params: NetworkParams<T>,
    /// Optimizer of the main steps (encoder + condition head).
    pub main_opt: MomentumSgd<T>,
    /// Optimizer of the domain steps (speaker head).
    pub domain_opt: MomentumSgd<T>,
    pub epoch: usize,
    pub audit: AuditLog,
    rng: SplitMix64,
}

impl<T: Real> DamState<T> {
    pub fn new(params: NetworkParams<T>, fold: &FoldSpec, cfg: &TrainConfig) -> Self {
        Self {
            params,
            main_opt: cfg.optimizer(),
            domain_opt: cfg.optimizer(),
            epoch: 0,
            audit: AuditLog::for_fold(fold),
            rng: seeded(derive_seed(fold.seed(cfg), 7)),
        }
    }

    fn domain_update(&mut self, data: &Dataset<T>, fold: &FoldSpec, batch: &[usize]) -> Result<T, TrainError> {
        self.audit.check_batch(data, Some(fold), batch)?;
        let x = data.rows(batch);
        let y = one_hot::<T>(&speaker_labels(data, batch, |s| fold.speaker_class[&s]), fold.n_train_speakers())?;
        // encoder output is treated as a constant input here
        let emb = self.params.encoder.predict(x.view())?;
        let spk = self.params.spk_head.forward(emb.view())?;
        let (loss, d_logits) = cross_entropy(spk.output.view(), Targets::Categorical(y.view()))?;
        let (g, _) = self.params.spk_head.backward(&spk, d_logits.view(), false);
        self.domain_opt.step(&mut [&mut self.params.spk_head], &[&g])?;
        Ok(loss)
    }

    fn main_update(&mut self, data: &Dataset<T>, fold: &FoldSpec, batch: &[usize], lambda: T) -> Result<(T, T), TrainError> {
        self.audit.check_batch(data, Some(fold), batch)?;
        let x = data.rows(batch);
        let cond = cond_labels(data, batch);
        let y = one_hot::<T>(&speaker_labels(data, batch, |s| fold.speaker_class[&s]), fold.n_train_speakers())?;
        let g = main_step_gradients(&self.params, x.view(), &cond, y.view(), lambda)?;
        self.main_opt.step(
            &mut [&mut self.params.encoder, &mut self.params.cond_head],
            &[&g.encoder, &g.cond_head],
        )?;
        Ok((g.l_cond, g.l_spk))
    }

    fn frozen(&self, kind: PhaseKind) -> Vec<FrozenCheck> {
        let blocks: Vec<(&'static str, &Mlp<T>)> = match kind {
            PhaseKind::Domain => vec![("encoder", &self.params.encoder), ("cond", &self.params.cond_head)],
            PhaseKind::Main => vec![("spk", &self.params.spk_head)],
        };
        blocks
            .into_iter()
            .map(|(block, m)| {
                let c = m.checksum();
                FrozenCheck {
                    block,
                    before: c,
                    after: c,
                }
            })
            .collect()
    }

    fn close_phase(&mut self, kind: PhaseKind, updates: usize, mut frozen: Vec<FrozenCheck>) -> Result<(), TrainError> {
        let now = self.frozen(kind);
        for (f, n) in frozen.iter_mut().zip(now) {
            f.after = n.after;
        }
        let violated = frozen.iter().find(|f| f.before != f.after).map(|f| f.block.to_string());
        self.audit.phases.push(PhaseRecord {
            epoch: self.epoch,
            kind,
            updates,
            frozen,
        });
        match violated {
            Some(block) => Err(TrainError::FreezeViolation {
                block,
                phase: kind.name().into(),
                epoch: self.epoch,
            }),
            None => Ok(()),
        }
    }
}

/// Runs one epoch: a domain step, then two main steps.
pub fn dam_epoch<T: Real>(state: &mut DamState<T>, data: &Dataset<T>, fold: &FoldSpec, cfg: &TrainConfig) -> Result<EpochLosses, TrainError> {
    let rows = fold.train_rows(data);
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let lambda = T::lit(cfg.lambda);
    let batches = shuffled_batches(&rows, cfg.batch_size, &mut state.rng);
    let mut cond_sum = 0.0;
    let mut spk_sum = 0.0;
    let mut weight = 0usize;
    let mut record = |(lc, ls): (T, T), n: usize| {
        cond_sum += lc.to_f64_lossless() * n as f64;
        spk_sum += ls.to_f64_lossless() * n as f64;
        weight += n;
    };
    match cfg.granularity {
        StepGranularity::Pass => {
            let frozen = state.frozen(PhaseKind::Domain);
            for b in &batches {
                state.domain_update(data, fold, b)?;
            }
            state.close_phase(PhaseKind::Domain, batches.len(), frozen)?;
            for _ in 0..2 {
                let frozen = state.frozen(PhaseKind::Main);
                for b in &batches {
                    record(state.main_update(data, fold, b, lambda)?, b.len());
                }
                state.close_phase(PhaseKind::Main, batches.len(), frozen)?;
            }
        }
        StepGranularity::Batch => {
            for b in &batches {
                let frozen = state.frozen(PhaseKind::Domain);
                state.domain_update(data, fold, b)?;
                state.close_phase(PhaseKind::Domain, 1, frozen)?;
                for _ in 0..2 {
                    let frozen = state.frozen(PhaseKind::Main);
                    record(state.main_update(data, fold, b, lambda)?, b.len());
                    state.close_phase(PhaseKind::Main, 1, frozen)?;
                }
            }
        }
    }
    let l_cond = cond_sum / weight as f64;
    let l_spk = spk_sum / weight as f64;
    let losses = EpochLosses {
        epoch: state.epoch,
        l_cond,
        l_spk,
        l_t: total_loss(l_cond, l_spk, cfg.lambda),
    };
    state.epoch += 1;
    Ok(losses)
}

/// Result of [`train_dam`]. `icm` is the initialization, which doubles as
/// the fold's isolated condition baseline.
#[derive(Debug, Clone)]
pub struct DamModel<T> {
    pub params: NetworkParams<T>,
    pub trace: Vec<EpochLosses>,
    pub audit: AuditLog,
    pub icm: IcmModel<T>,
}

/// Speaker head used to start DAM training on one fold.
///
/// With [`SpeakerInit::IcmEncoder`] the head is trained on embeddings of the
/// frozen ICM encoder, so it starts out meaningful for the encoder it will
/// sit on. With [`SpeakerInit::Isolated`] it comes from a speaker model
/// trained end-to-end with its own encoder, which is then discarded.
pub fn init_speaker_head<T: Real>(data: &Dataset<T>, fold: &FoldSpec, cfg: &TrainConfig, icm_encoder: &Mlp<T>) -> Result<Mlp<T>, TrainError> {
    match cfg.speaker_init {
        SpeakerInit::Isolated => Ok(train_ism_init(data, fold, cfg)?.1),
        SpeakerInit::IcmEncoder => {
            let rows = fold.train_rows(data);
            if rows.is_empty() {
                return Err(TrainError::EmptyTrainingSet);
            }
            let embeddings = icm_encoder.predict(data.x.view())?;
            let mut audit = AuditLog::for_fold(fold);
            let (head, _) = fit_head(
                &embeddings,
                data,
                &rows,
                fold.n_train_speakers(),
                &|s| fold.speaker_class[&s],
                cfg,
                cfg.init_epochs,
                derive_seed(fold.seed(cfg), 8),
                Some(fold),
                &mut audit,
            )?;
            Ok(head)
        }
    }
}

/// Speaker model (encoder and head) trained end-to-end on the fold's
/// training speakers.
pub fn train_ism_init<T: Real>(data: &Dataset<T>, fold: &FoldSpec, cfg: &TrainConfig) -> Result<(Mlp<T>, Mlp<T>), TrainError> {
    let rows = fold.train_rows(data);
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut audit = AuditLog::for_fold(fold);
    let (enc, head, _) = fit_speaker_model(
        data,
        &rows,
        fold.n_train_speakers(),
        &|s| fold.speaker_class[&s],
        cfg,
        cfg.init_epochs,
        fold.seed(cfg),
        Some(fold),
        &mut audit,
    )?;
    Ok((enc, head))
}

/// Full DAM training for one fold: ICM and ISM initialization followed by
/// `cfg.epochs` adversarial epochs.
pub fn train_dam<T: Real>(data: &Dataset<T>, fold: &FoldSpec, cfg: &TrainConfig) -> Result<DamModel<T>, TrainError> {
    let icm = train_icm(data, fold, cfg)?;
    train_dam_from(data, fold, cfg, icm)
}

/// DAM training from an already trained ICM.
pub fn train_dam_from<T: Real>(data: &Dataset<T>, fold: &FoldSpec, cfg: &TrainConfig, icm: IcmModel<T>) -> Result<DamModel<T>, TrainError> {
    cfg.validate()?;
    let spk_head = init_speaker_head(data, fold, cfg, &icm.params.encoder)?;
    let params = NetworkParams::new(icm.params.encoder.clone(), icm.params.cond_head.clone(), spk_head)?;
    let mut state = DamState::new(params, fold, cfg);
    state.audit.batches_checked = icm.audit.batches_checked;
    state.audit.rows_checked = icm.audit.rows_checked;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let losses = dam_epoch(&mut state, data, fold, cfg)?;
        if !(losses.l_cond.is_finite() && losses.l_spk.is_finite()) {
            return Err(TrainError::Diverged {
                epoch: losses.epoch,
                trace,
            });
        }
        trace.push(losses);
    }
    state.audit.verify_schedule(cfg.granularity).map_err(TrainError::Config)?;
    Ok(DamModel {
        params: state.params,
        trace,
        audit: state.audit,
        icm,
    })
}

/// Victim-class probability for every row in `rows`.
pub fn predict_victim<T: Real>(params: &NetworkParams<T>, data: &Dataset<T>, rows: &[usize]) -> Result<Vec<f64>, NnError> {
    let emb = params.encoder.predict(data.rows(rows).view())?;
    let probs = params.cond_head.predict(emb.view())?;
    Ok(probs.column(1).iter().map(|p| p.to_f64_lossless()).collect())
}

/// Loss traces as CSV, `epoch,l_cond,l_spk,l_t`. Undefined entries are empty.
pub fn trace_csv(trace: &[EpochLosses]) -> String {
    let fmt = |v: f64| if v.is_finite() { format!("{v:.9e}") } else { String::new() };
    let mut s = String::from("epoch,l_cond,l_spk,l_t\n");
    for t in trace {
        let _ = writeln!(s, "{},{},{},{}", t.epoch, fmt(t.l_cond), fmt(t.l_spk), fmt(t.l_t));
    }
    s
}
