//! Speaker-level data model, audio normalization, victim-segment
//! subsampling, the synthetic corpus generator and the feature-file store.
//!
//! The feature store is a plain comma-separated table:
//!
//! ```text
//! speaker_id,recording_id,frame_index,label,severity,f00,...,f37
//! ```
//!
//! Feature values are `f32` written with 9 significant digits, which makes a
//! save/load cycle exact.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;
use crate::scalar::Real;

/// Width of the per-second descriptor vector.
pub const FEATURE_DIM: usize = 38;
/// Sample rate every recording is resampled to.
pub const SAMPLE_RATE: u32 = 16_000;
/// Upper bound of the severity scale.
pub const SEVERITY_MAX: f32 = 20.0;
/// Epsilon guard on the standard deviation in [`zscore`].
pub const ZSCORE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("invalid feature header: {0}")]
    Header(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("speaker {0} has no audio samples")]
    EmptySpeaker(String),
    #[error("invalid synthetic spec: {0}")]
    Synth(String),
    #[error("manifest and feature store disagree: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Binary condition label. `Victim` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NonVictim,
    Victim,
}

impl Condition {
    pub fn class_index(self) -> usize {
        match self {
            Condition::NonVictim => 0,
            Condition::Victim => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Self> {
        match idx {
            0 => Some(Condition::NonVictim),
            1 => Some(Condition::Victim),
            _ => None,
        }
    }

    pub fn is_victim(self) -> bool {
        self == Condition::Victim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingRef {
    pub recording_id: String,
    pub frames: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub condition: Condition,
    /// Symptom severity in `[0, 20]`; present exactly for victims.
    pub severity: Option<f32>,
    pub recordings: Vec<RecordingRef>,
}

impl SpeakerRecord {
    pub fn frame_count(&self) -> usize {
        self.recordings.iter().map(|r| r.frames.len()).sum()
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::Manifest(format!("speaker {}: {msg}", self.speaker_id)));
        match (self.condition, self.severity) {
            (Condition::Victim, None) => return bad("victim without severity".into()),
            (Condition::NonVictim, Some(_)) => return bad("severity given for a non-victim".into()),
            (_, Some(s)) if !(0.0..=SEVERITY_MAX).contains(&s) => {
                return bad(format!("severity {s} outside [0, {SEVERITY_MAX}]"))
            }
            _ => {}
        }
        let mut seen = HashSet::new();
        for rec in &self.recordings {
            if !seen.insert(rec.recording_id.as_str()) {
                return bad(format!("duplicate recording {}", rec.recording_id));
            }
        }
        Ok(())
    }
}

/// Speaker-level description of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub frame_seconds: f64,
    pub speakers: Vec<SpeakerRecord>,
}

/// Speaker and frame counts per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassBalance {
    pub victim_speakers: usize,
    pub non_victim_speakers: usize,
    pub victim_frames: usize,
    pub non_victim_frames: usize,
}

impl ClassBalance {
    pub fn victim_frame_share(&self) -> f64 {
        let total = self.victim_frames + self.non_victim_frames;
        if total == 0 {
            0.0
        } else {
            100.0 * self.victim_frames as f64 / total as f64
        }
    }
}

impl CorpusManifest {
    pub fn new(speakers: Vec<SpeakerRecord>) -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_seconds: 1.0,
            speakers,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(CorpusError::Manifest(format!(
                "sample_rate {} (expected {SAMPLE_RATE})",
                self.sample_rate
            )));
        }
        if self.frame_seconds != 1.0 {
            return Err(CorpusError::Manifest(format!(
                "frame_seconds {} (expected 1.0)",
                self.frame_seconds
            )));
        }
        let mut ids = HashSet::new();
        for spk in &self.speakers {
            if !ids.insert(spk.speaker_id.as_str()) {
                return Err(CorpusError::Manifest(format!("duplicate speaker {}", spk.speaker_id)));
            }
            spk.validate()?;
        }
        Ok(())
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerRecord> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn frame_count(&self) -> usize {
        self.speakers.iter().map(SpeakerRecord::frame_count).sum()
    }

    pub fn class_balance(&self) -> ClassBalance {
        let mut b = ClassBalance {
            victim_speakers: 0,
            non_victim_speakers: 0,
            victim_frames: 0,
            non_victim_frames: 0,
        };
        for s in &self.speakers {
            if s.condition.is_victim() {
                b.victim_speakers += 1;
                b.victim_frames += s.frame_count();
            } else {
                b.non_victim_speakers += 1;
                b.non_victim_frames += s.frame_count();
            }
        }
        b
    }

    /// Derives the manifest implied by a feature store. Speakers appear in
    /// first-seen order, recordings likewise.
    pub fn from_features(set: &FeatureSet) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut by_spk: BTreeMap<&str, SpeakerRecord> = BTreeMap::new();
        for f in &set.frames {
            let entry = by_spk.entry(f.speaker_id.as_str()).or_insert_with(|| {
                order.push(f.speaker_id.clone());
                SpeakerRecord {
                    speaker_id: f.speaker_id.clone(),
                    condition: f.label,
                    severity: f.severity,
                    recordings: Vec::new(),
                }
            });
            match entry.recordings.iter_mut().find(|r| r.recording_id == f.recording_id) {
                Some(r) => r.frames.push(f.frame_index),
                None => entry.recordings.push(RecordingRef {
                    recording_id: f.recording_id.clone(),
                    frames: vec![f.frame_index],
                }),
            }
        }
        let speakers = order
            .iter()
            .map(|id| by_spk.remove(id.as_str()).expect("speaker recorded in order"))
            .collect();
        Self::new(speakers)
    }

    /// Checks that every manifest frame has exactly one row in `set` and
    /// that labels agree.
    pub fn check_against(&self, set: &FeatureSet) -> Result<(), CorpusError> {
        if self.frame_count() != set.len() {
            return Err(CorpusError::Mismatch(format!(
                "manifest lists {} frames, feature store has {} rows",
                self.frame_count(),
                set.len()
            )));
        }
        let mut keys: HashSet<(&str, &str, u32)> = HashSet::with_capacity(set.len());
        for f in &set.frames {
            keys.insert((&f.speaker_id, &f.recording_id, f.frame_index));
            let spk = self.speaker(&f.speaker_id).ok_or_else(|| {
                CorpusError::Mismatch(format!("speaker {} missing from manifest", f.speaker_id))
            })?;
            if spk.condition != f.label || spk.severity != f.severity {
                return Err(CorpusError::Mismatch(format!(
                    "label/severity of speaker {} differs between manifest and features",
                    f.speaker_id
                )));
            }
        }
        for s in &self.speakers {
            for r in &s.recordings {
                for &fi in &r.frames {
                    if !keys.contains(&(s.speaker_id.as_str(), r.recording_id.as_str(), fi)) {
                        return Err(CorpusError::Mismatch(format!(
                            "frame {}/{}/{fi} has no feature row",
                            s.speaker_id, r.recording_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// One 1-second frame with its 38 descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub speaker_id: String,
    pub recording_id: String,
    pub frame_index: u32,
    pub label: Condition,
    pub severity: Option<f32>,
    pub features: Vec<f32>,
}

impl FrameFeatures {
    fn check(&self) -> Result<(), String> {
        if self.features.len() != FEATURE_DIM {
            return Err(format!(
                "expected {FEATURE_DIM} features, found {}",
                self.features.len()
            ));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(format!("feature f{i:02} is not finite"));
        }
        for id in [&self.speaker_id, &self.recording_id] {
            if id.is_empty() || id.contains([',', '\n', '\r', '"']) {
                return Err(format!("identifier {id:?} is empty or contains a separator"));
            }
        }
        match (self.label, self.severity) {
            (Condition::Victim, None) => Err("victim row without severity".into()),
            (Condition::NonVictim, Some(_)) => Err("severity given for a non-victim row".into()),
            (_, Some(s)) if !(0.0..=SEVERITY_MAX).contains(&s) => {
                Err(format!("severity {s} outside [0, {SEVERITY_MAX}]"))
            }
            _ => Ok(()),
        }
    }
}

/// An ordered, validated collection of frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    pub frames: Vec<FrameFeatures>,
}

fn feature_header() -> Vec<String> {
    let mut h: Vec<String> = ["speaker_id", "recording_id", "frame_index", "label", "severity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..FEATURE_DIM).map(|i| format!("f{i:02}")));
    h
}

/// Nine significant digits in scientific notation.
pub fn format_sig9(v: f32) -> String {
    format!("{v:.8e}")
}

impl FeatureSet {
    /// Validates every row and rejects duplicate `(speaker, recording, frame)`
    /// keys. Errors carry the 1-based data-row number (header is line 1).
    pub fn new(frames: Vec<FrameFeatures>) -> Result<Self, CorpusError> {
        let mut keys = HashSet::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let line = i as u64 + 2;
            f.check().map_err(|msg| CorpusError::Row { line, msg })?;
            if !keys.insert((f.speaker_id.as_str(), f.recording_id.as_str(), f.frame_index)) {
                return Err(CorpusError::Row {
                    line,
                    msg: format!(
                        "duplicate key ({}, {}, {})",
                        f.speaker_id, f.recording_id, f.frame_index
                    ),
                });
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Speaker ids in first-seen order.
    pub fn speaker_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.frames
            .iter()
            .filter(|f| seen.insert(f.speaker_id.as_str()))
            .map(|f| f.speaker_id.clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn write_to<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(feature_header())?;
        let mut row: Vec<String> = Vec::with_capacity(5 + FEATURE_DIM);
        for f in &self.frames {
            row.clear();
            row.push(f.speaker_id.clone());
            row.push(f.recording_id.clone());
            row.push(f.frame_index.to_string());
            row.push(f.label.class_index().to_string());
            row.push(f.severity.map(format_sig9).unwrap_or_default());
            row.extend(f.features.iter().map(|&v| format_sig9(v)));
            out.write_record(&row)?;
        }
        out.flush()
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(file)
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
        let header = rdr
            .headers()
            .map_err(|e| CorpusError::Header(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        if header != feature_header() {
            return Err(CorpusError::Header(format!(
                "expected speaker_id,recording_id,frame_index,label,severity,f00..f{:02}",
                FEATURE_DIM - 1
            )));
        }
        let mut frames = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CorpusError::Row {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let row_err = |msg: String| CorpusError::Row { line, msg };
            if rec.len() != 5 + FEATURE_DIM {
                return Err(row_err(format!(
                    "expected {FEATURE_DIM} features, found {}",
                    rec.len().saturating_sub(5)
                )));
            }
            let frame_index: u32 = rec[2]
                .parse()
                .map_err(|_| row_err(format!("bad frame_index {:?}", &rec[2])))?;
            let label = match &rec[3] {
                "0" => Condition::NonVictim,
                "1" => Condition::Victim,
                other => return Err(row_err(format!("bad label {other:?}"))),
            };
            let severity = match &rec[4] {
                "" => None,
                s => Some(s.parse::<f32>().map_err(|_| row_err(format!("bad severity {s:?}")))?),
            };
            let features = rec
                .iter()
                .skip(5)
                .enumerate()
                .map(|(i, s)| {
                    s.parse::<f32>()
                        .map_err(|_| row_err(format!("feature f{i:02}: cannot parse {s:?}")))
                })
                .collect::<Result<Vec<f32>, _>>()?;
            let frame = FrameFeatures {
                speaker_id: rec[0].to_string(),
                recording_id: rec[1].to_string(),
                frame_index,
                label,
                severity,
                features,
            };
            frame.check().map_err(row_err)?;
            frames.push(frame);
        }
        Self::new(frames)
    }
}

/// Population z-score with an epsilon guard. Returns `None` for a
/// degenerate (constant) input, in which case the output is all zeros.
pub fn zscore<T: Real>(samples: &[T]) -> (Vec<T>, bool) {
    let n = T::from_count(samples.len());
    let mean = samples.iter().copied().sum::<T>() / n;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std <= T::lit(ZSCORE_EPS) {
        return (vec![T::zero(); samples.len()], true);
    }
    (samples.iter().map(|&x| (x - mean) / std).collect(), false)
}

/// Audio of one speaker, possibly split over several recordings.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerAudio<T> {
    pub speaker_id: String,
    pub recordings: Vec<(String, Vec<T>)>,
}

/// Normalizes each speaker's audio to zero mean and unit variance, pooling
/// statistics over all of that speaker's recordings.
///
/// Constant speakers are zeroed and their ids are returned (and logged).
pub fn zscore_per_speaker<T: Real>(speakers: &mut [SpeakerAudio<T>]) -> Result<Vec<String>, CorpusError> {
    let mut degenerate = Vec::new();
    for spk in speakers.iter_mut() {
        let pooled: Vec<T> = spk.recordings.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        if pooled.is_empty() {
            return Err(CorpusError::EmptySpeaker(spk.speaker_id.clone()));
        }
        let (normed, flat) = zscore(&pooled);
        if flat {
            log::warn!("speaker {} has constant audio; normalized to zeros", spk.speaker_id);
            degenerate.push(spk.speaker_id.clone());
        }
        let mut it = normed.into_iter();
        for (_, rec) in spk.recordings.iter_mut() {
            for v in rec.iter_mut() {
                *v = it.next().expect("pooled length matches");
            }
        }
    }
    Ok(degenerate)
}

/// Drops one uniformly chosen segment from every consecutive block of four.
/// A trailing block shorter than four is kept whole.
pub fn subsample_victim_segments<S: Clone>(segments: &[S], seed: u64) -> Vec<S> {
    let mut rng = seeded(seed);
    let mut kept = Vec::with_capacity(segments.len());
    let mut blocks = segments.chunks(4);
    for block in blocks.by_ref() {
        if block.len() < 4 {
            kept.extend_from_slice(block);
            break;
        }
        let drop = rng.random_range(0..4);
        kept.extend(block.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, s)| s.clone()));
    }
    kept
}

/// Parameters of the planted-structure synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub recordings_per_speaker: usize,
    /// Frames per speaker, spread as evenly as possible over recordings.
    pub frames_per_speaker: usize,
    /// Scale of each speaker's fixed signature vector.
    pub speaker_signature_scale: f64,
    /// Magnitude of the shared condition direction for a severity-20 victim.
    pub condition_signal_scale: f64,
    /// Exponent on `severity / 20` modulating the condition magnitude.
    pub severity_coupling: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            recordings_per_speaker: 2,
            frames_per_speaker: 240,
            speaker_signature_scale: 1.0,
            condition_signal_scale: 3.0,
            severity_coupling: 0.5,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Synth(m.to_string()));
        if self.n_speakers < 4 {
            return fail("n_speakers must be at least 4");
        }
        if self.n_speakers % 2 != 0 {
            return fail("n_speakers must be even (half per class)");
        }
        if self.recordings_per_speaker == 0 {
            return fail("recordings_per_speaker must be at least 1");
        }
        if self.frames_per_speaker < self.recordings_per_speaker {
            return fail("frames_per_speaker must be at least recordings_per_speaker");
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.speaker_signature_scale) {
            return fail("speaker_signature_scale must be finite and >= 0");
        }
        if !finite_nonneg(self.condition_signal_scale) {
            return fail("condition_signal_scale must be finite and >= 0");
        }
        if !finite_nonneg(self.noise_scale) {
            return fail("noise_scale must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.severity_coupling) {
            return fail("severity_coupling must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Generates the synthetic corpus.
///
/// Speaker `k` gets signature `scale_s * z_k` with `z_k ~ N(0, I)`, projected
/// onto the complement of a shared unit direction `d`, so identity alone says
/// nothing about the condition. Victims (even indices) add
/// `scale_c * (severity / 20)^coupling * d`; every frame adds `noise * N(0, I)`.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<(CorpusManifest, FeatureSet), CorpusError> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let gauss = |rng: &mut crate::rng::SplitMix64| -> f64 { StandardNormal.sample(rng) };

    let mut direction: Vec<f64> = (0..FEATURE_DIM).map(|_| gauss(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let width = (spec.n_speakers - 1).to_string().len().max(3);
    let mut speakers = Vec::with_capacity(spec.n_speakers);
    let mut frames = Vec::with_capacity(spec.n_speakers * spec.frames_per_speaker);
    for k in 0..spec.n_speakers {
        let speaker_id = format!("spk{k:0width$}");
        let condition = if k % 2 == 0 { Condition::Victim } else { Condition::NonVictim };
        let mut signature: Vec<f64> = (0..FEATURE_DIM)
            .map(|_| spec.speaker_signature_scale * gauss(&mut rng))
            .collect();
        // keep identity out of the condition direction
        let along: f64 = signature.iter().zip(&direction).map(|(s, d)| s * d).sum();
        signature.iter_mut().zip(&direction).for_each(|(s, d)| *s -= along * d);
        let severity = condition
            .is_victim()
            .then(|| (rng.random::<f64>() * SEVERITY_MAX as f64) as f32);
        let amplitude = match severity {
            Some(s) => spec.condition_signal_scale * (s as f64 / SEVERITY_MAX as f64).powf(spec.severity_coupling),
            None => 0.0,
        };
        let centre: Vec<f64> = signature
            .iter()
            .zip(&direction)
            .map(|(s, d)| s + amplitude * d)
            .collect();

        let base = spec.frames_per_speaker / spec.recordings_per_speaker;
        let extra = spec.frames_per_speaker % spec.recordings_per_speaker;
        let mut recordings = Vec::with_capacity(spec.recordings_per_speaker);
        for r in 0..spec.recordings_per_speaker {
            let recording_id = format!("rec{r:02}");
            let count = base + usize::from(r < extra);
            let indices: Vec<u32> = (0..count as u32).collect();
            for &frame_index in &indices {
                let features = centre
                    .iter()
                    .map(|c| (c + spec.noise_scale * gauss(&mut rng)) as f32)
                    .collect();
                frames.push(FrameFeatures {
                    speaker_id: speaker_id.clone(),
                    recording_id: recording_id.clone(),
                    frame_index,
                    label: condition,
                    severity,
                    features,
                });
            }
            recordings.push(RecordingRef {
                recording_id,
                frames: indices,
            });
        }
        speakers.push(SpeakerRecord {
            speaker_id,
            condition,
            severity,
            recordings,
        });
    }
    let manifest = CorpusManifest::new(speakers);
    let set = FeatureSet::new(frames)?;
    Ok((manifest, set))
}
