//! Feature extraction from a directory of recordings.
//!
//! Layout: `<root>/<speaker_id>/<recording_id>.wav`, 16 kHz mono PCM
//! (16-bit integer or 32-bit float). A `.txt` file holding whitespace
//! separated samples is accepted in place of a WAV. Labels come from a CSV with header
//! `speaker_id,label,severity` (label 1 = victim, severity empty otherwise).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

use crate::corpus::{subsample_victim_segments, zscore_per_speaker, Condition, CorpusError, FeatureSet, FrameFeatures, SpeakerAudio, SAMPLE_RATE, SEVERITY_MAX};
use crate::dsp::{AnalysisConfig, Analyzer, DspError};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("{path}: expected {expected} Hz mono, found {rate} Hz with {channels} channel(s)")]
    Format {
        path: PathBuf,
        expected: u32,
        rate: u32,
        channels: u16,
    },
    #[error("labels line {line}: {msg}")]
    Labels { line: u64, msg: String },
    #[error("speaker {0} has no entry in the label file")]
    Unlabelled(String),
    #[error("no recordings found under {0}")]
    Empty(PathBuf),
    #[error("no usable recordings; {0} file(s) failed")]
    NothingExtracted(usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Reads whitespace-separated float samples, assumed to be at the corpus rate.
pub fn read_raw_text(path: &Path) -> Result<Vec<f64>, AudioError> {
    let text = fs::read_to_string(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.split_whitespace()
        .enumerate()
        .map(|(i, tok)| match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(AudioError::Wav {
                path: path.to_path_buf(),
                msg: format!("sample {i}: bad value {tok:?}"),
            }),
        })
        .collect()
}

fn read_recording(path: &Path, rate: u32) -> Result<Vec<f64>, AudioError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("txt")) {
        read_raw_text(path)
    } else {
        read_wav(path, rate)
    }
}

/// Reads a mono WAV at `expected_rate` into samples in [-1, 1).
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f64>, AudioError> {
    let wav_err = |e: hound::Error| AudioError::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate || spec.channels != 1 {
        return Err(AudioError::Format {
            path: path.to_path_buf(),
            expected: expected_rate,
            rate: spec.sample_rate,
            channels: spec.channels,
        });
    }
    match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale).map_err(wav_err))
                .collect()
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from).map_err(wav_err))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerLabel {
    pub condition: Condition,
    pub severity: Option<f32>,
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, SpeakerLabel>, AudioError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| AudioError::Labels { line: 1, msg: e.to_string() })?;
    let headers = rdr.headers().map_err(|e| AudioError::Labels { line: 1, msg: e.to_string() })?.clone();
    if headers.iter().collect::<Vec<_>>() != ["speaker_id", "label", "severity"] {
        return Err(AudioError::Labels {
            line: 1,
            msg: "header must be speaker_id,label,severity".into(),
        });
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| AudioError::Labels {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| AudioError::Labels { line, msg };
        let id = rec[0].to_string();
        let condition = match &rec[1] {
            "0" => Condition::NonVictim,
            "1" => Condition::Victim,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        let severity = match (condition, rec[2].trim()) {
            (Condition::NonVictim, "") => None,
            (Condition::NonVictim, _) => return Err(bad("severity given for a non-victim".into())),
            (Condition::Victim, "") => return Err(bad("victim without severity".into())),
            (Condition::Victim, s) => {
                let v: f32 = s.parse().map_err(|_| bad(format!("bad severity {s:?}")))?;
                if !(0.0..=SEVERITY_MAX).contains(&v) {
                    return Err(bad(format!("severity {v} outside [0, {SEVERITY_MAX}]")));
                }
                Some(v)
            }
        };
        if out.insert(id.clone(), SpeakerLabel { condition, severity }).is_some() {
            return Err(bad(format!("duplicate speaker {id}")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub analysis: AnalysisConfig,
    /// Drop one random 1-second segment in every four for victims.
    pub subsample_victims: bool,
    pub seed: u64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            analysis: AnalysisConfig::default(),
            subsample_victims: false,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct ExtractReport {
    pub features: FeatureSet,
    /// Files or speakers that were skipped, with the reason.
    pub errors: Vec<AudioError>,
    /// Speakers whose audio was constant (z-scored to zeros).
    pub degenerate: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, AudioError> {
    let io = |source| AudioError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut v: Vec<PathBuf> = fs::read_dir(dir).map_err(io)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(io)?;
    v.sort();
    Ok(v)
}

/// Extracts one 38-value row per whole second of every recording. Files
/// that fail to load are reported and skipped.
pub fn extract_dir(root: &Path, labels: &BTreeMap<String, SpeakerLabel>, opts: &ExtractOptions) -> Result<ExtractReport, AudioError> {
    let analyzer = Analyzer::<f64>::new(opts.analysis.clone())?;
    let frame_len = opts.analysis.frame_len();
    let mut errors = Vec::new();
    let mut speakers: Vec<(SpeakerAudio<f64>, SpeakerLabel)> = Vec::new();
    let mut n_files = 0usize;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let wavs: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("wav") || e.eq_ignore_ascii_case("txt"))
            })
            .collect();
        n_files += wavs.len();
        if wavs.is_empty() {
            continue;
        }
        let Some(&label) = labels.get(&id) else {
            warn!("skipping speaker {id}: not in label file");
            errors.push(AudioError::Unlabelled(id));
            continue;
        };
        let mut recordings = Vec::new();
        for wav in wavs {
            match read_recording(&wav, opts.analysis.sample_rate as u32) {
                Ok(samples) => {
                    let rec = wav.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                    recordings.push((rec, samples));
                }
                Err(e) => {
                    warn!("skipping {e}");
                    errors.push(e);
                }
            }
        }
        if !recordings.is_empty() {
            speakers.push((SpeakerAudio { speaker_id: id, recordings }, label));
        }
    }
    if n_files == 0 {
        return Err(AudioError::Empty(root.to_path_buf()));
    }
    if speakers.is_empty() {
        return Err(AudioError::NothingExtracted(errors.len()));
    }
    let mut audio: Vec<SpeakerAudio<f64>> = speakers.iter().map(|(a, _)| a.clone()).collect();
    let degenerate = zscore_per_speaker(&mut audio)?;
    let mut frames = Vec::new();
    for (si, (spk, (_, label))) in audio.iter().zip(&speakers).enumerate() {
        for (ri, (rec, samples)) in spk.recordings.iter().enumerate() {
            let mut segments: Vec<(u32, &[f64])> = samples.chunks_exact(frame_len).enumerate().map(|(i, c)| (i as u32, c)).collect();
            if opts.subsample_victims && label.condition.is_victim() {
                segments = subsample_victim_segments(&segments, derive_seed(opts.seed, ((si as u64) << 32) | ri as u64));
            }
            for (frame_index, seg) in segments {
                let features = analyzer.extract_frame(seg)?.into_iter().map(|v| v as f32).collect();
                frames.push(FrameFeatures {
                    speaker_id: spk.speaker_id.clone(),
                    recording_id: rec.clone(),
                    frame_index,
                    label: label.condition,
                    severity: label.severity,
                    features,
                });
            }
        }
    }
    Ok(ExtractReport {
        features: FeatureSet::new(frames)?,
        errors,
        degenerate,
    })
}

/// Writes 16-bit mono PCM at the corpus sample rate.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| AudioError::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}
