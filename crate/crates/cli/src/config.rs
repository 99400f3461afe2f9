//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in profile, then the `--config` file, then
//! command-line flags. Unknown keys and malformed values are collected and
//! reported together before any work starts.

use std::path::PathBuf;
use std::str::FromStr;

use spkguard_core::adversarial::{SpeakerInit, StepGranularity, TrainConfig};
use spkguard_core::corpus::SynthSpec;
use spkguard_core::dsp::AnalysisConfig;
use spkguard_core::eval::TTestKind;

pub const PAPER_PROFILE: &str = include_str!("../profiles/paper.conf");
pub const SYNTHETIC_PROFILE: &str = include_str!("../profiles/synthetic.conf");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Paper,
    Synthetic,
}

impl Profile {
    pub fn text(self) -> &'static str {
        match self {
            Profile::Paper => PAPER_PROFILE,
            Profile::Synthetic => SYNTHETIC_PROFILE,
        }
    }

    /// Label used in configuration diagnostics.
    pub fn source_name(self) -> &'static str {
        match self {
            Profile::Paper => "profile paper",
            Profile::Synthetic => "profile synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_dir: Option<PathBuf>,
    /// Defaults to `<run_dir>/features.csv`.
    pub features: Option<PathBuf>,
    pub wav_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub subsample_victims: bool,
    pub jobs: usize,
    pub ttest: TTestKind,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: None,
            features: None,
            wav_dir: None,
            labels: None,
            subsample_victims: false,
            jobs: 1,
            ttest: TTestKind::Student,
            train: TrainConfig::paper(),
            synth: SynthSpec::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// One problem found while reading a configuration source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub source: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.msg),
            None => write!(f, "{}: {}", self.source, self.msg),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn dims_text(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overlaid with a built-in profile.
    pub fn from_profile(profile: Profile) -> Result<Self, Vec<ConfigIssue>> {
        let mut c = Self::default();
        let mut issues = Vec::new();
        c.apply_text(profile.text(), profile.source_name(), &mut issues);
        c.validate(&mut issues);
        if issues.is_empty() {
            Ok(c)
        } else {
            Err(issues)
        }
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let s = &mut self.synth;
        let a = &mut self.analysis;
        match key {
            "run_dir" => self.run_dir = Some(PathBuf::from(value)),
            "features" => self.features = Some(PathBuf::from(value)),
            "wav_dir" => self.wav_dir = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "subsample_victims" => self.subsample_victims = parse_bool(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "ttest" => {
                self.ttest = match value {
                    "student" => TTestKind::Student,
                    "welch" => TTestKind::Welch,
                    _ => return Err(format!("{key}: expected student or welch, got {value:?}")),
                }
            }
            "seed" => {
                let v: u64 = parse(key, value)?;
                t.seed = v;
                s.seed = v;
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "starter_lr" => t.schedule.starter_lr = parse(key, value)?,
            "decay_steps" => t.schedule.decay_steps = parse(key, value)?,
            "decay_rate" => t.schedule.decay_rate = parse(key, value)?,
            "init_epochs" => t.init_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "probe_epochs" => t.probe_epochs = parse(key, value)?,
            "test_fraction" => t.test_fraction = parse(key, value)?,
            "granularity" => {
                t.granularity = StepGranularity::parse(value).ok_or_else(|| format!("{key}: expected pass or batch, got {value:?}"))?
            }
            "speaker_init" => {
                t.speaker_init = SpeakerInit::parse(value).ok_or_else(|| format!("{key}: expected icm_encoder or isolated, got {value:?}"))?
            }
            "encoder_hidden" => t.architecture.encoder_hidden = parse_dims(key, value)?,
            "embedding_dim" => t.architecture.embedding_dim = parse(key, value)?,
            "head_hidden" => t.architecture.head_hidden = parse_dims(key, value)?,
            "n_speakers" => s.n_speakers = parse(key, value)?,
            "recordings_per_speaker" => s.recordings_per_speaker = parse(key, value)?,
            "frames_per_speaker" => s.frames_per_speaker = parse(key, value)?,
            "speaker_signature_scale" => s.speaker_signature_scale = parse(key, value)?,
            "condition_signal_scale" => s.condition_signal_scale = parse(key, value)?,
            "severity_coupling" => s.severity_coupling = parse(key, value)?,
            "noise_scale" => s.noise_scale = parse(key, value)?,
            "window" => a.window = parse(key, value)?,
            "hop" => a.hop = parse(key, value)?,
            "fft_size" => a.fft_size = parse(key, value)?,
            "n_mels" => a.n_mels = parse(key, value)?,
            "rolloff_fraction" => a.rolloff_fraction = parse(key, value)?,
            "pitch_min_hz" => a.pitch_min_hz = parse(key, value)?,
            "pitch_max_hz" => a.pitch_max_hz = parse(key, value)?,
            "voicing_threshold" => a.voicing_threshold = parse(key, value)?,
            "pitch_voiced_only" => a.pitch_voiced_only = parse_bool(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a whole config text; problems are appended to `issues`.
    pub fn apply_text(&mut self, text: &str, source: &str, issues: &mut Vec<ConfigIssue>) {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let issue = |msg: String| ConfigIssue {
                source: source.to_string(),
                line: Some(i + 1),
                msg,
            };
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(msg) = self.set(k.trim(), v.trim()) {
                        issues.push(issue(msg));
                    }
                }
                None => issues.push(issue(format!("expected key = value, got {line:?}"))),
            }
        }
    }

    /// Semantic checks across all sections.
    pub fn validate(&self, issues: &mut Vec<ConfigIssue>) {
        let mut push = |msg: String| {
            issues.push(ConfigIssue {
                source: "config".into(),
                line: None,
                msg,
            })
        };
        if let Err(e) = self.train.validate() {
            push(e.to_string());
        }
        if self.train.architecture.embedding_dim == 0 || self.train.architecture.encoder_hidden.contains(&0) || self.train.architecture.head_hidden.contains(&0) {
            push("layer sizes must be positive".into());
        }
        if let Err(e) = self.synth.validate() {
            push(e.to_string());
        }
        if let Err(e) = self.analysis.validate() {
            push(e.to_string());
        }
        if self.jobs == 0 {
            push("jobs must be >= 1".into());
        }
    }

    pub fn features_path(&self) -> Option<PathBuf> {
        self.features.clone().or_else(|| self.run_dir.as_ref().map(|d| d.join("features.csv")))
    }

    /// Canonical text form; feeding it back through [`apply_text`]
    /// reproduces the configuration.
    ///
    /// [`apply_text`]: RunConfig::apply_text
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let a = &self.analysis;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut kv = |k: &str, v: String| lines.push((k.to_string(), v));
        for (k, v) in [("run_dir", path(&self.run_dir)), ("features", path(&self.features)), ("wav_dir", path(&self.wav_dir)), ("labels", path(&self.labels))] {
            if let Some(v) = v {
                kv(k, v);
            }
        }
        kv("subsample_victims", self.subsample_victims.to_string());
        kv("jobs", self.jobs.to_string());
        kv(
            "ttest",
            match self.ttest {
                TTestKind::Student => "student",
                TTestKind::Welch => "welch",
            }
            .into(),
        );
        kv("seed", t.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lambda", t.lambda.to_string());
        kv("momentum", t.momentum.to_string());
        kv("starter_lr", format!("{:e}", t.schedule.starter_lr));
        kv("decay_steps", t.schedule.decay_steps.to_string());
        kv("decay_rate", t.schedule.decay_rate.to_string());
        kv("init_epochs", t.init_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("probe_epochs", t.probe_epochs.to_string());
        kv("test_fraction", t.test_fraction.to_string());
        kv("granularity", t.granularity.name().into());
        kv("speaker_init", t.speaker_init.name().into());
        kv("encoder_hidden", dims_text(&t.architecture.encoder_hidden));
        kv("embedding_dim", t.architecture.embedding_dim.to_string());
        kv("head_hidden", dims_text(&t.architecture.head_hidden));
        kv("n_speakers", s.n_speakers.to_string());
        kv("recordings_per_speaker", s.recordings_per_speaker.to_string());
        kv("frames_per_speaker", s.frames_per_speaker.to_string());
        kv("speaker_signature_scale", s.speaker_signature_scale.to_string());
        kv("condition_signal_scale", s.condition_signal_scale.to_string());
        kv("severity_coupling", s.severity_coupling.to_string());
        kv("noise_scale", s.noise_scale.to_string());
        kv("window", a.window.to_string());
        kv("hop", a.hop.to_string());
        kv("fft_size", a.fft_size.to_string());
        kv("n_mels", a.n_mels.to_string());
        kv("rolloff_fraction", a.rolloff_fraction.to_string());
        kv("pitch_min_hz", a.pitch_min_hz.to_string());
        kv("pitch_max_hz", a.pitch_max_hz.to_string());
        kv("voicing_threshold", a.voicing_threshold.to_string());
        kv("pitch_voiced_only", a.pitch_voiced_only.to_string());
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
