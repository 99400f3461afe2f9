//! Dense training view of a [`FeatureSet`]: a feature matrix plus per-row
//! condition, speaker and recording indices.

use std::collections::HashMap;

use ndarray::{Array2, Axis};

use crate::corpus::{Condition, FeatureSet, FEATURE_DIM};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerInfo {
    pub id: String,
    pub condition: Condition,
    pub severity: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub x: Array2<T>,
    /// Condition class per row (1 = victim).
    pub cond: Vec<usize>,
    /// Index into `speakers` per row.
    pub speaker: Vec<usize>,
    /// Index into `recordings` per row.
    pub recording: Vec<usize>,
    pub speakers: Vec<SpeakerInfo>,
    /// `(speaker index, recording id)`.
    pub recordings: Vec<(usize, String)>,
}

impl<T: Real> Dataset<T> {
    pub fn rows(&self, rows: &[usize]) -> Array2<T> {
        self.x.select(Axis(0), rows)
    }

    /// Speakers and recordings are indexed in first-seen order.
    pub fn from_features(set: &FeatureSet) -> Self {
        let n = set.len();
        let mut x = Array2::zeros((n, FEATURE_DIM));
        let mut cond = Vec::with_capacity(n);
        let mut speaker = Vec::with_capacity(n);
        let mut recording = Vec::with_capacity(n);
        let mut speakers: Vec<SpeakerInfo> = Vec::new();
        let mut spk_index: HashMap<&str, usize> = HashMap::new();
        let mut recordings: Vec<(usize, String)> = Vec::new();
        let mut rec_index: HashMap<(usize, &str), usize> = HashMap::new();
        for (row, f) in set.frames.iter().enumerate() {
            for (dst, &v) in x.row_mut(row).iter_mut().zip(&f.features) {
                *dst = T::lit(v as f64);
            }
            let s = *spk_index.entry(f.speaker_id.as_str()).or_insert_with(|| {
                speakers.push(SpeakerInfo {
                    id: f.speaker_id.clone(),
                    condition: f.label,
                    severity: f.severity,
                });
                speakers.len() - 1
            });
            let r = *rec_index.entry((s, f.recording_id.as_str())).or_insert_with(|| {
                recordings.push((s, f.recording_id.clone()));
                recordings.len() - 1
            });
            cond.push(f.label.class_index());
            speaker.push(s);
            recording.push(r);
        }
        Self {
            x,
            cond,
            speaker,
            recording,
            speakers,
            recordings,
        }
    }

}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn rows_of_speaker(&self, s: usize) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.speaker[r] == s).collect()
    }

    /// Recording indices of speaker `s`, in first-seen order.
    pub fn recordings_of_speaker(&self, s: usize) -> Vec<usize> {
        (0..self.recordings.len()).filter(|&r| self.recordings[r].0 == s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthSpec};

    #[test]
    fn indices_follow_first_seen_order() {
        let spec = SynthSpec {
            n_speakers: 4,
            frames_per_speaker: 6,
            recordings_per_speaker: 2,
            ..SynthSpec::default()
        };
        let (_, set) = generate_synthetic_corpus(&spec).unwrap();
        let d: Dataset<f64> = Dataset::from_features(&set);
        assert_eq!(d.len(), 24);
        assert_eq!(d.n_speakers(), 4);
        assert_eq!(d.recordings.len(), 8);
        assert_eq!(d.speakers[0].id, "spk000");
        assert_eq!(d.rows_of_speaker(1), (6..12).collect::<Vec<_>>());
        assert_eq!(d.recordings_of_speaker(2), vec![4, 5]);
        assert_eq!(d.x[[7, 3]], set.frames[7].features[3] as f64);
        assert_eq!(d.cond[0], 1);
        assert_eq!(d.cond[6], 0);
    }
}
