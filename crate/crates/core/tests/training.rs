mod common;

use spkguard_core::adversarial::{predict_victim, train_icm, train_ism, train_usm, FoldSpec, ProbeSplit, TrainConfig};
use spkguard_core::corpus::{generate_synthetic_corpus, SynthSpec};
use spkguard_core::eval::majority_vote;
use spkguard_core::runner::{run_dam, run_icm, run_usm, RunError, RunOptions, AUDIT_FILE, MODEL_FILE, TRACE_FILE};
use spkguard_core::Dataset;

fn corpus(n: usize, frames: usize, sigma_s: f64, sigma_c: f64, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n_speakers: n,
        recordings_per_speaker: 2,
        frames_per_speaker: frames,
        speaker_signature_scale: sigma_s,
        condition_signal_scale: sigma_c,
        severity_coupling: 0.0,
        noise_scale: 1.0,
        seed,
    };
    Dataset::from_features(&generate_synthetic_corpus(&spec).unwrap().1)
}

fn cfg() -> TrainConfig {
    let mut c = TrainConfig::synthetic();
    c.schedule.starter_lr = 1e-3;
    c.epochs = 3;
    c
}

/// Two-sided 95% binomial acceptance band for `n` trials at `p`.
fn binomial_band(n: u64, p: f64) -> (u64, u64) {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let b = Binomial::new(p, n).unwrap();
    (b.inverse_cdf(0.025), b.inverse_cdf(0.975))
}

#[test]
fn separable_corpus_trains_above_95_percent() {
    let data = corpus(8, 40, 0.3, 6.0, 1);
    let fold = &FoldSpec::loso(&data)[0];
    let icm = train_icm(&data, fold, &cfg()).unwrap();
    let rows = fold.train_rows(&data);
    let probs = predict_victim(&icm.params, &data, &rows).unwrap();
    let hits = rows
        .iter()
        .zip(&probs)
        .filter(|(&r, &p)| (p > 0.5) == (data.cond[r] == 1))
        .count();
    assert!(hits as f64 > 0.95 * rows.len() as f64, "{hits}/{}", rows.len());
    assert_eq!(icm.audit.held_out_rows_seen, 0);
    assert!(icm.trace.len() <= cfg().init_epochs);
}

#[test]
fn no_condition_signal_is_chance_at_user_level() {
    let n = 20;
    let data = corpus(n, 30, 1.0, 0.0, 2);
    let mut correct = 0;
    for fold in FoldSpec::loso(&data) {
        let icm = train_icm(&data, &fold, &cfg()).unwrap();
        let probs = predict_victim(&icm.params, &data, &fold.test_rows(&data)).unwrap();
        let truth = data.speakers[fold.held_out].condition;
        correct += usize::from(majority_vote(&probs).unwrap() == truth);
    }
    let (lo, hi) = binomial_band(n as u64, 0.5);
    assert!((lo..=hi).contains(&(correct as u64)), "{correct}/{n} outside [{lo}, {hi}]");
}

#[test]
fn speaker_probe_tracks_signature_strength() {
    let mut c = cfg();
    c.probe_epochs = 20;
    let strong = corpus(10, 60, 2.0, 0.0, 3);
    let split = ProbeSplit::new(&strong, 0.2, 0).unwrap();
    let ism = train_ism(&strong, &split, &c).unwrap();
    assert!(ism.accuracy >= 90.0, "{}", ism.accuracy);

    let null = corpus(10, 60, 0.0, 0.0, 4);
    let split = ProbeSplit::new(&null, 0.2, 0).unwrap();
    let ism = train_ism(&null, &split, &c).unwrap();
    let n = split.test_rows.len() as u64;
    // frames are i.i.d. here, so a frame-level band is valid
    let (lo, hi) = binomial_band(n, 0.1);
    let hits = (ism.accuracy / 100.0 * n as f64).round() as u64;
    assert!((lo..=hi).contains(&hits), "{hits}/{n} outside [{lo}, {hi}]");

    let per_speaker_defined = ism.per_speaker.iter().filter(|v| v.is_finite()).count();
    assert_eq!(per_speaker_defined, 10);
}

#[test]
fn usm_leaves_encoder_untouched_and_beats_chance() {
    let data = corpus(6, 40, 2.0, 4.0, 5);
    let split = ProbeSplit::new(&data, 0.2, 0).unwrap();
    let mut c = cfg();
    c.probe_epochs = 10;
    let encoder = spkguard_core::Network::init(&c.architecture, 6, 9).encoder;
    let before = encoder.checksum();
    let usm = train_usm(&encoder, &data, &split, &c, 1).unwrap();
    assert_eq!(usm.encoder_checksum_before, before);
    assert_eq!(usm.encoder_checksum_after, before);
    assert_eq!(encoder.checksum(), before);
    assert!(usm.accuracy > 100.0 / 6.0, "{}", usm.accuracy);
    assert_eq!(usm.head.output_dim(), 6);
}

#[test]
fn runner_writes_artifacts_and_resumes() {
    let data = corpus(4, 16, 1.0, 4.0, 6);
    let tmp = tempfile::tempdir().unwrap();
    let mut opts = RunOptions {
        run_dir: tmp.path().to_path_buf(),
        jobs: 2,
        force: false,
    };
    let c = cfg();
    assert!(matches!(run_usm(&data, &c, &opts), Err(RunError::MissingEncoder { fold: 0, .. })));
    let first = run_dam(&data, &c, &opts).unwrap();
    assert_eq!(first.trained, vec![0, 1, 2, 3]);
    for model in ["icm", "dam"] {
        for fold in 0..4 {
            let d = spkguard_core::eval::fold_dir(tmp.path(), model, fold);
            for f in [MODEL_FILE, TRACE_FILE, AUDIT_FILE, "result.json"] {
                assert!(d.join(f).is_file(), "{}", d.join(f).display());
            }
        }
    }
    let trace = std::fs::read_to_string(spkguard_core::eval::fold_dir(tmp.path(), "dam", 0).join(TRACE_FILE)).unwrap();
    assert_eq!(trace.lines().count(), 1 + c.epochs);
    assert_eq!(trace.lines().next().unwrap(), "epoch,l_cond,l_spk,l_t");

    let model_bytes = std::fs::read(spkguard_core::eval::fold_dir(tmp.path(), "dam", 2).join(MODEL_FILE)).unwrap();
    std::fs::remove_file(spkguard_core::eval::fold_dir(tmp.path(), "dam", 2).join("result.json")).unwrap();
    let second = run_dam(&data, &c, &opts).unwrap();
    assert_eq!(second.trained, vec![2]);
    assert_eq!(second.skipped, vec![0, 1, 3]);
    // same seeds, same fold: identical model
    assert_eq!(std::fs::read(spkguard_core::eval::fold_dir(tmp.path(), "dam", 2).join(MODEL_FILE)).unwrap(), model_bytes);

    opts.force = true;
    assert_eq!(run_icm(&data, &c, &opts).unwrap().trained.len(), 4);
    assert_eq!(run_usm(&data, &c, &opts).unwrap().trained.len(), 4);
}
