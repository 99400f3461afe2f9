//! One check per acceptance criterion. Each returns a short detail line on
//! success and the reason on failure.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use spkguard_core::adversarial::{
    encoder_gradient_paths, main_step_gradients, train_dam, FoldSpec, PhaseKind, TrainConfig,
};
use spkguard_core::corpus::{generate_synthetic_corpus, SynthSpec};
use spkguard_core::dsp::{rms, window_frames, zcr, AnalysisConfig, DspError, N_DESCRIPTORS};
use spkguard_core::eval::{
    fmt2, scaled_severity, severity_analysis, t_two_tailed_p, ttest_two_sample, ConfusionMatrix2x2, EvalReport, TTestKind,
};
use spkguard_core::nn::{cross_entropy, load_model, one_hot, save_model, GradientReversal, NetworkParams, NnError, Targets};
use spkguard_core::runner::{run_dam, run_icm, run_ism, run_usm, write_manifest, RunOptions};
use spkguard_core::{Analyzer, Dataset};

use super::*;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const LAMBDA: f64 = 0.2;

pub fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for seed in 0..20 {
        let t = Toy::new(seed);
        let onehot: Array2<f64> = one_hot(&t.spk, t.n_speakers).map_err(|e| e.to_string())?;
        let g = main_step_gradients(&t.params, t.x.view(), &t.cond, onehot.view(), LAMBDA).map_err(|e| e.to_string())?;
        let fwd = t.params.forward(t.x.view()).map_err(|e| e.to_string())?;
        let (_, d_spk) = cross_entropy(fwd.spk_probs().view(), Targets::Categorical(onehot.view())).map_err(|e| e.to_string())?;
        let (g_spk, _) = t.params.spk_head.backward(&fwd.spk, d_spk.view(), false);
        let g_spk = g_spk.scaled(-(1.0 - LAMBDA));
        let f = |p: &NetworkParams<f64>| composite(p, &t.x, &t.cond, &t.spk, LAMBDA);
        for (block, analytic) in [
            ("encoder", g.encoder.flatten()),
            ("cond_head", g.cond_head.flatten()),
            ("spk_head", g_spk.flatten()),
        ] {
            let out = fd_check(&t.params, block, &analytic, &f);
            ensure(out.checked > 0, || format!("net {seed} {block}: no parameter checked"))?;
            ensure(out.worst < 1e-4, || format!("net {seed} {block}: rel err {:.2e}", out.worst))?;
            checked += out.checked;
            skipped += out.skipped;
            worst = worst.max(out.worst);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(skipped * 100 <= checked, || format!("{skipped} relu-kink skips of {checked}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{checked} parameters over 20 nets, worst rel err {worst:.1e}, {skipped} kink skips, {secs:.2} s"))
}

pub fn grl_contract() -> Outcome {
    let mut r = rng(77);
    use rand::Rng;
    let v = Array2::from_shape_fn((9, 7), |_| r.random_range(-1e3..1e3) * r.random::<f64>());
    let fwd = GradientReversal.forward(v.view());
    ensure(fwd.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()), || "forward not bitwise identity".into())?;
    let back = GradientReversal.backward(v.view());
    ensure(back.iter().zip(&v).all(|(a, b)| a.to_bits() == (-b).to_bits()), || "backward not exact negation".into())?;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let t = Toy::new(500 + seed);
        let onehot: Array2<f64> = one_hot(&t.spk, t.n_speakers).map_err(|e| e.to_string())?;
        let g = main_step_gradients(&t.params, t.x.view(), &t.cond, onehot.view(), LAMBDA).map_err(|e| e.to_string())?;
        let (c, s) = encoder_gradient_paths(&t.params, t.x.view(), &t.cond, onehot.view()).map_err(|e| e.to_string())?;
        for ((a, c), s) in g.encoder.flatten().iter().zip(c.flatten()).zip(s.flatten()) {
            let b = LAMBDA * c - (1.0 - LAMBDA) * s;
            if a != &b {
                worst = worst.max(rel_err(*a, b, 1e-300));
            }
        }
    }
    ensure(worst < 1e-10, || format!("composite vs assembled paths rel err {worst:.2e}"))?;
    Ok(format!("bitwise forward, exact negation, composite vs assembled paths rel err {worst:.1e}"))
}

/// A corpus small enough for quick training runs.
pub fn small_corpus(seed: u64) -> Dataset {
    let spec = SynthSpec {
        n_speakers: 6,
        recordings_per_speaker: 2,
        frames_per_speaker: 40,
        speaker_signature_scale: 1.0,
        condition_signal_scale: 4.0,
        severity_coupling: 0.5,
        noise_scale: 1.0,
        seed,
    };
    let (_, set) = generate_synthetic_corpus(&spec).expect("valid spec");
    Dataset::from_features(&set)
}

pub fn schedule_audit(cfg: &TrainConfig) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.epochs = 5;
    let data = small_corpus(cfg.seed);
    let folds = FoldSpec::loso(&data);
    let mut batches = 0;
    for fold in folds.iter().take(2) {
        let m = train_dam(&data, fold, &cfg).map_err(|e| format!("fold {}: {e}", fold.fold))?;
        let schedule = m.audit.schedule();
        ensure(schedule.len() == 5, || format!("{} epochs logged", schedule.len()))?;
        m.audit.verify_schedule(cfg.granularity)?;
        for (epoch, kinds) in &schedule {
            let d = kinds.iter().filter(|k| **k == PhaseKind::Domain).count();
            let mm = kinds.iter().filter(|k| **k == PhaseKind::Main).count();
            ensure(d * 2 == mm && d >= 1, || format!("epoch {epoch}: {d} domain, {mm} main"))?;
        }
        ensure(m.audit.frozen_blocks_intact(), || "a frozen block changed".into())?;
        for audit in [&m.audit, &m.icm.audit] {
            ensure(audit.held_out_rows_seen == 0, || format!("{} held-out rows in batches", audit.held_out_rows_seen))?;
            ensure(audit.batches_checked > 0, || "leak audit saw no batches".into())?;
            batches += audit.batches_checked;
        }
        ensure(m.trace.len() == 5, || format!("trace has {} epochs", m.trace.len()))?;
    }
    Ok(format!(
        "5 epochs x (1 domain + 2 main) on 2 folds, frozen checksums intact, 0 held-out frames in {batches} batches"
    ))
}

fn run_opts(dir: &Path) -> RunOptions {
    RunOptions {
        run_dir: dir.to_path_buf(),
        jobs: 1,
        force: false,
    }
}

pub fn unlearning(cfg: &TrainConfig, synth: &SynthSpec) -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        n_speakers: 20,
        recordings_per_speaker: 2,
        frames_per_speaker: 120,
        ..synth.clone()
    };
    let (manifest, set) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    let data: Dataset = Dataset::from_features(&set);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = run_opts(dir.path());
    let err = |e: spkguard_core::runner::RunError| e.to_string();
    write_manifest(dir.path(), &manifest).map_err(err)?;
    run_ism(&data, cfg, &opts).map_err(err)?;
    run_dam(&data, cfg, &opts).map_err(err)?;
    run_usm(&data, cfg, &opts).map_err(err)?;
    let report = EvalReport::load(dir.path(), TTestKind::Student).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(!report.is_partial(), || format!("missing folds: {:?}", report.missing))?;
    let ism = report.ism.as_ref().map(|r| r.accuracy).ok_or("no ISM result")?;
    let (usm, usm_sd) = report.usm_accuracy().ok_or("no USM results")?;
    let icm = report.icm.as_ref().and_then(|s| s.user_accuracy()).ok_or("no ICM results")?;
    let dam = report.dam.as_ref().and_then(|s| s.user_accuracy()).ok_or("no DAM results")?;
    let detail = format!(
        "ISM {ism:.2}%, USM {usm:.2}+-{usm_sd:.2}% (ratio {:.3}), ICM user {icm:.2}%, DAM user {dam:.2}%, {secs:.0} s",
        usm / ism
    );
    ensure(ism >= 90.0, || format!("ISM below 90%: {detail}"))?;
    ensure(icm >= 75.0, || format!("ICM below 75%: {detail}"))?;
    ensure(usm <= 0.8 * ism, || format!("USM above 0.8 x ISM: {detail}"))?;
    ensure(dam >= icm - 2.0, || format!("DAM more than 2 points below ICM: {detail}"))?;
    ensure(secs < 600.0, || format!("over 10 minutes: {detail}"))?;
    Ok(detail)
}

/// User-level outcomes of every synthetic victim, pooled over `seeds`
/// corpora generated with severity coupling 1.
pub fn severity(cfg: &TrainConfig, synth: &SynthSpec, seeds: &[u64]) -> Outcome {
    let mut victims = Vec::new();
    for &seed in seeds {
        let spec = SynthSpec {
            n_speakers: 20,
            recordings_per_speaker: 2,
            frames_per_speaker: 120,
            severity_coupling: 1.0,
            seed,
            ..synth.clone()
        };
        let (_, set) = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
        let data: Dataset = Dataset::from_features(&set);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        run_icm(&data, &cfg, &run_opts(dir.path())).map_err(|e| e.to_string())?;
        let report = EvalReport::load(dir.path(), TTestKind::Student).map_err(|e| e.to_string())?;
        let icm = report.icm.ok_or("no ICM results")?;
        victims.extend(
            icm.folds
                .iter()
                .filter_map(|f| f.severity.map(|s| (f.user_correct(), s as f64))),
        );
    }
    let rep = severity_analysis(&victims, TTestKind::Student).map_err(|e| e.to_string())?;
    let test = rep.test.ok_or_else(|| {
        format!(
            "{} correct / {} misclassified victims, too few for a t-test",
            rep.correct.n, rep.misclassified.n
        )
    })?;
    let (mc, mm) = (rep.correct.mean.unwrap_or(f64::NAN), rep.misclassified.mean.unwrap_or(f64::NAN));
    let detail = format!(
        "{} victims: correct n={} mean {mc:.2}, misclassified n={} mean {mm:.2}, t={:.3}, p={:.2e}",
        victims.len(),
        rep.correct.n,
        rep.misclassified.n,
        test.t,
        test.p
    );
    ensure(mc > mm && test.p < 0.05, || detail.clone())?;
    Ok(detail)
}

pub fn metric_arithmetic() -> Outcome {
    let m = ConfusionMatrix2x2::new(29, 10, 18, 21).metrics();
    let got = [fmt2(m.accuracy), fmt2(m.precision), fmt2(m.recall), fmt2(m.f1)];
    ensure(got == ["64.10", "61.70", "74.36", "67.44"], || format!("bundle {got:?}"))?;
    // the published group mean is itself rounded; any mean that prints as
    // 10.52 and yields 52.59 must lie in [10.517, 10.519)
    let mean = 10.5185;
    let shown = (format!("{mean:.2}"), format!("{:.2}", scaled_severity(mean)));
    ensure(shown == ("10.52".into(), "52.59".into()), || format!("{shown:?}"))?;
    let s = scaled_severity(6.90);
    ensure(format!("{s:.2}") == "34.50" && (s - 34.5).abs() < 1e-12, || format!("6.90 -> {s}"))?;
    Ok(format!("{} / {} / {} / {}; 10.52 -> 52.59, 6.90 -> 34.50", got[0], got[1], got[2], got[3]))
}

pub fn dsp_conformance() -> Outcome {
    let cfg = AnalysisConfig::default();
    let a = Analyzer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let audio: Vec<f64> = (0..16_000).map(|i| i as f64).collect();
    let w = window_frames(&audio, &cfg).map_err(|e| e.to_string())?;
    ensure(w.len() == 99 && w[0][0] == 0.0 && w[0].len() == 320 && w[0][319] == 319.0, || "window layout".into())?;
    ensure(
        matches!(window_frames(&audio[..15_999], &cfg), Err(DspError::WrongLength { .. })),
        || "wrong length accepted".into(),
    )?;

    ensure(rms(&[0.0f64; 320]) == 0.0 && rms(&[-0.25f64; 320]) == 0.25, || "rms of constants".into())?;
    let r = rms(&sine(320, 100.0, 0.8, 0.0));
    ensure((r - 0.8 / 2f64.sqrt()).abs() < 1e-3, || format!("sine rms {r}"))?;

    let alt: Vec<f64> = (0..320).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    ensure(zcr(&[0.3f64; 320]) == 0.0 && zcr(&alt) == 1.0, || "zcr of constant/alternating".into())?;
    let z = zcr(&sine(320, 100.0, 1.0, 0.0));
    ensure((z - 4.0 / 319.0).abs() < 1e-12, || format!("100 Hz zcr {z}"))?;

    let bin = cfg.bin_hz();
    let (c, _, flat_tone) = a.spectrum_descriptors(&a.hann_weighted(&sine(320, 1000.0, 1.0, 0.0)));
    ensure((c - 1000.0).abs() <= bin, || format!("1 kHz centroid {c}"))?;
    ensure(flat_tone < 0.1, || format!("tone flatness {flat_tone}"))?;
    let mut mean_power = vec![0.0; cfg.n_bins()];
    for trial in 0..400 {
        let mag = a.magnitude(&a.hann_weighted(&white_noise(320, 9000 + trial)));
        for (acc, m) in mean_power.iter_mut().zip(mag) {
            *acc += m * m / 400.0;
        }
    }
    let flat_noise = spkguard_core::dsp::spectral_flatness(&mean_power, cfg.log_floor);
    ensure(flat_noise > 0.9, || format!("noise flatness {flat_noise}"))?;
    let silence = vec![0.0f64; 320];
    ensure(a.spectrum_descriptors(&silence) == (0.0, 0.0, 1.0), || "silence spectrum convention".into())?;

    let x = white_noise(320, 41);
    let c1 = a.mfcc(&a.hann_weighted(&x));
    let c2 = a.mfcc(&a.hann_weighted(&x.iter().map(|v| v * 5.0).collect::<Vec<_>>()));
    ensure(c1[1..].iter().zip(&c2[1..]).all(|(p, q)| (p - q).abs() < 1e-6), || "mfcc 1..12 changed under scaling".into())?;
    ensure((c2[0] - c1[0]).abs() > 1.0, || "mfcc 0 did not move under scaling".into())?;
    let cs = a.mfcc(&silence);
    ensure(cs[1..].iter().all(|v| v.abs() < 1e-9), || "silence mfcc 1..12 not zero".into())?;
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let x = white_noise(320, 60 + seed);
        let ours = a.mfcc(&a.hann_weighted(&x));
        let reference = mfcc_reference(&x, cfg.n_mels, cfg.n_mfcc);
        for (p, q) in ours.iter().zip(&reference) {
            worst = worst.max((p - q).abs());
        }
    }
    ensure(worst < 1e-6, || format!("mfcc vs direct DFT oracle {worst:.2e}"))?;

    let p = spkguard_core::dsp::pitch(&sine(320, 200.0, 1.0, 0.0), &cfg);
    ensure((p - 200.0).abs() <= 5.0, || format!("200 Hz pitch {p}"))?;
    let unvoiced = (0..200)
        .filter(|&s| spkguard_core::dsp::pitch(&white_noise(320, 7000 + s), &cfg) == 0.0)
        .count();
    ensure(unvoiced >= 190, || format!("noise unvoiced in {unvoiced}/200"))?;

    let period = sine(160, 100.0, 0.5, 0.0);
    let tiled: Vec<f64> = (0..16_000).map(|i| period[i % 160]).collect();
    let v = a.extract_frame(&tiled).map_err(|e| e.to_string())?;
    ensure(v.len() == 38, || format!("{} features", v.len()))?;
    ensure((0..N_DESCRIPTORS).all(|d| v[2 * d + 1] == 0.0), || "identical windows gave non-zero std".into())?;

    let stable = extraction_is_byte_stable()?;
    Ok(format!("windowing, rms, zcr, spectral, mfcc (oracle {worst:.1e}), pitch, aggregation; {stable}"))
}

fn extraction_is_byte_stable() -> Outcome {
    use spkguard_core::audio::{extract_dir, read_labels, write_wav, ExtractOptions};
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("wav");
    for (spk, hz) in [("A", 180.0), ("B", 240.0)] {
        std::fs::create_dir_all(root.join(spk)).map_err(|e| e.to_string())?;
        let noise = white_noise(48_000, hz as u64);
        let s: Vec<f64> = sine(48_000, hz, 0.4, 0.1).iter().zip(&noise).map(|(a, b)| a + 0.05 * b).collect();
        write_wav(&root.join(spk).join("r0.wav"), &s).map_err(|e| e.to_string())?;
    }
    let labels = tmp.path().join("labels.csv");
    std::fs::write(&labels, "speaker_id,label,severity\nA,1,9.5\nB,0,\n").map_err(|e| e.to_string())?;
    let lab = read_labels(&labels).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let rep = extract_dir(&root, &lab, &ExtractOptions::default()).map_err(|e| e.to_string())?;
        ensure(rep.errors.is_empty(), || format!("{:?}", rep.errors))?;
        let mut buf = Vec::new();
        rep.features.write_to(&mut buf).map_err(|e| e.to_string())?;
        outputs.push(buf);
    }
    ensure(outputs[0] == outputs[1], || "extraction output differs between runs".into())?;
    Ok(format!("extraction byte-stable ({} bytes)", outputs[0].len()))
}

pub fn statistics() -> Outcome {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 3.0, 4.0, 5.0, 6.0];
    let t = ttest_two_sample(&a, &b, TTestKind::Student).map_err(|e| e.to_string())?;
    ensure((t.t + 1.0).abs() < 1e-12 && t.df == 8.0, || format!("t={} df={}", t.t, t.df))?;
    ensure((t.p - 0.3466).abs() < 1e-4, || format!("p={}", t.p))?;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for df in [1.0, 2.0, 3.0, 4.5, 8.0, 17.3, 30.0, 64.0, 120.0, 200.0] {
        for tv in [0.05, 0.5, 1.0, 1.96, 2.7, 4.0, 6.5] {
            let ours = t_two_tailed_p(tv, df);
            let oracle = t_two_tailed_quadrature(tv, df);
            worst = worst.max((ours - oracle).abs());
            cases += 1;
        }
    }
    ensure(worst < 1e-6, || format!("p vs quadrature oracle {worst:.2e}"))?;
    Ok(format!("t=-1.000 p={:.4}; {cases} (t, df) pairs within {worst:.1e} of quadrature", t.p))
}

pub fn serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..20 {
        let t = Toy::new(900 + seed);
        let path = dir.path().join(format!("m{seed}.dspk"));
        save_model(&t.params, &path).map_err(|e| e.to_string())?;
        let back: NetworkParams<f64> = load_model(&path).map_err(|e| e.to_string())?;
        let bits = |p: &NetworkParams<f64>| -> Vec<u64> {
            [&p.encoder, &p.cond_head, &p.spk_head]
                .iter()
                .flat_map(|m| m.flatten())
                .map(f64::to_bits)
                .collect()
        };
        ensure(bits(&back) == bits(&t.params), || format!("net {seed} not bitwise equal"))?;
    }
    let t = Toy::new(999);
    let bytes = t.params.to_bytes();
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cut = 12 + header_len + 8 * t.params.encoder.layers[0].weights.len() + 4;
    let named = match NetworkParams::<f64>::from_bytes(&bytes[..cut]) {
        Err(NnError::Truncated(name)) => name,
        other => return Err(format!("truncated file: {other:?}")),
    };
    ensure(named == "encoder.0.bias", || format!("truncation named {named}"))?;
    let mut flipped = bytes.clone();
    flipped[12 + header_len + 3] ^= 0x40;
    ensure(
        matches!(NetworkParams::<f64>::from_bytes(&flipped), Err(NnError::Checksum { .. })),
        || "payload bit flip accepted".into(),
    )?;
    let mut magic = bytes;
    magic[0] = b'X';
    ensure(
        matches!(NetworkParams::<f64>::from_bytes(&magic), Err(NnError::Format(_))),
        || "bad magic accepted".into(),
    )?;
    Ok(format!("20 bitwise round trips; truncation names {named}; bit flip and bad magic rejected"))
}
