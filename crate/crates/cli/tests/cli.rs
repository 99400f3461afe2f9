use std::path::Path;
use std::process::{Command, Output};

fn spkguard(run_dir: &Path, args: &[&str]) -> Output {
    let tiny = [
        "n_speakers=4",
        "frames_per_speaker=16",
        "epochs=2",
        "init_epochs=2",
        "probe_epochs=2",
        "starter_lr=1e-3",
        "jobs=1",
    ];
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spkguard"));
    cmd.arg("--quiet").arg("--profile").arg("synthetic").arg("--run-dir").arg(run_dir);
    for s in tiny {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_pipeline_on_tiny_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let synth = ok(&spkguard(&run, &["synth"]));
    assert!(synth.contains("speakers: 4 (2 victim, 2 non-victim; 50.00% / 50.00%)"), "{synth}");
    for model in ["dam", "ism", "usm"] {
        ok(&spkguard(&run, &["train", model]));
    }
    let again = ok(&spkguard(&run, &["train", "dam"]));
    assert!(again.contains("0 fold(s) trained, 4 already complete"), "{again}");
    let report = ok(&spkguard(&run, &["report"]));
    assert!(report.contains("ICM"), "{report}");
    assert!(report.contains("DAM"), "{report}");
    assert!(run.join("report.txt").is_file());
}

#[test]
fn unknown_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spkguard(tmp.path(), &["--set", "no_such_key=1", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn usm_without_dam_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&spkguard(tmp.path(), &["synth"]));
    let out = spkguard(tmp.path(), &["train", "usm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train dam"));
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&spkguard(tmp.path(), &["synth"]));
    assert_eq!(spkguard(tmp.path(), &["synth"]).status.code(), Some(1));
    ok(&spkguard(tmp.path(), &["--force", "synth"]));
}

#[test]
fn missing_features_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(spkguard(tmp.path(), &["train", "icm"]).status.code(), Some(1));
}

#[test]
fn runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for run in [&a, &b] {
        ok(&spkguard(run, &["--seed", "7", "synth"]));
        ok(&spkguard(run, &["--seed", "7", "train", "icm"]));
        ok(&spkguard(run, &["report", "--csv-only"]));
    }
    let read = |run: &Path, f: &str| std::fs::read(run.join(f)).unwrap();
    assert_eq!(read(&a, "features.csv"), read(&b, "features.csv"));
    for fold in 0..4 {
        let f = format!("icm/fold_{fold:03}/model.dspk");
        assert_eq!(read(&a, &f), read(&b, &f), "{f}");
    }
    assert!(!a.join("report.txt").exists());
}
