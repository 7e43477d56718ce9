use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protomm::engine::StreamRecord;
use protomm::io::{read_bundle, read_reference, write_bundle, write_stream};
use protomm::primitives::UnitVector;
use protomm::prototypes::{MultimodalPrototype, PrototypeStore};

fn protomm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protomm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    let out = protomm(&[
        "synth",
        "--out-dir",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--dim",
        "16",
        "--classes",
        "4",
        "--descriptions",
        "3",
        "--augmentations",
        "5",
        "--particles",
        "3",
        "--samples",
        "40",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn run(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let bundle = dir.join("bundle.toml");
    let stream = dir.join("stream.bin");
    let out = dir.join(out);
    let mut args = vec![
        "run",
        "--bundle",
        bundle.to_str().unwrap(),
        "--stream",
        stream.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    protomm(&args)
}

fn records_section(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    let start = text.find("[records]").unwrap();
    let end = text.find("[summary]").unwrap();
    text[start..end].to_string()
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "7");
    synth(b.path(), "7");
    for name in ["bundle.toml", "bundle.bin", "stream.bin", "reference.bin"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn run_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "1");
    assert_eq!(
        code(&run(
            dir.path(),
            "a.txt",
            &[
                "--top-s",
                "3",
                "--checkpoint-out",
                dir.path().join("ca.toml").to_str().unwrap()
            ]
        )),
        0
    );
    assert_eq!(
        code(&run(
            dir.path(),
            "b.txt",
            &[
                "--top-s",
                "3",
                "--checkpoint-out",
                dir.path().join("cb.toml").to_str().unwrap()
            ]
        )),
        0
    );
    assert_eq!(
        fs::read(dir.path().join("a.txt")).unwrap(),
        fs::read(dir.path().join("b.txt")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("ca.bin")).unwrap(),
        fs::read(dir.path().join("cb.bin")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "2");
    assert_eq!(code(&run(dir.path(), "a.txt", &["--top-s", "3"])), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_protomm"))
        .env("PROTOMM_THREADS", "1")
        .args([
            "run",
            "--bundle",
            dir.path().join("bundle.toml").to_str().unwrap(),
            "--stream",
            dir.path().join("stream.bin").to_str().unwrap(),
            "--out",
            dir.path().join("b.txt").to_str().unwrap(),
            "--top-s",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(dir.path().join("a.txt")).unwrap(),
        fs::read(dir.path().join("b.txt")).unwrap()
    );

    let bad = Command::new(env!("CARGO_BIN_EXE_protomm"))
        .env("PROTOMM_THREADS", "zero")
        .args(["diagnose", "--bundle", "x", "--reference", "y"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
}

#[test]
fn closed_gate_matches_no_update_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    let closed = run(
        dir.path(),
        "closed.txt",
        &["--tau", "1.0", "--pred-temp", "1.0", "--top-s", "3"],
    );
    let frozen = run(dir.path(), "frozen.txt", &["--top-s", "0", "--pred-temp", "1.0"]);
    assert_eq!(code(&closed), 0);
    assert_eq!(code(&frozen), 0);
    assert_eq!(
        records_section(&dir.path().join("closed.txt")),
        records_section(&dir.path().join("frozen.txt"))
    );
    assert!(fs::read_to_string(dir.path().join("frozen.txt"))
        .unwrap()
        .contains("cache_updates = 0"));
}

#[test]
fn plans_and_checkpoint_are_written() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4");
    let plans = dir.path().join("plans");
    let ck = dir.path().join("ck.toml");
    let out = run(
        dir.path(),
        "r.txt",
        &[
            "--top-s",
            "2",
            "--dump-plans",
            plans.to_str().unwrap(),
            "--checkpoint-out",
            ck.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_dir(&plans).unwrap().count(), 40);
    let first = fs::read_dir(&plans).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(first).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 5);
    assert_eq!(lines[0].split('\t').count(), 1 + 3 + 3);
    let checkpoint = read_bundle(&ck).unwrap();
    assert!(checkpoint.manifest.has_cache);

    let diag = protomm(&[
        "diagnose",
        "--bundle",
        ck.to_str().unwrap(),
        "--reference",
        dir.path().join("reference.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&diag), 0);
    assert!(String::from_utf8_lossy(&diag.stdout).starts_with("class\tkl\tmmd\n"));
}

#[test]
fn diagnose_reference_particles_give_zero_kl() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "5");
    let bundle = read_bundle(&dir.path().join("bundle.toml")).unwrap();
    let reference = read_reference(&dir.path().join("reference.bin")).unwrap();
    let protos = bundle
        .store
        .prototypes()
        .iter()
        .zip(&reference)
        .map(|(p, r)| MultimodalPrototype::with_particles(p.class_id, p.text_features().to_vec(), r.clone()).unwrap())
        .collect();
    let store = PrototypeStore::new(protos).unwrap();
    let ck = dir.path().join("exact.toml");
    write_bundle(&ck, &store, &bundle.manifest.class_names, true, None).unwrap();
    let diag = protomm(&[
        "diagnose",
        "--bundle",
        ck.to_str().unwrap(),
        "--reference",
        dir.path().join("reference.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&diag), 0);
    let text = String::from_utf8(diag.stdout).unwrap();
    for line in text.lines().skip(1) {
        assert_eq!(line.split('\t').nth(1), Some("0"), "{line}");
    }
}

fn uv(v: &[f64]) -> UnitVector {
    UnitVector::new(v.to_vec()).unwrap()
}

#[test]
fn zeroshot_single_class_and_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    let store = PrototypeStore::from_text(vec![vec![uv(&[1.0, 0.0])]], 1).unwrap();
    let bundle = dir.path().join("one.toml");
    write_bundle(&bundle, &store, &["only".into()], false, None).unwrap();
    let records = |label: Option<usize>| -> Vec<StreamRecord> {
        (0..5)
            .map(|i| StreamRecord {
                sample_id: i,
                true_label: label,
                augment_features: vec![uv(&[1.0, i as f64])],
            })
            .collect()
    };
    write_stream(&dir.path().join("labeled.bin"), 2, 1, &records(Some(0))).unwrap();
    write_stream(&dir.path().join("unlabeled.bin"), 2, 1, &records(None)).unwrap();
    for (stream, expected) in [
        ("labeled.bin", "accuracy = 1\n"),
        ("unlabeled.bin", "accuracy = null\n"),
    ] {
        let out_path = dir.path().join("out.txt");
        let out = protomm(&[
            "zeroshot",
            "--bundle",
            bundle.to_str().unwrap(),
            "--stream",
            dir.path().join(stream).to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        assert!(fs::read_to_string(&out_path).unwrap().contains(expected));
    }
}

#[test]
fn skipped_samples_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6");
    let records: Vec<StreamRecord> = (0..3)
        .map(|i| StreamRecord {
            sample_id: i,
            true_label: Some(0),
            augment_features: vec![uv(&[1.0, 0.5, 0.25])],
        })
        .collect();
    write_stream(&dir.path().join("stream.bin"), 3, 1, &records).unwrap();
    let out = run(dir.path(), "r.txt", &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped sample 0"));
    assert!(fs::read_to_string(dir.path().join("r.txt"))
        .unwrap()
        .contains("skipped = 3"));
}

#[test]
fn truncated_stream_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "8");
    let path = dir.path().join("stream.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    let out = run(dir.path(), "r.txt", &[]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("10 bytes missing"), "{err}");
    assert!(!dir.path().join("r.txt").exists());
}

#[test]
fn bad_flags_exit_one_and_help_documents_defaults() {
    assert_eq!(code(&protomm(&["run", "--bogus"])), 1);
    assert_eq!(code(&protomm(&["frobnicate"])), 1);
    let help = protomm(&["run", "--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in [
        "Entropic regularization [default: 0.1]",
        "[default: 0.8]",
        "[default: 25]",
        "[default: 100]",
        "[default: 0.000000001]",
        "--update-all-classes",
        "--checkpoint-out",
        "--dump-plans",
    ] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
    let synth_help = String::from_utf8_lossy(&protomm(&["synth", "--help"]).stdout).to_string();
    assert!(synth_help.contains("[default: 50]"));
}

#[test]
fn bench_reports_failures_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("s.toml");
    fs::write(
        &spec,
        r#"
name = "tiny"
[synth]
seed = 1
dim = 8
classes = 2
descriptions = 2
augmentations = 3
particles = 2
samples = 20
text_noise = 0.05
augment_noise = 0.1
ambiguity = 0.5
[engine]
top_s = 2
[[assertion]]
name = "impossible"
criterion = 3
metric = "protomm_accuracy"
op = ">"
threshold = 100.0
"#,
    )
    .unwrap();
    let report = dir.path().join("report.txt");
    let out = protomm(&[
        "bench",
        "run",
        spec.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(fs::read_to_string(&report)
        .unwrap()
        .contains("FAIL [criterion 3] impossible"));
}
