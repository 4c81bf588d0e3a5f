use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn msrl")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = msrl(dir, args);
    assert!(
        out.status.success(),
        "msrl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--dim",
    "4",
    "--prototypes",
    "8",
    "--input-size",
    "8",
    "--channels",
    "3,4,4",
    "--hidden",
    "6",
    "--batch_size",
    "4",
    "--epochs",
    "3",
    "--warmup_epochs",
    "1",
];

fn train_args<'a>(out: &'a str, seed: &'a str) -> Vec<&'a str> {
    let mut a = vec![
        "train",
        "--config",
        "train.cfg",
        "--seed",
        seed,
        "--deterministic",
        "--out",
        out,
    ];
    a.extend_from_slice(TINY);
    a
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--profile-set",
            "default",
            "--slides",
            "6",
            "--seed",
            "3",
            "--out",
            "corpus",
        ],
    );
    fs::write(d.join("train.cfg"), "# tiny run\ncorpus = corpus\nepochs = 30\n").unwrap();

    let log = ok(d, &train_args("a.hmsb", "5"));
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(
        lines[0],
        "epoch\tlr\tloss\tce_term\tmean_entropy_term\tanchor_entropy_term"
    );
    assert_eq!(lines.len(), 4, "flag overrides the file's epoch count");
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 6));
    assert_eq!(ok(d, &train_args("b.hmsb", "5")), log);
    assert_eq!(fs::read(d.join("a.hmsb")).unwrap(), fs::read(d.join("b.hmsb")).unwrap());
    assert_ne!(ok(d, &train_args("c.hmsb", "6")), log);

    ok(
        d,
        &["embed", "--ckpt", "a.hmsb", "--corpus", "corpus", "--out", "e.hmse"],
    );
    assert!(d.join("e.hmse.codes.tsv").exists());
    ok(
        d,
        &[
            "radial", "--emb", "e.hmse", "--bins", "20", "--out", "hist.tsv", "--svg", "hist.svg",
        ],
    );
    let hist = fs::read_to_string(d.join("hist.tsv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
    assert!(hist.starts_with("bin\tlo\thi\ttissue-64\ttissue-32\ttissue-16\tnucleus\n"));
    assert!(fs::read_to_string(d.join("hist.svg")).unwrap().starts_with("<svg"));

    ok(
        d,
        &["heatmap", "--emb", "e.hmse", "--ckpt", "a.hmsb", "--out", "heat.tsv"],
    );
    let heat = fs::read_to_string(d.join("heat.tsv")).unwrap();
    assert_eq!(heat.lines().next().unwrap(), "class\tS-Reactive\tS-FL\tS-DLBCL");
    assert_eq!(heat.lines().count(), 5);

    ok(
        d,
        &[
            "probe",
            "--corpus",
            "corpus",
            "--ckpt",
            "a.hmsb",
            "--folds",
            "2",
            "--seed",
            "1",
            "--counts",
            "6,6,4,4",
            "--epochs",
            "1",
            "--out",
            "report.tsv",
        ],
    );
    let report = fs::read_to_string(d.join("report.tsv")).unwrap();
    assert!(report.contains("pretrained\tfinetune\t1\tmean\t"));
    assert!(report.contains("scratch\tfinetune\t1\tmean\t"));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["x", "y"] {
        ok(
            d,
            &[
                "gen-data", "--slides", "3", "--seed", "9", "--size", "128", "--out", out,
            ],
        );
    }
    let mut names: Vec<_> = fs::read_dir(d.join("x"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 1 + 3 * 3);
    for n in names {
        assert_eq!(
            fs::read(d.join("x").join(&n)).unwrap(),
            fs::read(d.join("y").join(&n)).unwrap()
        );
    }
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check", "--seeds", "2"]);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let no_corpus = msrl(d, &["train", "--epochs", "4"]);
    assert!(!no_corpus.status.success());
    assert!(String::from_utf8_lossy(&no_corpus.stderr).contains("corpus"));

    let bad_profile = msrl(d, &["train", "--profile", "huge", "--corpus", "c"]);
    assert!(String::from_utf8_lossy(&bad_profile.stderr).contains("unknown profile"));

    fs::write(d.join("bad.hmsb"), b"HMSB\x02\0\0\0").unwrap();
    let bad = msrl(d, &["embed", "--ckpt", "bad.hmsb", "--corpus", "c", "--out", "e"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("offset 4"));
}
