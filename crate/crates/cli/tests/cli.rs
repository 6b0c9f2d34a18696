use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gazenlu");

const SMALL: [&str; 8] = [
    "--d-model",
    "16",
    "--layers",
    "1",
    "--max-epochs",
    "1",
    "--l-max",
    "6",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("GAZENLU_RUNS", dir.join("runs"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

/// Every file of a run directory except the manifest.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn synthetic(dir: &Path) -> PathBuf {
    ok(
        dir,
        &[
            "make-synthetic",
            "--train",
            "120",
            "--test",
            "40",
            "--gaze-sentences",
            "30",
            "--out",
            "syn",
        ],
    );
    dir.join("syn")
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(t.path(), &["fly"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &["pretrain-gaze"]).status.code(), Some(2));
    let o = run(t.path(), &["pretrain-gaze", "--corpus", "missing.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.tsv"));
    assert_eq!(run(t.path(), &["train", "--lr=-1"]).status.code(), Some(1));
    assert_eq!(
        run(t.path(), &["train", "--task", "nope"]).status.code(),
        Some(1)
    );
    assert_eq!(run(t.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(t.path(), &["sweep", "--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_is_deterministic_and_leaves_inputs_alone() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let syn = synthetic(d);
    let inputs_before = artifacts(&syn);

    for out in ["pre1", "pre2"] {
        ok(
            d,
            &with_small(&["pretrain-gaze", "--corpus", "syn/gaze.tsv", "--out", out]),
        );
    }
    let pre = artifacts(&d.join("pre1"));
    assert_eq!(pre, artifacts(&d.join("pre2")));
    for f in [
        "generator.ckpt",
        "pretrain_log.jsonl",
        "vocab.txt",
        "config.txt",
    ] {
        assert!(pre.contains_key(f), "missing {f}");
    }
    assert_eq!(
        String::from_utf8_lossy(&pre["pretrain_log.jsonl"])
            .lines()
            .count(),
        1
    );

    let train = |out: &str| {
        ok(
            d,
            &with_small(&[
                "train",
                "--data-dir",
                "syn",
                "--task",
                "keyword",
                "--generator",
                "pre1",
                "--k",
                "60",
                "--n-scanpaths",
                "2",
                "--out",
                out,
            ]),
        )
    };
    train("tr1");
    train("tr2");
    assert_eq!(artifacts(&d.join("tr1")), artifacts(&d.join("tr2")));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("tr1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["verb"], "train");
    assert_eq!(manifest["config"]["train"]["n_scanpaths_train"], 2);
    assert!(manifest["created_unix"].is_u64());

    for out in ["ev1", "ev2"] {
        ok(
            d,
            &[
                "evaluate",
                "--run",
                "tr1",
                "--data-dir",
                "syn",
                "--task",
                "keyword",
                "--out",
                out,
            ],
        );
    }
    assert_eq!(artifacts(&d.join("ev1")), artifacts(&d.join("ev2")));
    // evaluation leaves the checkpoint alone
    assert_eq!(artifacts(&d.join("tr1")), artifacts(&d.join("tr2")));

    let csv = ok(d, &["report", "--input", "ev1/report.json", "--csv"]);
    assert!(csv.starts_with("config,metric,run,value\n"));

    let g1 = ok(
        d,
        &[
            "generate",
            "--generator",
            "pre1",
            "--text",
            "ba di fo",
            "--n",
            "3",
            "--out",
            "g1",
        ],
    );
    let g2 = ok(
        d,
        &[
            "generate",
            "--generator",
            "pre1",
            "--text",
            "ba di fo",
            "--n",
            "3",
            "--out",
            "g2",
        ],
    );
    assert_eq!(g1, g2);
    assert_eq!(g1.lines().count(), 3);

    assert_eq!(artifacts(&syn), inputs_before);
}

#[test]
fn default_run_dirs_are_named_by_config_hash() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synthetic(d);
    let args = with_small(&[
        "lowresource",
        "--data-dir",
        "syn",
        "--task",
        "keyword",
        "--scratch",
        "--ks",
        "20",
        "--data-seeds",
        "111,222",
        "--n-scanpaths",
        "1",
    ]);
    ok(d, &args);
    let names = |d: &Path| -> Vec<String> {
        let mut v: Vec<String> = std::fs::read_dir(d.join("runs"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let first = names(d);
    assert_eq!(first.len(), 1);
    let name = &first[0];
    assert!(
        name.starts_with("lowresource-") && name.ends_with("-s42"),
        "{name}"
    );
    assert_eq!(name.len(), "lowresource-".len() + 12 + "-s42".len());
    let before = artifacts(&d.join("runs").join(name));
    ok(d, &args);
    assert_eq!(names(d), first);
    assert_eq!(artifacts(&d.join("runs").join(name)), before);

    let mut seeded = args.clone();
    seeded.extend(["--seed", "7"]);
    ok(d, &seeded);
    assert_eq!(names(d).len(), 2);

    let summary = ok(
        d,
        &["report", "--input", &format!("runs/{name}/reports.json")],
    );
    assert!(summary.contains("k=20"));
}

#[test]
fn protocol_verbs_with_parallel_jobs() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synthetic(d);
    ok(
        d,
        &with_small(&["pretrain-gaze", "--corpus", "syn/gaze.tsv", "--out", "pre"]),
    );
    let common = [
        "--data-dir",
        "syn",
        "--task",
        "keyword",
        "--generator",
        "pre",
        "--n-scanpaths",
        "1",
    ];
    let cv = |jobs: &str, out: &str| {
        let mut a = vec!["crossval", "--folds", "3", "--jobs", jobs, "--out", out];
        a.extend(common);
        ok(d, &with_small(&a))
    };
    cv("1", "cv1");
    cv("3", "cv3");
    assert_eq!(artifacts(&d.join("cv1")), artifacts(&d.join("cv3")));

    let mut sweep = vec![
        "sweep",
        "--counts",
        "1,2",
        "--k",
        "20",
        "--data-seeds",
        "111",
        "--out",
        "sw",
    ];
    sweep.extend(common);
    let curve = ok(d, &with_small(&sweep));
    assert_eq!(curve.lines().count(), 3);
    assert!(d.join("sw/sweep.json").exists());

    let mut ablate = vec!["ablate", "--k", "20", "--data-seeds", "111", "--out", "ab"];
    ablate.extend(common);
    ok(d, &with_small(&ablate));
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("ab/ablation.json")).unwrap()).unwrap();
    let configs = rep["configs"].as_array().unwrap();
    assert_eq!(configs.len(), 3);
    let frozen = &configs[1]["runs"][0];
    assert_eq!(frozen["generator_init"], frozen["generator_final"]);
}

#[test]
fn build_vocab_from_tsv_and_text() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synthetic(d);
    std::fs::write(d.join("extra.txt"), "zulu yankee\nzulu\n").unwrap();
    ok(
        d,
        &[
            "build-vocab",
            "--corpus",
            "syn/gaze.tsv",
            "extra.txt",
            "--vocab-size",
            "120",
            "--out",
            "v",
        ],
    );
    let vocab = std::fs::read_to_string(d.join("v/vocab.txt")).unwrap();
    assert!(vocab.starts_with("[CLS]\n"));
    assert!(vocab.lines().any(|l| l == "z"));
}
