use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neuronscope"));
    c.env_remove("NEURONSCOPE_LLM_ENDPOINT")
        .env_remove("NEURONSCOPE_LLM_API_KEY")
        .env("RUST_LOG", "error");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn neuronscope")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

const SMALL_SPEC: &str = r#"{
  "n_sentences": 400,
  "n_descriptors": 5,
  "layers": 1,
  "neurons_per_layer": 10,
  "descriptor_rate": 0.1,
  "unresolved_rate": 0.01,
  "seed": 11
}"#;

/// Synthetic data followed by every pipeline stage in replay mode.
fn pipeline(dir: &Path, jobs: Option<&str>) {
    std::fs::write(dir.join("spec.json"), SMALL_SPEC).unwrap();
    let mut global: Vec<&str> = Vec::new();
    if let Some(j) = jobs {
        global.extend(["--jobs", j]);
    }
    let step = |args: &[&str]| {
        let mut all = global.clone();
        all.extend_from_slice(args);
        ok(dir, &all)
    };
    step(&["synth", "--spec", "spec.json", "--out-dir", "syn"]);
    step(&[
        "gen-descriptors",
        "--corpus",
        "syn/corpus.jsonl",
        "--model",
        "synth-llm",
        "--mode",
        "replay",
        "--fixtures-dir",
        "syn/fixtures",
        "--out",
        "out/candidates.jsonl",
        "--surfaces-out",
        "out/surfaces.txt",
    ]);
    step(&[
        "cluster",
        "--candidates",
        "out/candidates.jsonl",
        "--embeddings",
        "syn/embeddings.nemb",
        "--label-map",
        "syn/label_map.json",
        "--out",
        "out/clusters.json",
        "--descriptors-out",
        "out/descriptors.json",
    ]);
    step(&[
        "annotate",
        "--corpus",
        "syn/corpus.jsonl",
        "--descriptors",
        "out/descriptors.json",
        "--model",
        "synth-llm",
        "--mode",
        "replay",
        "--fixtures-dir",
        "syn/fixtures",
        "--out",
        "out/matrix.nbin",
        "--csv",
        "out/matrix.csv",
    ]);
    step(&[
        "attribute",
        "--store",
        "syn/cal.nact",
        "--matrix",
        "out/matrix.nbin",
        "--out",
        "out/attr_cal.jsonl",
        "--inverse-out",
        "out/inverse.json",
    ]);
    step(&[
        "attribute",
        "--store",
        "syn/val.nact",
        "--matrix",
        "out/matrix.nbin",
        "--out",
        "out/attr_val.jsonl",
    ]);
    step(&[
        "evaluate",
        "--attr-cal",
        "out/attr_cal.jsonl",
        "--attr-val",
        "out/attr_val.jsonl",
        "--truth",
        "syn/truth.json",
        "--matrix",
        "out/matrix.nbin",
        "--annotations-ref",
        "syn/matrix.nbin",
        "--annotations",
        "out/matrix.nbin",
        "--out",
        "out/eval.json",
    ]);
    step(&[
        "report",
        "--corpus",
        "syn/corpus.jsonl",
        "--matrix",
        "out/matrix.nbin",
        "--out-dir",
        "out/report",
    ]);
}

#[test]
fn replay_pipeline_recovers_planted_descriptors() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), None);
    let eval = json(&tmp.path().join("out/eval.json"));
    let p1 = &eval["pr_at_k"][0];
    assert_eq!(p1["k"], 1);
    assert!(p1["precision"]["mean"].as_f64().unwrap() >= 0.95, "{p1}");
    assert_eq!(eval["kappa"]["value"].as_f64(), Some(1.0));

    let descriptors = json(&tmp.path().join("out/descriptors.json"));
    let labels: Vec<&str> = descriptors["descriptors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d.as_str().unwrap())
        .collect();
    assert_eq!(labels.len(), 5, "{descriptors}");

    for m in [
        "out/candidates.jsonl.manifest.json",
        "out/clusters.json.manifest.json",
        "out/matrix.nbin.manifest.json",
        "out/attr_cal.jsonl.manifest.json",
        "out/eval.json.manifest.json",
        "out/report/manifest.json",
        "syn/manifest.json",
    ] {
        let m = json(&tmp.path().join(m));
        assert_eq!(m["tool"], "neuronscope-cli");
        assert!(!m["outputs"].as_array().unwrap().is_empty());
    }
    let csv = std::fs::read_to_string(tmp.path().join("out/report/correlation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn pipeline_outputs_and_manifests_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    pipeline(a.path(), None);
    pipeline(b.path(), None);
    pipeline(c.path(), Some("1"));
    let sa = snapshot(a.path());
    assert!(sa.len() > 20, "{} files", sa.len());
    let sb = snapshot(b.path());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(sb[k] == *v, "{k} differs between runs");
    }
    // Sequential and parallel runs differ only in the recorded parameters, which exclude --jobs.
    let sc = snapshot(c.path());
    for (k, v) in &sa {
        assert!(sc[k] == *v, "{k} differs with --jobs 1");
    }
}

#[test]
fn rerunning_a_stage_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    pipeline(tmp.path(), None);
    let before = snapshot(tmp.path());
    ok(
        tmp.path(),
        &[
            "attribute",
            "--store",
            "syn/cal.nact",
            "--matrix",
            "out/matrix.nbin",
            "--out",
            "out/attr_cal.jsonl",
            "--inverse-out",
            "out/inverse.json",
        ],
    );
    ok(
        tmp.path(),
        &["synth", "--spec", "spec.json", "--out-dir", "syn"],
    );
    let after = snapshot(tmp.path());
    assert_eq!(
        before.keys().collect::<Vec<_>>(),
        after.keys().collect::<Vec<_>>()
    );
    for (k, v) in &before {
        assert!(after[k] == *v, "{k} changed on rerun");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&run_in(d, &["--help"])), 0);
    assert_eq!(code(&run_in(d, &["--version"])), 0);
    assert_eq!(code(&run_in(d, &["attribute", "--no-such-flag"])), 1);
    assert_eq!(code(&run_in(d, &["frobnicate"])), 1);
    assert_eq!(code(&run_in(d, &["attribute", "--store", "x.nact"])), 1);
    let missing = run_in(
        d,
        &[
            "attribute",
            "--store",
            "x.nact",
            "--matrix",
            "y.nbin",
            "--out",
            "z.jsonl",
        ],
    );
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("x.nact"));
    assert_eq!(
        code(&run_in(
            d,
            &["--jobs", "0", "split", "--corpus", "c", "--out", "o"]
        )),
        1
    );

    std::fs::write(d.join("bad.nact"), b"NACT garbage").unwrap();
    std::fs::write(d.join("m.nbin"), b"{}\n").unwrap();
    assert_eq!(
        code(&run_in(
            d,
            &[
                "attribute",
                "--store",
                "bad.nact",
                "--matrix",
                "m.nbin",
                "--out",
                "z"
            ]
        )),
        2
    );
}

#[test]
fn replay_without_fixture_dir_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.jsonl"),
        "{\"id\":\"a\",\"text\":\"one two\"}\n",
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &[
            "gen-descriptors",
            "--corpus",
            "c.jsonl",
            "--model",
            "m",
            "--mode",
            "replay",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn cache_miss_without_endpoint_fails_as_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("c.jsonl"),
        "{\"id\":\"a\",\"text\":\"one two\"}\n",
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &[
            "gen-descriptors",
            "--corpus",
            "c.jsonl",
            "--model",
            "m",
            "--out",
            "o.jsonl",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("o.jsonl").exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("spec.json"), SMALL_SPEC).unwrap();
    ok(d, &["synth", "--spec", "spec.json", "--out-dir", "syn"]);
    std::fs::write(
        d.join("run.json"),
        r#"{"store": "syn/cal.nact", "matrix": "syn/matrix.nbin", "threshold": 0.9, "k_percent": 5.0, "seed": 3}"#,
    )
    .unwrap();

    ok(
        d,
        &["--config", "run.json", "attribute", "--out", "a.jsonl"],
    );
    let m = json(&d.join("a.jsonl.manifest.json"));
    assert_eq!(m["parameters"]["threshold"], 0.9);
    assert_eq!(m["parameters"]["k_percent"], 5.0);

    ok(
        d,
        &[
            "--config",
            "run.json",
            "attribute",
            "--out",
            "b.jsonl",
            "--threshold",
            "0.2",
        ],
    );
    let m = json(&d.join("b.jsonl.manifest.json"));
    assert_eq!(m["parameters"]["threshold"], 0.2);
    assert_eq!(m["parameters"]["k_percent"], 5.0);

    std::fs::write(d.join("bad.json"), r#"{"treshold": 0.5}"#).unwrap();
    assert_eq!(
        code(&run_in(
            d,
            &["--config", "bad.json", "attribute", "--out", "c.jsonl"]
        )),
        1
    );
    assert_eq!(
        code(&run_in(
            d,
            &["--config", "absent.json", "attribute", "--out", "c.jsonl"]
        )),
        2
    );
}

#[test]
fn help_lists_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let help = ok(tmp.path(), &["attribute", "--help"]);
    assert!(help.contains("[default: 1]"), "{help}");
    assert!(help.contains("[default: 0.35]"), "{help}");
    let help = ok(tmp.path(), &["cluster", "--help"]);
    assert!(
        help.contains("[default: 0.75]") && help.contains("[default: 10]"),
        "{help}"
    );
    let help = ok(tmp.path(), &["gen-descriptors", "--help"]);
    assert!(
        help.contains("[default: 64]") && help.contains("[default: cache]"),
        "{help}"
    );
}

#[test]
fn ingest_and_split() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut lines = String::new();
    lines.push_str("{\"id\":\"s1\",\"text\":\"this sentence has exactly enough words to pass the filter here\"}\n");
    lines.push_str("{\"id\":\"s2\",\"text\":\"too short\"}\n");
    lines.push_str("{\"id\":\"s3\",\"text\":\"another sentence with more than ten words in it for the filter\"}\n");
    std::fs::write(d.join("raw.jsonl"), lines).unwrap();
    let msg = ok(
        d,
        &["ingest", "--input", "raw.jsonl", "--out", "kept.jsonl"],
    );
    assert!(msg.contains("kept 2 of 3"), "{msg}");
    ok(
        d,
        &[
            "split",
            "--corpus",
            "kept.jsonl",
            "--seed",
            "4",
            "--out",
            "split.jsonl",
        ],
    );
    let text = std::fs::read_to_string(d.join("split.jsonl")).unwrap();
    let splits: Vec<String> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["split"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(splits.len(), 2);
    assert!(
        splits.contains(&"calibration".to_string()) && splits.contains(&"validation".to_string())
    );
    assert_eq!(
        code(&run_in(
            d,
            &[
                "ingest",
                "--input",
                "raw.jsonl",
                "--min-words",
                "50",
                "--max-words",
                "5",
                "--out",
                "x"
            ]
        )),
        1
    );
}

#[test]
fn cluster_without_labels_writes_a_template() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("spec.json"), SMALL_SPEC).unwrap();
    ok(d, &["synth", "--spec", "spec.json", "--out-dir", "syn"]);
    ok(
        d,
        &[
            "gen-descriptors",
            "--corpus",
            "syn/corpus.jsonl",
            "--model",
            "synth-llm",
            "--mode",
            "replay",
            "--fixtures-dir",
            "syn/fixtures",
            "--out",
            "cand.jsonl",
        ],
    );
    let msg = ok(
        d,
        &[
            "cluster",
            "--candidates",
            "cand.jsonl",
            "--embeddings",
            "syn/embeddings.nemb",
            "--out",
            "clusters.json",
        ],
    );
    assert!(msg.contains("5 communities"), "{msg}");
    let template = json(&d.join("label_map.template.json"));
    assert_eq!(template.as_object().unwrap().len(), 5);
    assert_eq!(
        code(&run_in(
            d,
            &[
                "cluster",
                "--candidates",
                "cand.jsonl",
                "--embeddings",
                "syn/embeddings.nemb",
                "--label-map",
                "syn/label_map.json",
                "--out",
                "c2.json",
            ]
        )),
        1
    );
}
