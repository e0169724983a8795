use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Run {
    code: i32,
    stdout: Value,
    stderr: String,
}

impl Run {
    fn error(&self) -> Value {
        let line = self.stderr.lines().last().expect("error line on stderr");
        serde_json::from_str::<Value>(line).expect("error JSON")["error"].clone()
    }
}

fn civic(dir: &Path, args: &[&str]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_civic-lens"))
        .args(args)
        .current_dir(dir)
        .env_remove("CIVIC_LENS_RUNS")
        .env_remove("CIVIC_LENS_CONFIG")
        .output()
        .unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: serde_json::from_str(stdout.trim()).unwrap_or(Value::Null),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let r = civic(dir, args);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r.stdout
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_train_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(ok(d, &["synth"])["status"], "built");
    let train = ok(d, &["train", "--model", "lr-bow"]);
    let model_dir = PathBuf::from(train["dir"].as_str().unwrap());
    for seed in 1..=3 {
        assert!(model_dir.join(seed.to_string()).join("checkpoint.json").exists());
    }
    assert_eq!(ok(d, &["evaluate", "--model", "lr-bow"])["status"], "built");
    let report: Value = serde_json::from_str(&fs::read_to_string(model_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
    assert!(report["f1"]["mean"].as_f64().unwrap() >= 0.95, "{report}");

    // unchanged config: every stage is a no-op
    for args in [
        &["synth"][..],
        &["preprocess"],
        &["featurize"],
        &["train", "--model", "lr-bow"],
        &["evaluate", "--model", "lr-bow"],
    ] {
        assert_eq!(ok(d, args)["status"], "up_to_date", "{args:?}");
    }
    assert_eq!(ok(d, &["evaluate", "--model", "lr-bow", "--force"])["status"], "built");

    ok(d, &["train", "--model", "lr-lexicon", "--seed", "1"]);
    ok(d, &["evaluate", "--model", "lr-lexicon", "--seed", "1"]);
    ok(d, &["analyze"]);
    let rep = ok(d, &["report"]);
    let md = fs::read_to_string(Path::new(rep["dir"].as_str().unwrap()).join("report.md")).unwrap();
    assert!(md.starts_with(&format!(
        "<!-- config_hash: {} -->",
        rep["config_hash"].as_str().unwrap()
    )));
    assert!(md.contains("| lr-bow | 3 |") && md.contains(" ± "), "{md}");
    assert!(md.contains("| lr-lexicon | 1 |"), "{md}");
    assert!(md.contains("N-grams") && md.contains("Lexicon categories"));

    for f in files_under(&d.join("runs")) {
        if f.file_name().unwrap() == ".lock" {
            continue;
        }
        let text = fs::read_to_string(&f).unwrap();
        assert!(text.contains("config_hash"), "{} carries no config hash", f.display());
    }
}

#[test]
fn evaluate_before_train_names_the_missing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let r = civic(d, &["evaluate", "--model", "lr-bow"]);
    assert_ne!(r.code, 0);
    assert_eq!(r.error()["kind"], "missing_artifact");
    assert_eq!(r.error()["stage"], "data");

    ok(d, &["synth"]);
    let r = civic(d, &["evaluate", "--model", "lr-bow"]);
    assert_ne!(r.code, 0);
    assert_eq!(r.stdout, Value::Null);
    assert_eq!(r.error()["kind"], "missing_artifact");
    assert_eq!(r.error()["stage"], "train");
}

#[test]
fn changed_config_is_a_stale_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth"]);
    ok(d, &["preprocess"]);
    fs::write(d.join("split.toml"), "[corpus]\nsplit_seed = 7\n").unwrap();
    let r = civic(d, &["--config", "split.toml", "featurize"]);
    assert_eq!(r.error()["kind"], "stale_artifact");
    assert_eq!(r.error()["stage"], "preprocess");
    assert_ne!(r.code, 0);
    // rebuilding the stale stage clears the error
    ok(d, &["--config", "split.toml", "preprocess"]);
    ok(d, &["--config", "split.toml", "featurize"]);

    fs::write(d.join("synth.toml"), "[corpus]\nsplit_seed = 7\n[synth]\nseed = 2\n").unwrap();
    let r = civic(d, &["--config", "synth.toml", "preprocess"]);
    assert_eq!(r.error()["kind"], "stale_artifact");
    assert_eq!(r.error()["stage"], "synth");
}

#[test]
fn config_interpolation_and_runs_override() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("c.toml"),
        "[paths]\nruns = \"${CIVIC_LENS_TEST_ROOT}/elsewhere\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_civic-lens"))
        .args(["--config", "c.toml", "synth"])
        .current_dir(d)
        .env("CIVIC_LENS_TEST_ROOT", d)
        .env_remove("CIVIC_LENS_RUNS")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("elsewhere/data/dataset.json").exists());

    let r = civic(d, &["--config", "c.toml", "synth"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.error()["kind"], "config");

    let out = Command::new(env!("CARGO_BIN_EXE_civic-lens"))
        .arg("synth")
        .current_dir(d)
        .env("CIVIC_LENS_RUNS", d.join("from-env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("from-env/data/dataset.json").exists());

    fs::write(d.join("bad.toml"), "[paths]\nlexicon = \"nope.tsv\"\n").unwrap();
    assert_eq!(civic(d, &["--config", "bad.toml", "synth"]).error()["kind"], "config");
}

#[test]
fn hierarchical_model_trains_and_explains() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("small.toml"),
        "[synth]\nn_users = 40\nposts_per_user = 12\nnoise_vocab_size = 200\n\
         [model]\nkind = \"hier-transformer\"\nfusion = \"max\"\n\
         [trainer]\nseeds = [1]\nmax_epochs = 2\npatience = 1\n",
    )
    .unwrap();
    let c = ["--config", "small.toml"];
    ok(d, &[&c[..], &["synth"]].concat());
    let train = ok(d, &[&c[..], &["train"]].concat());
    let seed_dir = Path::new(train["dir"].as_str().unwrap()).join("1");
    assert!(seed_dir.join("curves_encoder.csv").exists());
    ok(d, &[&c[..], &["evaluate"]].concat());
    let ex = ok(d, &[&c[..], &["explain"]].concat());
    let lines = fs::read_to_string(Path::new(ex["dir"].as_str().unwrap()).join("attributions.jsonl")).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(
        first["tokens"].as_array().unwrap().len(),
        first["scores"].as_array().unwrap().len()
    );
    assert!(first["scores"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s.as_f64().unwrap() >= 0.0));

    let r = civic(d, &[&c[..], &["explain", "--model", "lr-bow"]].concat());
    assert_eq!(r.error()["kind"], "missing_artifact");
    ok(d, &[&c[..], &["train", "--model", "lr-bow"]].concat());
    let r = civic(d, &[&c[..], &["explain", "--model", "lr-bow"]].concat());
    assert_eq!(r.error()["kind"], "not_differentiable");
}

#[test]
fn usage_errors_are_json() {
    let tmp = tempfile::tempdir().unwrap();
    let r = civic(tmp.path(), &["train", "--fusion", "median"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.error()["kind"], "usage");
}

#[test]
fn ingest_filters_and_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut jsonl = String::new();
    for (i, (label, n_posts)) in [
        ("poster", 35),
        ("poster", 31),
        ("poster", 12),
        ("active_citizen", 40),
        ("active_citizen", 30),
    ]
    .iter()
    .enumerate()
    {
        let posts: Vec<Value> = (0..*n_posts)
            .map(|p| serde_json::json!({ "text": format!("post {p} http://x.co @someone"), "timestamp": null, "lang": "en", "is_original": true }))
            .collect();
        let user = serde_json::json!({ "user_id": format!("u{i}"), "label": label, "platform": "twitter", "verified": null, "posts": posts });
        jsonl.push_str(&format!("{user}\n"));
    }
    fs::write(d.join("users.jsonl"), jsonl).unwrap();
    fs::write(d.join("dual.txt"), "u1\n").unwrap();
    fs::write(
        d.join("real.toml"),
        "[paths]\ndata = \"users.jsonl\"\ndual_role_ids = \"dual.txt\"\n",
    )
    .unwrap();
    let r = civic(d, &["ingest"]);
    assert_eq!(r.error()["kind"], "config");

    ok(d, &["--config", "real.toml", "ingest"]);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(d.join("runs/data/data.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["details"]["users"], 3);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    let s = ok(d, &["--config", "real.toml", "summarize"]);
    let csv = fs::read_to_string(Path::new(s["dir"].as_str().unwrap()).join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_hash: "));
    assert!(lines[2].starts_with("poster,1,35,35,"), "{csv}");
    assert!(lines[3].starts_with("active_citizen,2,30,40,"), "{csv}");

    // editing the input file makes the dataset stale
    fs::write(d.join("dual.txt"), "u1\nu0\n").unwrap();
    let r = civic(d, &["--config", "real.toml", "summarize"]);
    assert_eq!(r.error()["kind"], "stale_artifact");
    assert_eq!(r.error()["stage"], "ingest");
}
