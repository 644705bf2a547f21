use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn colexp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_colexp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_spec() -> Value {
    json!({
        "seed": 9,
        "videos": {"train": 10, "test": 6},
        "latent_dim": 3,
        "word_dim": 4,
        "experts": [
            {"name": "scene", "dim": 5},
            {"name": "audio", "dim": 3, "availability": 0.6},
            {"name": "face", "dim": 2, "availability": 0.5}
        ]
    })
}

fn write_config(dir: &Path, data: Value, steps: usize) -> String {
    let cfg = json!({
        "data": data,
        "model": {
            "experts": [
                {"name": "scene", "input_dim": 5},
                {"name": "audio", "input_dim": 3},
                {"name": "face", "input_dim": 2}
            ],
            "common_dim": 4,
            "text": {"word_dim": 4, "vlad": {"clusters": 2, "ghost_clusters": 1}}
        },
        "training": {"steps": steps, "batch_size": 4, "checkpoint_every": 3},
        "seeds": [0, 1, 2],
        "output": "run"
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_synth_writes_a_loadable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, synth_spec().to_string()).unwrap();
    let out = tmp.path().join("ds");
    let o = colexp(&["gen-synth", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("manifest.jsonl")).unwrap().lines().count(), 16);

    let cfg = write_config(tmp.path(), json!({"manifest": "ds/manifest.jsonl"}), 4);
    let o = colexp(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_synth_rejects_invalid_probability_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = synth_spec();
    spec["experts"][1]["availability"] = json!(1.5);
    let path = tmp.path().join("spec.json");
    fs::write(&path, spec.to_string()).unwrap();
    let out = tmp.path().join("ds");
    let o = colexp(&["gen-synth", "--spec", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("availability"), "{}", stderr(&o));
    let left: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec!["spec.json"]);
}

#[test]
fn train_then_eval_reports_every_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"synthetic": synth_spec()}), 5);
    let o = colexp(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for seed in 0..3 {
        let d = run.join(format!("seed_{seed}"));
        assert!(d.join("checkpoint/header.json").exists());
        assert_eq!(fs::read_to_string(d.join("losses.jsonl")).unwrap().lines().count(), 5);
    }
    assert!(run.join("config.resolved.json").exists());
    let trained = read_json(&run.join("report.json"));

    let o = colexp(&["eval", "--config", &cfg, "--checkpoint", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("mean ± std"), "{table}");
    let evaluated = read_json(&run.join("eval/report.json"));
    assert_eq!(evaluated, trained);
    let summary = evaluated["summary"].as_array().unwrap();
    assert!(summary.iter().all(|s| s["values"].as_array().unwrap().len() == 3));
    for metric in ["R@1", "R@5", "R@10", "R@50", "MdR", "MnR"] {
        assert_eq!(summary.iter().filter(|s| s["metric"] == metric).count(), 2, "{metric}");
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let data = json!({"synthetic": synth_spec()});
    let straight = write_config(&a, data.clone(), 8);
    assert!(colexp(&["train", "--config", &straight]).status.success());

    let short = write_config(&b, data.clone(), 4);
    assert!(colexp(&["train", "--config", &short]).status.success());
    let long = write_config(&b, data, 8);
    let o = colexp(&["train", "--config", &long, "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resumed at step 4"), "{}", stdout(&o));
    for seed in 0..3 {
        let log = |root: &Path| fs::read_to_string(root.join(format!("run/seed_{seed}/losses.jsonl"))).unwrap();
        assert_eq!(log(&a), log(&b));
    }
    assert_eq!(read_json(&a.join("run/report.json")), read_json(&b.join("run/report.json")));
}

#[test]
fn config_errors_are_listed_together() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = synth_spec();
    spec["noise"] = json!(-1.0);
    let cfg = write_config(tmp.path(), json!({"synthetic": spec}), 3);
    let mut v = read_json(Path::new(&cfg));
    v["training"]["batch_size"] = json!(1);
    fs::write(&cfg, v.to_string()).unwrap();
    let o = colexp(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for needle in ["noise", "batch_size"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn eval_without_checkpoint_scores_untrained_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"synthetic": synth_spec()}), 1);
    let o = colexp(&["eval", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&tmp.path().join("run/eval/report.json"))["runs"].as_array().unwrap().len(), 3);
}

#[test]
fn ablation_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"synthetic": synth_spec()}), 2);
    let rows = |mode: &str| {
        let o = colexp(&["ablate", "--config", &cfg, "--experts", mode]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r = read_json(&tmp.path().join("run/ablation/ablation.json"));
        r["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|row| row["experts"].as_array().unwrap().iter().map(|e| e.as_str().unwrap().to_string()).collect::<Vec<_>>().join("+"))
            .collect::<Vec<_>>()
    };
    assert_eq!(rows("face"), vec!["face"]);
    assert_eq!(rows("cumulative"), vec!["scene", "scene+audio", "scene+audio+face"]);
    assert_eq!(rows("pairwise"), vec!["scene+audio", "scene+face"]);

    let o = colexp(&["ablate", "--config", &cfg, "--experts", "scene+speech"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scene, audio, face"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_and_names_a_corrupted_op() {
    let o = colexp(&["grad-check", "--seeds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 13);

    let o = colexp(&["grad-check", "--seeds", "3", "--corrupt", "softmax"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("softmax (seed"), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("FAIL")).count(), 1);
}
