use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use colexp::dataio::manifest::{Manifest, ManifestEntry, Split};
use colexp::dataio::synth::{gen_synthetic, generate, SplitSizes, SyntheticExpert, SyntheticSpec, MANIFEST_FILE};
use colexp::dataio::write_matrix;
use colexp::model::{ExpertConfig, ModelConfig, TextConfig, Variant};
use colexp::aggregation::NetVladConfig;
use colexp::tensor::Tensor;
use colexp::Error;

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        videos: SplitSizes {
            train: 7,
            val: 2,
            test: 3,
        },
        captions_per_video: 2,
        latent_dim: 4,
        word_dim: 5,
        noise: 0.2,
        experts: vec![SyntheticExpert::new("a", 6, 1.0), SyntheticExpert::new("b", 3, 0.5)],
        seq_len: [2, 5],
        caption_len: [1, 4],
        decoupled_captions: false,
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        experts: vec![ExpertConfig::mean("a", 6), ExpertConfig::mean("b", 3)],
        variant: Variant::Ce,
        common_dim: 4,
        gating_hidden: None,
        text: TextConfig {
            word_dim: 5,
            vlad: NetVladConfig::new(2, 1),
        },
    }
}

/// Relative path → bytes for every file under `root`.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn written_dataset_loads_back_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let (manifest, data) = gen_synthetic(&spec(3), &out).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    assert!(manifest.violations(&model()).is_empty());
    for split in [Split::Train, Split::Val, Split::Test] {
        let loaded = manifest.load::<f64>(&model(), split).unwrap();
        assert_eq!(loaded, data.split(split));
    }
}

#[test]
fn same_seed_same_tree() {
    let tmp = tempfile::tempdir().unwrap();
    gen_synthetic(&spec(11), &tmp.path().join("x")).unwrap();
    gen_synthetic(&spec(11), &tmp.path().join("y")).unwrap();
    gen_synthetic(&spec(12), &tmp.path().join("z")).unwrap();
    let x = tree(&tmp.path().join("x"));
    assert!(x.contains_key(MANIFEST_FILE));
    assert_eq!(x, tree(&tmp.path().join("y")));
    assert_ne!(x, tree(&tmp.path().join("z")));
}

#[test]
fn invalid_spec_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = spec(0);
    bad.experts[1].availability = 1.5;
    let err = gen_synthetic(&bad, &tmp.path().join("ds")).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn existing_output_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    fs::create_dir(&out).unwrap();
    assert!(gen_synthetic(&spec(0), &out).is_err());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn in_memory_generation_is_deterministic() {
    let a = generate(&spec(5)).unwrap();
    let b = generate(&spec(5)).unwrap();
    assert_eq!(a.split(Split::Train), b.split(Split::Train));
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Fixture { _tmp: tmp, root }
    }

    fn file(&self, name: &str, rows: usize, cols: usize) -> String {
        let m = Tensor::matrix(rows, cols, (0..rows * cols).map(|i| i as f32 * 0.25).collect()).unwrap();
        write_matrix(&self.root.join(name), &m).unwrap();
        name.to_string()
    }

    fn manifest(&self, entries: Vec<ManifestEntry>) -> Manifest {
        let m = Manifest {
            root: self.root.clone(),
            entries,
        };
        let path = self.root.join(MANIFEST_FILE);
        m.write(&path).unwrap();
        Manifest::read(&path).unwrap()
    }
}

fn entry(id: &str, a: Option<String>, b: Option<String>, captions: Vec<String>) -> ManifestEntry {
    ManifestEntry {
        id: id.into(),
        split: Split::Train,
        experts: [("a".to_string(), a), ("b".to_string(), b)].into_iter().collect(),
        captions,
    }
}

#[test]
fn manifest_problems_are_all_reported() {
    let f = Fixture::new();
    let a = f.file("a.cef", 3, 6);
    let wide = f.file("wide.cef", 2, 4);
    let cap = f.file("cap.cef", 2, 5);
    let m = f.manifest(vec![
        entry("v1", Some(a.clone()), None, vec![cap.clone()]),
        entry("v1", Some(a.clone()), None, vec![cap.clone()]),
        entry("v2", Some("missing.cef".into()), None, vec![cap.clone()]),
        entry("v3", Some(a.clone()), Some(wide), vec![cap.clone()]),
        entry("v4", Some(a), None, vec![]),
    ]);
    let v = m.violations(&model());
    assert_eq!(v.len(), 4, "{v:#?}");
    for needle in ["duplicate id `v1`", "`v2` expert `a`", "width 4 but config declares 3", "`v4` has no captions"] {
        assert!(v.iter().any(|s| s.contains(needle)), "{needle} not in {v:#?}");
    }
    assert!(matches!(m.load::<f64>(&model(), Split::Train), Err(Error::Integrity(_))));
}

#[test]
fn null_and_zero_row_experts_both_load_as_missing() {
    let f = Fixture::new();
    let a = f.file("a.cef", 3, 6);
    let empty = f.file("empty.cef", 0, 3);
    let cap = f.file("cap.cef", 2, 5);
    let m = f.manifest(vec![
        entry("v1", Some(a.clone()), None, vec![cap.clone()]),
        entry("v2", Some(a), Some(empty), vec![cap]),
    ]);
    let recs = m.load::<f64>(&model(), Split::Train).unwrap();
    assert!(recs.iter().all(|r| r.expert("b").is_none() && r.expert("a").is_some()));
    assert_eq!(recs[0].expert("a"), recs[1].expert("a"));
}

#[test]
fn malformed_line_reports_its_position() {
    let f = Fixture::new();
    let path = f.root.join(MANIFEST_FILE);
    let good = r#"{"id":"v1","split":"train","experts":{},"captions":["c"]}"#;
    fs::write(&path, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
    match Manifest::read(&path) {
        Err(Error::Format { offset, msg, .. }) => {
            assert_eq!(offset, good.len() as u64 + 1);
            assert!(msg.starts_with("line 2"), "{msg}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}
