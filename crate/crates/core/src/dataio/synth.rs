//! Planted-correspondence synthetic datasets.
//!
//! Each video draws a latent `z`. Every frame of expert `e` is `A_e z` plus
//! Gaussian noise and every caption token is `B z` plus noise, with the maps
//! `A_e`, `B` fixed by the seed. Values are rounded to single precision so
//! the in-memory data equals what a reader of the written files sees.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::cef1::write_matrix;
use crate::dataio::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::ExpertConfig;
use crate::record::VideoRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticExpert {
    pub name: String,
    pub dim: usize,
    /// Probability that a video has this expert.
    #[serde(default = "one")]
    pub availability: f64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticExpert {
    pub fn new(name: impl Into<String>, dim: usize, availability: f64) -> Self {
        SyntheticExpert {
            name: name.into(),
            dim,
            availability,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 64,
            val: 0,
            test: 0,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub videos: SplitSizes,
    pub captions_per_video: usize,
    pub latent_dim: usize,
    pub word_dim: usize,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub experts: Vec<SyntheticExpert>,
    /// Inclusive range of frames per expert sequence.
    pub seq_len: [usize; 2],
    /// Inclusive range of tokens per caption.
    pub caption_len: [usize; 2],
    /// Draw captions from a latent independent of the video's, leaving no
    /// correspondence to find (a null control).
    pub decoupled_captions: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            videos: SplitSizes::default(),
            captions_per_video: 1,
            latent_dim: 16,
            word_dim: 32,
            noise: 0.1,
            experts: vec![
                SyntheticExpert::new("scene", 2208, 1.0),
                SyntheticExpert::new("object", 2048, 1.0),
                SyntheticExpert::new("audio", 128, 1.0),
                SyntheticExpert::new("face", 512, 1.0),
            ],
            seq_len: [4, 16],
            caption_len: [4, 16],
            decoupled_captions: false,
        }
    }
}

impl SyntheticSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.videos.train + self.videos.val + self.videos.test == 0 {
            v.push("videos: at least one split must be non-empty".to_string());
        }
        if self.captions_per_video == 0 {
            v.push("captions_per_video: must be ≥ 1".to_string());
        }
        if self.latent_dim == 0 {
            v.push("latent_dim: must be ≥ 1".to_string());
        }
        if self.word_dim == 0 {
            v.push("word_dim: must be ≥ 1".to_string());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            v.push(format!("noise: {} is not a finite non-negative number", self.noise));
        }
        if self.experts.is_empty() {
            v.push("experts: at least one expert is required".to_string());
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.experts {
            if !seen.insert(e.name.as_str()) {
                v.push(format!("experts: duplicate name `{}`", e.name));
            }
            if e.dim == 0 {
                v.push(format!("experts.{}: dim must be ≥ 1", e.name));
            }
            if !(0.0..=1.0).contains(&e.availability) {
                v.push(format!(
                    "experts.{}: availability {} outside [0, 1]",
                    e.name, e.availability
                ));
            }
        }
        if !self.experts.is_empty() && self.experts.iter().all(|e| e.availability <= 0.0) {
            v.push("experts: some expert needs positive availability".to_string());
        }
        for (field, [lo, hi]) in [("seq_len", self.seq_len), ("caption_len", self.caption_len)] {
            if lo == 0 || lo > hi {
                v.push(format!("{field}: need 1 ≤ min ≤ max, got [{lo}, {hi}]"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Mean-pooled expert configs matching the generated widths.
    pub fn expert_configs(&self) -> Vec<ExpertConfig> {
        self.experts.iter().map(|e| ExpertConfig::mean(&e.name, e.dim)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub split: Split,
    pub latent: Vec<f64>,
    pub record: VideoRecord<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// `A_e`, `dim × latent_dim`, in expert order.
    pub expert_maps: Vec<Tensor<f64>>,
    /// `B`, `word_dim × latent_dim`.
    pub caption_map: Tensor<f64>,
    pub videos: Vec<SyntheticVideo>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> Vec<VideoRecord<f64>> {
        self.videos
            .iter()
            .filter(|v| v.split == split)
            .map(|v| v.record.clone())
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rows `M z + noise`, rounded to single precision.
fn noisy_rows(rows: usize, map: &Tensor<f64>, z: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (d, k) = map.dims();
    let mean: Vec<f64> = (0..d)
        .map(|i| (0..k).map(|j| map.get(i, j) * z[j]).sum())
        .collect();
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        for &m in &mean {
            let x = if noise > 0.0 { m + noise * gaussian(rng) } else { m };
            data.push(x as f32 as f64);
        }
    }
    Tensor::matrix(rows, d, data).expect("fill matches shape")
}

/// Generates the dataset in memory. Deterministic in `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent_dim;
    // unit-variance rows for unit-variance latents
    let scale = 1.0 / (k as f64).sqrt();
    let expert_maps: Vec<Tensor<f64>> = spec
        .experts
        .iter()
        .map(|e| Tensor::randn(&[e.dim, k], scale, &mut rng))
        .collect();
    let caption_map = Tensor::randn(&[spec.word_dim, k], scale, &mut rng);

    let width = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| spec.videos.get(s))
        .sum::<usize>()
        .to_string()
        .len()
        .max(4);
    let mut videos = Vec::new();
    let mut index = 0usize;
    for split in [Split::Train, Split::Val, Split::Test] {
        for _ in 0..spec.videos.get(split) {
            let id = format!("v{index:0width$}");
            index += 1;
            let z: Vec<f64> = (0..k).map(|_| gaussian(&mut rng)).collect();
            let available = loop {
                let draw: Vec<bool> = spec
                    .experts
                    .iter()
                    .map(|e| rng.random::<f64>() < e.availability)
                    .collect();
                if draw.iter().any(|&a| a) {
                    break draw;
                }
            };
            let mut record = VideoRecord::new(id);
            for ((e, map), &avail) in spec.experts.iter().zip(&expert_maps).zip(&available) {
                let seq = avail.then(|| {
                    let len = rng.random_range(spec.seq_len[0]..=spec.seq_len[1]);
                    noisy_rows(len, map, &z, spec.noise, &mut rng)
                });
                record.experts.insert(e.name.clone(), seq);
            }
            let caption_latent: Vec<f64> = if spec.decoupled_captions {
                (0..k).map(|_| gaussian(&mut rng)).collect()
            } else {
                z.clone()
            };
            for _ in 0..spec.captions_per_video {
                let len = rng.random_range(spec.caption_len[0]..=spec.caption_len[1]);
                record
                    .captions
                    .push(noisy_rows(len, &caption_map, &caption_latent, spec.noise, &mut rng));
            }
            videos.push(SyntheticVideo {
                split,
                latent: z,
                record,
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        expert_maps,
        caption_map,
        videos,
    })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_FILE: &str = "spec.json";

fn write_tree(data: &SyntheticDataset, dir: &Path) -> Result<Manifest> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("features"))?;
    mkdir(&dir.join("captions"))?;
    let mut entries = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let id = &v.record.id;
        let vdir = dir.join("features").join(id);
        mkdir(&vdir)?;
        let mut experts = std::collections::BTreeMap::new();
        for e in &data.spec.experts {
            let rel = match v.record.expert(&e.name) {
                Some(seq) => {
                    let rel = format!("features/{id}/{}.cef", e.name);
                    write_matrix(&dir.join(&rel), seq)?;
                    Some(rel)
                }
                None => None,
            };
            experts.insert(e.name.clone(), rel);
        }
        let mut captions = Vec::new();
        for (c, cap) in v.record.captions.iter().enumerate() {
            let rel = format!("captions/{id}_{c}.cef");
            write_matrix(&dir.join(&rel), cap)?;
            captions.push(rel);
        }
        entries.push(ManifestEntry {
            id: id.clone(),
            split: v.split,
            experts,
            captions,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    let spec = serde_json::to_string_pretty(&data.spec)?;
    fs::write(dir.join(SPEC_FILE), spec + "\n").map_err(|e| Error::io(dir.join(SPEC_FILE), e))?;
    Ok(manifest)
}

/// Generates and writes the dataset under `out`, which must not exist yet.
/// Files land in a sibling staging directory first and are moved into place
/// only once complete, so a failure leaves nothing behind.
pub fn gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<(Manifest, SyntheticDataset)> {
    spec.validate()?;
    if out.exists() {
        return Err(Error::Config(format!("output {} already exists", out.display())));
    }
    let data = generate(spec)?;
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output {} has no final component", out.display())))?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    match write_tree(&data, &staging) {
        Ok(_) => {}
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    }
    if let Err(e) = fs::rename(&staging, out) {
        let _ = fs::remove_dir_all(&staging);
        return Err(Error::io(out, e));
    }
    let manifest = Manifest::read(&out.join(MANIFEST_FILE))?;
    Ok((manifest, data))
}
