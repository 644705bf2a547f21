//! Model configuration, variant ladder and parameter initialization.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{NetVladConfig, NetVladParams};
use crate::error::{Error, Result};
use crate::layers::{GemParams, Linear, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Projection width used when nothing else is configured.
pub const DEFAULT_COMMON_DIM: usize = 768;

/// Fusion architecture, from plain concatenation up to full collaborative
/// gating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Zero-padded concatenation of raw aggregated experts, unweighted.
    Concat,
    /// Per-expert GEMs at native width with uniform weights.
    CeNoMwPCg,
    /// Per-expert GEMs at native width with learned mixture weights.
    Moee,
    /// Common projection, GEMs and mixture weights, no gating.
    CeNoCg,
    #[default]
    Ce,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Concat,
        Variant::CeNoMwPCg,
        Variant::Moee,
        Variant::CeNoCg,
        Variant::Ce,
    ];

    pub fn uses_projection(self) -> bool {
        matches!(self, Variant::CeNoCg | Variant::Ce)
    }

    pub fn uses_gating(self) -> bool {
        self == Variant::Ce
    }

    pub fn uses_gem(self) -> bool {
        self != Variant::Concat
    }

    pub fn uses_mixture_weights(self) -> bool {
        matches!(self, Variant::Moee | Variant::CeNoCg | Variant::Ce)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Concat => "concat",
            Variant::CeNoMwPCg => "ce_no_mw_p_cg",
            Variant::Moee => "moee",
            Variant::CeNoCg => "ce_no_cg",
            Variant::Ce => "ce",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Netvlad(NetVladConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub name: String,
    pub input_dim: usize,
    #[serde(default)]
    pub aggregator: Aggregator,
}

impl ExpertConfig {
    pub fn mean(name: impl Into<String>, input_dim: usize) -> Self {
        ExpertConfig {
            name: name.into(),
            input_dim,
            aggregator: Aggregator::Mean,
        }
    }

    /// Width after temporal aggregation.
    pub fn aggregated_dim(&self) -> usize {
        match self.aggregator {
            Aggregator::Mean => self.input_dim,
            Aggregator::Netvlad(v) => v.output_dim(self.input_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub word_dim: usize,
    #[serde(default = "default_text_vlad")]
    pub vlad: NetVladConfig,
}

fn default_text_vlad() -> NetVladConfig {
    NetVladConfig::new(28, 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub experts: Vec<ExpertConfig>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_common_dim")]
    pub common_dim: usize,
    /// Hidden width of both gating MLPs; defaults to `common_dim`.
    #[serde(default)]
    pub gating_hidden: Option<usize>,
    pub text: TextConfig,
}

fn default_common_dim() -> usize {
    DEFAULT_COMMON_DIM
}

impl ModelConfig {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_names(&self) -> Vec<&str> {
        self.experts.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn gating_hidden(&self) -> usize {
        self.gating_hidden.unwrap_or(self.common_dim)
    }

    pub fn text_dim(&self) -> usize {
        self.text.vlad.output_dim(self.text.word_dim)
    }

    /// Width of expert `i`'s embedding block.
    pub fn block_dim(&self, i: usize) -> usize {
        if self.variant == Variant::Concat {
            self.experts[i].aggregated_dim()
        } else {
            self.common_dim
        }
    }

    /// Width entering expert `i`'s video-side GEM.
    pub fn gem_input_dim(&self, i: usize) -> usize {
        if self.variant.uses_projection() {
            self.common_dim
        } else {
            self.experts[i].aggregated_dim()
        }
    }

    /// Collects every violation instead of stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.experts.is_empty() {
            out.push("model.experts: at least one expert is required".to_string());
        }
        let mut seen = HashSet::new();
        for (i, e) in self.experts.iter().enumerate() {
            if e.name.is_empty() {
                out.push(format!("model.experts[{i}].name: must be non-empty"));
            }
            if !seen.insert(e.name.as_str()) {
                out.push(format!("model.experts[{i}].name: duplicate expert `{}`", e.name));
            }
            if e.input_dim == 0 {
                out.push(format!("model.experts[{i}].input_dim: must be positive"));
            }
            if let Aggregator::Netvlad(v) = e.aggregator {
                if v.clusters == 0 {
                    out.push(format!("model.experts[{i}].aggregator: clusters must be ≥ 1"));
                }
            }
        }
        if self.common_dim == 0 {
            out.push("model.common_dim: must be positive".to_string());
        }
        if self.gating_hidden == Some(0) {
            out.push("model.gating_hidden: must be positive".to_string());
        }
        if self.text.word_dim == 0 {
            out.push("model.text.word_dim: must be positive".to_string());
        }
        if self.text.vlad.clusters == 0 {
            out.push("model.text.vlad.clusters: must be ≥ 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Copy restricted to the named experts, keeping configured order.
    pub fn with_experts(&self, names: &[&str]) -> Result<ModelConfig> {
        for n in names {
            if !self.experts.iter().any(|e| e.name == *n) {
                return Err(Error::Config(format!(
                    "unknown expert `{n}`; valid experts: {}",
                    self.expert_names().join(", ")
                )));
            }
        }
        let mut cfg = self.clone();
        cfg.experts.retain(|e| names.contains(&e.name.as_str()));
        Ok(cfg)
    }
}

/// Freshly initialized parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let variant = cfg.variant;
    let d = cfg.common_dim;

    for e in &cfg.experts {
        if let Aggregator::Netvlad(v) = e.aggregator {
            NetVladParams::<T>::init(v, e.input_dim, &mut rng)
                .store(&format!("video.vlad.{}", e.name), &mut p);
        }
    }
    if variant.uses_projection() {
        for e in &cfg.experts {
            Linear::<T>::init(e.aggregated_dim(), d, &mut rng)
                .store(&format!("video.proj.{}", e.name), &mut p);
        }
    }
    if variant.uses_gating() {
        let h = cfg.gating_hidden();
        Mlp::<T>::init(2 * d, h, d, &mut rng).store("video.cg.g", &mut p);
        Mlp::<T>::init(d, h, d, &mut rng).store("video.cg.h", &mut p);
    }
    if variant.uses_gem() {
        for (i, e) in cfg.experts.iter().enumerate() {
            GemParams::<T>::init(cfg.gem_input_dim(i), d, &mut rng)
                .store(&format!("video.gem.{}", e.name), &mut p);
        }
    }

    NetVladParams::<T>::init(cfg.text.vlad, cfg.text.word_dim, &mut rng).store("text.vlad", &mut p);
    let text_dim = cfg.text_dim();
    if variant.uses_gem() {
        for e in &cfg.experts {
            GemParams::<T>::init(text_dim, d, &mut rng)
                .store(&format!("text.gem.{}", e.name), &mut p);
        }
    } else {
        let total: usize = cfg.experts.iter().map(ExpertConfig::aggregated_dim).sum();
        Linear::<T>::init(text_dim, total, &mut rng).store("text.proj", &mut p);
    }
    if variant.uses_mixture_weights() {
        Linear::<T>::init(text_dim, cfg.n_experts(), &mut rng).store("text.mix", &mut p);
    }
    Ok(p)
}

/// A three-expert model small enough for exhaustive finite differences,
/// and random inputs for it.
pub mod fixtures {
    use rand::Rng;

    use super::*;
    use crate::record::{CaptionSequence, VideoRecord};
    use crate::tensor::Tensor;

    pub fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            experts: vec![
                ExpertConfig::mean("scene", 5),
                ExpertConfig {
                    name: "audio".into(),
                    input_dim: 3,
                    aggregator: Aggregator::Netvlad(NetVladConfig::new(2, 1)),
                },
                ExpertConfig::mean("face", 4),
            ],
            variant,
            common_dim: 4,
            gating_hidden: Some(3),
            text: TextConfig {
                word_dim: 3,
                vlad: NetVladConfig::new(2, 1),
            },
        }
    }

    /// `b` videos with every expert present, and one caption per video.
    pub fn random_batch<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        b: usize,
        rng: &mut R,
    ) -> (Vec<VideoRecord<f64>>, Vec<CaptionSequence<f64>>) {
        let mut videos = Vec::with_capacity(b);
        let mut captions = Vec::with_capacity(b);
        for i in 0..b {
            let mut v = VideoRecord::new(format!("v{i}"));
            for e in &cfg.experts {
                let t = rng.random_range(1..5);
                v.experts
                    .insert(e.name.clone(), Some(Tensor::randn(&[t, e.input_dim], 1.0, rng)));
            }
            videos.push(v);
            let l = rng.random_range(1..5);
            captions.push(Tensor::randn(&[l, cfg.text.word_dim], 1.0, rng));
        }
        (videos, captions)
    }
}
