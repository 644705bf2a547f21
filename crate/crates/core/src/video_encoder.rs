//! Video side: aggregate each expert, project to the common width, let the
//! experts gate one another, and embed each through its own GEM.
//!
//! Two paths share the same parameters. The eager functions encode one record
//! at a time on plain tensors; [`encode_videos_graph`] records a whole
//! minibatch on the tape for training.

use crate::aggregation::{mean_pool, netvlad_graph, NetVladParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{gem, gem_graph, linear_graph, mlp_graph, GemParams, Linear, Mlp};
use crate::model::{Aggregator, ExpertConfig, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::record::VideoRecord;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, NORM_EPS};

/// Shared pairwise (`g`) and summary (`h`) networks of the gating module.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams<T = f64> {
    pub g: Mlp<T>,
    pub h: Mlp<T>,
}

impl<T: Scalar> GatingParams<T> {
    pub fn load(params: &ParamStore<T>) -> Result<Self> {
        Ok(GatingParams {
            g: Mlp::load("video.cg.g", params)?,
            h: Mlp::load("video.cg.h", params)?,
        })
    }
}

/// Concatenated per-expert blocks of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding<T = f64> {
    pub blocks: Vec<Tensor<T>>,
    pub available: Vec<bool>,
}

impl<T: Scalar> JointEmbedding<T> {
    pub fn n_experts(&self) -> usize {
        self.blocks.len()
    }

    /// Flat concatenation of all blocks (missing ones stay zero).
    pub fn concatenated(&self) -> Tensor<T> {
        Tensor::vector(self.blocks.iter().flat_map(|b| b.data().iter().copied()).collect())
    }
}

/// Temporal aggregation of one expert's sequence.
pub fn aggregate_expert<T: Scalar>(
    seq: &Tensor<T>,
    expert: &ExpertConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    if seq.cols() != expert.input_dim {
        return Err(Error::Config(format!(
            "expert `{}` expects width {}, got {}",
            expert.name,
            expert.input_dim,
            seq.cols()
        )));
    }
    match expert.aggregator {
        Aggregator::Mean => mean_pool(seq),
        Aggregator::Netvlad(_) => {
            NetVladParams::load(&format!("video.vlad.{}", expert.name), params)?.aggregate(seq)
        }
    }
}

/// Affine map of an aggregated expert feature to the common width.
pub fn project_expert<T: Scalar>(
    agg: &Tensor<T>,
    expert: &ExpertConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let lin = Linear::load(&format!("video.proj.{}", expert.name), params)?;
    if agg.len() != expert.aggregated_dim() || agg.len() != lin.input_dim() {
        return Err(Error::Config(format!(
            "expert `{}`: aggregated feature has width {}, projection expects {}",
            expert.name,
            agg.len(),
            lin.input_dim()
        )));
    }
    let out = lin.forward(&agg.reshape(&[1, agg.len()])?)?;
    Ok(Tensor::vector(out.into_data()))
}

/// Attention vector per available expert:
/// `T⁽ⁱ⁾ = h(Σ_{j≠i, j available} g([Ψ⁽ⁱ⁾; Ψ⁽ʲ⁾]))`. Unavailable experts get
/// `None`. An empty sum is the zero vector.
pub fn collaborative_attention<T: Scalar>(
    projections: &[Tensor<T>],
    available: &[bool],
    gating: &GatingParams<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    if projections.len() != available.len() {
        return Err(Error::dim(
            "collaborative_attention",
            &[projections.len()],
            &[available.len()],
        ));
    }
    let d = gating.g.fc2.output_dim();
    let mut out = Vec::with_capacity(projections.len());
    for (i, pi) in projections.iter().enumerate() {
        if !available[i] {
            out.push(None);
            continue;
        }
        let mut acc = Tensor::zeros(&[1, d]);
        for (j, pj) in projections.iter().enumerate() {
            if j == i || !available[j] {
                continue;
            }
            let mut pair = pi.data().to_vec();
            pair.extend_from_slice(pj.data());
            let pair = Tensor::matrix(1, pair.len(), pair)?;
            acc = acc.add(&gating.g.forward(&pair)?)?;
        }
        let t = gating.h.forward(&acc)?;
        out.push(Some(Tensor::vector(t.into_data())));
    }
    Ok(out)
}

/// `Ψ⁽ⁱ⁾ ∘ σ(T⁽ⁱ⁾)` for every expert.
pub fn gate_experts<T: Scalar>(
    projections: &[Tensor<T>],
    attentions: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    if projections.len() != attentions.len() {
        return Err(Error::dim("gate_experts", &[projections.len()], &[attentions.len()]));
    }
    projections
        .iter()
        .zip(attentions)
        .map(|(p, a)| {
            if p.len() != a.len() {
                return Err(Error::dim("gate_experts", p.shape(), a.shape()));
            }
            Tensor::vector(p.data().to_vec()).hadamard(&Tensor::vector(a.data().to_vec()).sigmoid())
        })
        .collect()
}

/// Encodes one video record. Missing experts produce zero blocks.
pub fn encode_video<T: Scalar>(
    record: &VideoRecord<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
) -> Result<JointEmbedding<T>> {
    let n = cfg.n_experts();
    let mut available = vec![false; n];
    let mut aggregated = Vec::with_capacity(n);
    for (i, e) in cfg.experts.iter().enumerate() {
        match record.expert(&e.name) {
            Some(seq) => {
                available[i] = true;
                aggregated.push(aggregate_expert(seq, e, params)?);
            }
            None => aggregated.push(Tensor::zeros(&[e.aggregated_dim()])),
        }
    }
    if !available.iter().any(|&a| a) {
        return Err(Error::Unencodable(record.id.clone()));
    }

    if cfg.variant == Variant::Concat {
        let flat: Vec<T> = aggregated.iter().flat_map(|a| a.data().iter().copied()).collect();
        let flat = Tensor::vector(flat).l2_normalize(T::lit(NORM_EPS));
        let mut blocks = Vec::with_capacity(n);
        let mut offset = 0;
        for a in &aggregated {
            blocks.push(Tensor::vector(flat.data()[offset..offset + a.len()].to_vec()));
            offset += a.len();
        }
        return Ok(JointEmbedding { blocks, available });
    }

    let mut projected = Vec::with_capacity(n);
    for (i, e) in cfg.experts.iter().enumerate() {
        if cfg.variant.uses_projection() && available[i] {
            projected.push(project_expert(&aggregated[i], e, params)?);
        } else if cfg.variant.uses_projection() {
            projected.push(Tensor::zeros(&[cfg.common_dim]));
        } else {
            projected.push(aggregated[i].clone());
        }
    }

    if cfg.variant.uses_gating() {
        let gating = GatingParams::load(params)?;
        let att = collaborative_attention(&projected, &available, &gating)?;
        let att: Vec<Tensor<T>> = att
            .into_iter()
            .zip(&projected)
            .map(|(a, p)| a.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        projected = gate_experts(&projected, &att)?;
    }

    let mut blocks = Vec::with_capacity(n);
    for (i, e) in cfg.experts.iter().enumerate() {
        if available[i] {
            let p = GemParams::load(&format!("video.gem.{}", e.name), params)?;
            blocks.push(gem(&projected[i], &p)?);
        } else {
            blocks.push(Tensor::zeros(&[cfg.block_dim(i)]));
        }
    }
    Ok(JointEmbedding { blocks, available })
}

/// Per-expert input of a video, ready for batching. Mean-pooled experts are
/// parameter-free and pooled once up front.
#[derive(Clone, Debug, PartialEq)]
pub enum ExpertInput<T = f64> {
    Missing,
    Pooled(Tensor<T>),
    Sequence(Tensor<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedVideo<T = f64> {
    pub id: String,
    pub inputs: Vec<ExpertInput<T>>,
}

impl<T: Scalar> PreparedVideo<T> {
    pub fn available(&self) -> Vec<bool> {
        self.inputs
            .iter()
            .map(|x| !matches!(x, ExpertInput::Missing))
            .collect()
    }
}

pub fn prepare_video<T: Scalar>(record: &VideoRecord<T>, cfg: &ModelConfig) -> Result<PreparedVideo<T>> {
    let mut inputs = Vec::with_capacity(cfg.n_experts());
    for e in &cfg.experts {
        let input = match record.expert(&e.name) {
            None => ExpertInput::Missing,
            Some(seq) => {
                if seq.cols() != e.input_dim {
                    return Err(Error::Config(format!(
                        "record `{}`: expert `{}` expects width {}, got {}",
                        record.id,
                        e.name,
                        e.input_dim,
                        seq.cols()
                    )));
                }
                match e.aggregator {
                    Aggregator::Mean => {
                        let m = mean_pool(seq)?;
                        ExpertInput::Pooled(m.reshape(&[1, e.input_dim])?)
                    }
                    Aggregator::Netvlad(_) => ExpertInput::Sequence(seq.clone()),
                }
            }
        };
        inputs.push(input);
    }
    if inputs.iter().all(|x| matches!(x, ExpertInput::Missing)) {
        return Err(Error::Unencodable(record.id.clone()));
    }
    Ok(PreparedVideo {
        id: record.id.clone(),
        inputs,
    })
}

/// Taped collaborative gating over `B×D` projections. `mask_cols[i]` is the
/// `B×1` availability of expert `i`; pair relations involving a missing
/// expert are zeroed. Reads `{prefix}.g` and `{prefix}.h`.
pub fn collaborative_gating_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    projected: &[Var],
    mask_cols: &[Var],
    prefix: &str,
) -> Result<Vec<Var>> {
    let n = projected.len();
    if mask_cols.len() != n {
        return Err(Error::dim("collaborative_gating", &[n], &[mask_cols.len()]));
    }
    let (g_name, h_name) = (format!("{prefix}.g"), format!("{prefix}.h"));
    let mut gated = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc: Option<Var> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let pair = g.concat_cols(&[projected[i], projected[j]])?;
            let rel = mlp_graph(g, pair, &g_name)?;
            let rel = g.mul_col(rel, mask_cols[i])?;
            let rel = g.mul_col(rel, mask_cols[j])?;
            acc = Some(match acc {
                None => rel,
                Some(a) => g.add(a, rel)?,
            });
        }
        let acc = match acc {
            Some(a) => a,
            None => {
                let shape = g.value(projected[i]).shape().to_vec();
                g.constant(Tensor::zeros(&shape))
            }
        };
        let att = mlp_graph(g, acc, &h_name)?;
        let gate = g.sigmoid(att);
        gated.push(g.hadamard(projected[i], gate)?);
    }
    Ok(gated)
}

/// Taped video embeddings of a minibatch.
pub struct VideoBlocks {
    /// One `B×D_i` matrix per expert; rows of missing experts are zero.
    pub blocks: Vec<Var>,
    /// `B×n` availability indicator (1 available, 0 missing).
    pub mask: Tensor<f64>,
}

pub fn encode_videos_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    videos: &[&PreparedVideo<T>],
) -> Result<VideoBlocks> {
    let b = videos.len();
    let n = cfg.n_experts();
    if b == 0 {
        return Err(Error::Contract("empty video batch".into()));
    }
    let mut mask = Tensor::<f64>::zeros(&[b, n]);
    for (r, v) in videos.iter().enumerate() {
        if v.inputs.len() != n {
            return Err(Error::dim("encode_videos", &[n], &[v.inputs.len()]));
        }
        for (i, a) in v.available().into_iter().enumerate() {
            if a {
                mask.set(r, i, 1.0);
            }
        }
    }
    let mask_cols: Vec<Var> = (0..n)
        .map(|i| {
            let col = (0..b).map(|r| T::lit(mask.get(r, i))).collect();
            g.constant(Tensor::matrix(b, 1, col).expect("b×1"))
        })
        .collect();

    let mut aggregated = Vec::with_capacity(n);
    for (i, e) in cfg.experts.iter().enumerate() {
        let width = e.aggregated_dim();
        let mut rows = Vec::with_capacity(b);
        for v in videos {
            let row = match &v.inputs[i] {
                ExpertInput::Missing => g.constant(Tensor::zeros(&[1, width])),
                ExpertInput::Pooled(t) => g.constant(t.clone()),
                ExpertInput::Sequence(seq) => {
                    let s = g.constant(seq.clone());
                    netvlad_graph(g, s, &format!("video.vlad.{}", e.name))?
                }
            };
            rows.push(row);
        }
        aggregated.push(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? });
    }

    if cfg.variant == Variant::Concat {
        let all = g.concat_cols(&aggregated)?;
        let all = g.l2_normalize(all, T::lit(NORM_EPS));
        let mut blocks = Vec::with_capacity(n);
        let mut offset = 0;
        for e in &cfg.experts {
            let w = e.aggregated_dim();
            blocks.push(g.slice_cols(all, offset, offset + w)?);
            offset += w;
        }
        return Ok(VideoBlocks { blocks, mask });
    }

    let mut projected = Vec::with_capacity(n);
    for (i, e) in cfg.experts.iter().enumerate() {
        projected.push(if cfg.variant.uses_projection() {
            linear_graph(g, aggregated[i], &format!("video.proj.{}", e.name))?
        } else {
            aggregated[i]
        });
    }

    if cfg.variant.uses_gating() {
        projected = collaborative_gating_graph(g, &projected, &mask_cols, "video.cg")?;
    }

    let mut blocks = Vec::with_capacity(n);
    for (i, e) in cfg.experts.iter().enumerate() {
        let emb = gem_graph(g, projected[i], &format!("video.gem.{}", e.name))?;
        blocks.push(g.mul_col(emb, mask_cols[i])?);
    }
    Ok(VideoBlocks { blocks, mask })
}
