//! Text side: one shared NetVLAD over the caption's word vectors, one GEM per
//! expert subspace, and a softmax mixture head. Nothing here sees video data,
//! so caption embeddings can be computed and indexed on their own.

use crate::aggregation::{netvlad_graph, NetVladParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{gem_graph, linear_graph, GemParams, Linear};
use crate::model::{ModelConfig, Variant};
use crate::params::ParamStore;
use crate::record::CaptionSequence;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, NORM_EPS};

/// Below this total, available mixture weights cannot be renormalized.
pub const MIN_WEIGHT_MASS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T = f64> {
    /// One block per expert, in configured expert order.
    pub blocks: Vec<Tensor<T>>,
    /// Mixture weights summing to one; `None` for the unweighted concat
    /// variant.
    pub weights: Option<Vec<T>>,
}

pub fn encode_text<T: Scalar>(
    caption: &CaptionSequence<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
) -> Result<TextEmbedding<T>> {
    if caption.rows() == 0 || caption.is_empty() {
        return Err(Error::EmptySequence("caption has no token vectors".into()));
    }
    if caption.cols() != cfg.text.word_dim {
        return Err(Error::Config(format!(
            "caption word width {} does not match configured {}",
            caption.cols(),
            cfg.text.word_dim
        )));
    }
    let h = NetVladParams::load("text.vlad", params)?.aggregate(caption)?;
    let h = h.reshape(&[1, h.len()])?;
    let n = cfg.n_experts();

    if cfg.variant == Variant::Concat {
        let y = Linear::load("text.proj", params)?
            .forward(&h)?
            .l2_normalize(T::lit(NORM_EPS));
        let mut blocks = Vec::with_capacity(n);
        let mut offset = 0;
        for i in 0..n {
            let w = cfg.block_dim(i);
            blocks.push(Tensor::vector(y.data()[offset..offset + w].to_vec()));
            offset += w;
        }
        return Ok(TextEmbedding {
            blocks,
            weights: None,
        });
    }

    let mut blocks = Vec::with_capacity(n);
    for e in &cfg.experts {
        let gp = GemParams::load(&format!("text.gem.{}", e.name), params)?;
        blocks.push(Tensor::vector(gp.forward(&h)?.into_data()));
    }
    let weights = if cfg.variant.uses_mixture_weights() {
        Linear::load("text.mix", params)?
            .forward(&h)?
            .softmax()
            .into_data()
    } else {
        vec![T::one() / T::lit(n as f64); n]
    };
    Ok(TextEmbedding {
        blocks,
        weights: Some(weights),
    })
}

/// Drops the weights of unavailable experts and rescales the rest to sum to
/// one. The result keeps full length with zeros in unavailable slots.
pub fn renormalize_weights<T: Scalar>(weights: &[T], available: &[bool]) -> Result<Vec<T>> {
    if weights.len() != available.len() {
        return Err(Error::dim("renormalize_weights", &[weights.len()], &[available.len()]));
    }
    if !available.iter().any(|&a| a) {
        return Err(Error::NoAvailableExpert);
    }
    let mass: T = weights
        .iter()
        .zip(available)
        .filter(|(_, &a)| a)
        .map(|(&w, _)| w)
        .sum();
    if !(mass >= T::lit(MIN_WEIGHT_MASS)) {
        return Err(Error::DegenerateWeights(mass.to_f64_lossy()));
    }
    Ok(weights
        .iter()
        .zip(available)
        .map(|(&w, &a)| if a { w / mass } else { T::zero() })
        .collect())
}

/// Taped text embeddings of a minibatch.
pub struct TextBlocks {
    /// One `B×D_i` matrix per expert.
    pub blocks: Vec<Var>,
    /// `B×n` mixture weights; `None` for the concat variant.
    pub weights: Option<Var>,
}

pub fn encode_texts_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    captions: &[&CaptionSequence<T>],
) -> Result<TextBlocks> {
    if captions.is_empty() {
        return Err(Error::Contract("empty caption batch".into()));
    }
    let mut rows = Vec::with_capacity(captions.len());
    for c in captions {
        if c.rows() == 0 || c.is_empty() {
            return Err(Error::EmptySequence("caption has no token vectors".into()));
        }
        let s = g.constant((*c).clone());
        rows.push(netvlad_graph(g, s, "text.vlad")?);
    }
    let h = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let n = cfg.n_experts();
    let b = captions.len();

    if cfg.variant == Variant::Concat {
        let y = linear_graph(g, h, "text.proj")?;
        let y = g.l2_normalize(y, T::lit(NORM_EPS));
        let mut blocks = Vec::with_capacity(n);
        let mut offset = 0;
        for i in 0..n {
            let w = cfg.block_dim(i);
            blocks.push(g.slice_cols(y, offset, offset + w)?);
            offset += w;
        }
        return Ok(TextBlocks {
            blocks,
            weights: None,
        });
    }

    let mut blocks = Vec::with_capacity(n);
    for e in &cfg.experts {
        blocks.push(gem_graph(g, h, &format!("text.gem.{}", e.name))?);
    }
    let weights = if cfg.variant.uses_mixture_weights() {
        let logits = linear_graph(g, h, "text.mix")?;
        g.softmax(logits)
    } else {
        g.constant(Tensor::full(&[b, n], T::one() / T::lit(n as f64)))
    };
    Ok(TextBlocks {
        blocks,
        weights: Some(weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::small_config;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn renormalize_examples() {
        let w = renormalize_weights(&[0.2f64, 0.3, 0.5], &[true, false, true]).unwrap();
        assert!((w[0] - 0.2 / 0.7).abs() < 1e-15);
        assert!((w[2] - 0.5 / 0.7).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert!((w[0] - 0.2857).abs() < 1e-4 && (w[2] - 0.7143).abs() < 1e-4);

        let same = renormalize_weights(&[0.2f64, 0.3, 0.5], &[true; 3]).unwrap();
        for (a, b) in same.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(renormalize_weights(&[0.2, 0.3, 0.5], &[false, true, false]).unwrap()[1], 1.0);
    }

    #[test]
    fn renormalize_errors() {
        assert!(matches!(
            renormalize_weights(&[0.5, 0.5], &[false, false]),
            Err(Error::NoAvailableExpert)
        ));
        assert!(matches!(
            renormalize_weights(&[1.0, 0.0], &[false, true]),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn zero_mixture_head_is_uniform() {
        let cfg = small_config(Variant::Ce);
        let mut params = init_params::<f64>(&cfg, 1).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("text.mix") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cap = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let emb = encode_text(&cap, &cfg, &params).unwrap();
        for w in emb.weights.unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_expert_weight_is_one() {
        let cfg = small_config(Variant::Ce).with_experts(&["face"]).unwrap();
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = encode_text(&Tensor::randn(&[5, 3], 1.0, &mut rng), &cfg, &params).unwrap();
        assert_eq!(emb.weights.unwrap(), vec![1.0]);
    }

    #[test]
    fn blocks_unit_norm_and_graph_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in Variant::ALL {
            let cfg = small_config(variant);
            let params = init_params::<f64>(&cfg, 3).unwrap();
            let caps: Vec<_> = (2..5).map(|l| Tensor::randn(&[l, 3], 1.0, &mut rng)).collect();
            let eager: Vec<_> = caps.iter().map(|c| encode_text(c, &cfg, &params).unwrap()).collect();
            for e in &eager {
                if let Some(w) = &e.weights {
                    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for b in &e.blocks {
                        assert!((b.norm() - 1.0).abs() < 1e-9);
                    }
                }
            }
            let refs: Vec<_> = caps.iter().collect();
            let mut g = Graph::new(&params);
            let tb = encode_texts_graph(&mut g, &cfg, &refs).unwrap();
            for (i, &blk) in tb.blocks.iter().enumerate() {
                for (r, e) in eager.iter().enumerate() {
                    for (x, y) in g.value(blk).row(r).iter().zip(e.blocks[i].data()) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
            if let Some(w) = tb.weights {
                for (r, e) in eager.iter().enumerate() {
                    for (x, y) in g.value(w).row(r).iter().zip(e.weights.as_ref().unwrap()) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_caption_rejected() {
        let cfg = small_config(Variant::Ce);
        let params = init_params::<f64>(&cfg, 3).unwrap();
        assert!(matches!(
            encode_text(&Tensor::zeros(&[0, 3]), &cfg, &params),
            Err(Error::EmptySequence(_))
        ));
    }
}
