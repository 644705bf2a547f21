//! Video–text similarity with the missing-expert protocol.
//!
//! Text blocks stay unit norm and carry their mixture weights separately, so
//! a video with missing experts only needs the text weights renormalized over
//! its available experts; no re-encoding is involved.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text_encoder::{renormalize_weights, TextBlocks, TextEmbedding, MIN_WEIGHT_MASS};
use crate::video_encoder::{JointEmbedding, VideoBlocks};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T = f64> {
    /// `N_v × N_t` scores.
    pub scores: Tensor<T>,
    pub video_ids: Vec<String>,
    pub text_ids: Vec<String>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn new(scores: Tensor<T>, video_ids: Vec<String>, text_ids: Vec<String>) -> Result<Self> {
        if scores.dims() != (video_ids.len(), text_ids.len()) {
            return Err(Error::dim(
                "SimilarityMatrix",
                scores.shape(),
                &[video_ids.len(), text_ids.len()],
            ));
        }
        Ok(SimilarityMatrix {
            scores,
            video_ids,
            text_ids,
        })
    }
}

/// `Σ_i w'_i ⟨v_i, t_i⟩` over the video's available experts, with `w'` the
/// text weights renormalized over them. The unweighted variant is a plain
/// inner product of the concatenations.
pub fn similarity<T: Scalar>(v: &JointEmbedding<T>, t: &TextEmbedding<T>) -> Result<T> {
    if v.blocks.len() != t.blocks.len() {
        return Err(Error::dim("similarity", &[v.blocks.len()], &[t.blocks.len()]));
    }
    let mut dots = Vec::with_capacity(v.blocks.len());
    for (vb, tb) in v.blocks.iter().zip(&t.blocks) {
        if vb.len() != tb.len() {
            return Err(Error::dim("similarity", vb.shape(), tb.shape()));
        }
        dots.push(vb.dot(tb)?);
    }
    match &t.weights {
        None => {
            if !v.available.iter().any(|&a| a) {
                return Err(Error::NoAvailableExpert);
            }
            Ok(dots.into_iter().sum())
        }
        Some(w) => {
            let w = renormalize_weights(w, &v.available)?;
            Ok(dots
                .iter()
                .zip(&w)
                .zip(&v.available)
                .filter(|(_, &a)| a)
                .map(|((&d, &wi), _)| wi * d)
                .sum())
        }
    }
}

/// Entry `[i][j]` is `similarity(videos[i], texts[j])`.
pub fn similarity_matrix<T: Scalar>(
    videos: &[JointEmbedding<T>],
    texts: &[TextEmbedding<T>],
) -> Result<Tensor<T>> {
    if videos.is_empty() || texts.is_empty() {
        return Err(Error::Contract("similarity_matrix needs non-empty inputs".into()));
    }
    let mut out = Tensor::zeros(&[videos.len(), texts.len()]);
    for (i, v) in videos.iter().enumerate() {
        for (j, t) in texts.iter().enumerate() {
            let s = similarity(v, t).map_err(|e| Error::Pair {
                video: i,
                text: j,
                source: Box::new(e),
            })?;
            out.set(i, j, s);
        }
    }
    Ok(out)
}

/// Batched similarity on the tape: `B_v × B_t`.
pub fn similarity_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    video: &VideoBlocks,
    text: &TextBlocks,
) -> Result<Var> {
    if video.blocks.len() != text.blocks.len() {
        return Err(Error::dim(
            "similarity_graph",
            &[video.blocks.len()],
            &[text.blocks.len()],
        ));
    }
    let mut terms = Vec::with_capacity(video.blocks.len());
    for (i, (&vb, &tb)) in video.blocks.iter().zip(&text.blocks).enumerate() {
        let tt = g.transpose(tb);
        let c = g.matmul(vb, tt)?;
        let term = match text.weights {
            None => c,
            Some(w) => {
                let wi = g.slice_cols(w, i, i + 1)?;
                let wi = g.transpose(wi);
                g.mul_row(c, wi)?
            }
        };
        terms.push(term);
    }
    let mut num = terms[0];
    for &t in &terms[1..] {
        num = g.add(num, t)?;
    }
    let Some(w) = text.weights else {
        return Ok(num);
    };
    let mask = Tensor::new(
        video.mask.shape().to_vec(),
        video.mask.data().iter().map(|&x| T::lit(x)).collect(),
    )?;
    let mask = g.constant(mask);
    let wt = g.transpose(w);
    let denom = g.matmul(mask, wt)?;
    let min = g.value(denom).data().iter().fold(T::infinity(), |m, &x| m.min(x));
    if !(min >= T::lit(MIN_WEIGHT_MASS)) {
        return Err(Error::DegenerateWeights(min.to_f64_lossy()));
    }
    g.div(num, denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn perfect_match_and_orthogonal() {
        let blocks = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let je = JointEmbedding {
            blocks: blocks.clone(),
            available: vec![true, true],
        };
        let te = TextEmbedding {
            blocks,
            weights: Some(vec![0.3, 0.7]),
        };
        assert!((similarity(&je, &te).unwrap() - 1.0).abs() < 1e-15);
        let te2 = TextEmbedding {
            blocks: vec![v(&[0.0, 1.0]), v(&[1.0, 0.0])],
            weights: Some(vec![0.3, 0.7]),
        };
        assert_eq!(similarity(&je, &te2).unwrap(), 0.0);
    }

    #[test]
    fn missing_expert_renormalizes() {
        let je = JointEmbedding {
            blocks: vec![v(&[1.0, 0.0]), v(&[0.0, 0.0])],
            available: vec![true, false],
        };
        let te = TextEmbedding {
            blocks: vec![v(&[0.4, 0.9165151389911680]), v(&[1.0, 0.0])],
            weights: Some(vec![0.25, 0.75]),
        };
        assert!((similarity(&je, &te).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn matrix_errors_name_the_pair() {
        let good = JointEmbedding {
            blocks: vec![v(&[1.0])],
            available: vec![true],
        };
        let bad = JointEmbedding {
            blocks: vec![v(&[0.0])],
            available: vec![false],
        };
        let t = TextEmbedding {
            blocks: vec![v(&[1.0])],
            weights: Some(vec![1.0]),
        };
        let err = similarity_matrix(&[good, bad], &[t]).unwrap_err();
        assert!(matches!(err, Error::Pair { video: 1, text: 0, .. }));
    }
}
