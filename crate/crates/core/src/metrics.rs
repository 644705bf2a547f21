//! Retrieval metrics: recall@K, median and mean rank in both directions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::TextToVideo => "text->video",
            Direction::VideoToText => "video->text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// K → fraction of queries whose ground truth ranks within the top K.
    pub recall: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub queries: usize,
    pub candidates: usize,
}

impl RetrievalReport {
    pub fn from_ranks(direction: Direction, ranks: &[usize], candidates: usize, ks: &[usize]) -> Self {
        let q = ranks.len();
        let recall = ks
            .iter()
            .map(|&k| {
                let hits = ranks.iter().filter(|&&r| r <= k).count();
                (k, hits as f64 / q.max(1) as f64)
            })
            .collect();
        RetrievalReport {
            direction,
            recall,
            median_rank: median(ranks),
            mean_rank: ranks.iter().sum::<usize>() as f64 / q.max(1) as f64,
            queries: q,
            candidates,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// Geometric mean of the recalls at the given Ks (all must be present).
    pub fn geometric_mean_recall(&self, ks: &[usize]) -> Option<f64> {
        let mut log_sum = 0.0;
        for k in ks {
            let r = self.recall_at(*k)?;
            if r <= 0.0 {
                return Some(0.0);
            }
            log_sum += r.ln();
        }
        Some((log_sum / ks.len() as f64).exp())
    }
}

/// Mean of the two middle values for even counts.
pub fn median(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return f64::NAN;
    }
    let mut v = ranks.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// `1 + #{strictly greater} + #{ties at a lower index}`.
pub fn rank_of<T: Scalar>(scores: &[T], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < truth))
        .count()
}

/// Ground-truth pairing of captions to videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairing {
    /// `caption_video[c]` is the index of caption `c`'s video.
    pub caption_video: Vec<usize>,
    pub n_videos: usize,
}

impl Pairing {
    pub fn new(caption_video: Vec<usize>, n_videos: usize) -> Result<Self> {
        let mut counts = vec![0usize; n_videos];
        for (c, &v) in caption_video.iter().enumerate() {
            if v >= n_videos {
                return Err(Error::Integrity(format!(
                    "caption {c} maps to video {v}, but only {n_videos} videos exist"
                )));
            }
            counts[v] += 1;
        }
        if let Some(v) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Integrity(format!("video {v} has no caption")));
        }
        Ok(Pairing {
            caption_video,
            n_videos,
        })
    }

    /// One caption per video, caption `i` belonging to video `i`.
    pub fn identity(n: usize) -> Self {
        Pairing {
            caption_video: (0..n).collect(),
            n_videos: n,
        }
    }

    pub fn captions_of(&self, video: usize) -> impl Iterator<Item = usize> + '_ {
        self.caption_video
            .iter()
            .enumerate()
            .filter(move |(_, &v)| v == video)
            .map(|(c, _)| c)
    }
}

/// Ranks for both directions from an `N_v × N_t` score matrix.
pub fn ranks<T: Scalar>(scores: &Tensor<T>, pairing: &Pairing) -> Result<(Vec<usize>, Vec<usize>)> {
    let (nv, nt) = scores.dims();
    if nv != pairing.n_videos || nt != pairing.caption_video.len() {
        return Err(Error::dim(
            "evaluate",
            scores.shape(),
            &[pairing.n_videos, pairing.caption_video.len()],
        ));
    }
    let mut column = vec![T::zero(); nv];
    let mut t2v = Vec::with_capacity(nt);
    for (c, &v) in pairing.caption_video.iter().enumerate() {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = scores.get(i, c);
        }
        t2v.push(rank_of(&column, v));
    }
    let mut v2t = vec![usize::MAX; nv];
    for (c, &v) in pairing.caption_video.iter().enumerate() {
        let r = rank_of(scores.row(v), c);
        v2t[v] = v2t[v].min(r);
    }
    Ok((t2v, v2t))
}

/// Text→video and video→text reports. Video→text uses the best-ranked of
/// each video's captions, ranked among all captions.
pub fn evaluate<T: Scalar>(
    scores: &Tensor<T>,
    pairing: &Pairing,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (t2v, v2t) = ranks(scores, pairing)?;
    let (nv, nt) = scores.dims();
    Ok((
        RetrievalReport::from_ranks(Direction::TextToVideo, &t2v, nv, ks),
        RetrievalReport::from_ranks(Direction::VideoToText, &v2t, nt, ks),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_cases() {
        assert_eq!(rank_of(&[0.9, 0.1], 0), 1);
        assert_eq!(rank_of(&[0.5, 0.5], 1), 2);
        assert_eq!(rank_of(&[0.5, 0.5], 0), 1);
    }

    #[test]
    fn perfect_retrieval() {
        let s = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let (t2v, v2t) = evaluate(&s, &Pairing::identity(2), &DEFAULT_KS).unwrap();
        for r in [t2v, v2t] {
            assert_eq!(r.recall_at(1), Some(1.0));
            assert_eq!(r.median_rank, 1.0);
            assert_eq!(r.mean_rank, 1.0);
        }
    }

    #[test]
    fn hand_ranked_text_to_video() {
        // written with text queries as rows; scores are stored videos × texts
        let by_text = Tensor::matrix(2, 2, vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        let s = by_text.transpose();
        let (ranks_t2v, _) = ranks(&s, &Pairing::identity(2)).unwrap();
        assert_eq!(ranks_t2v, vec![2, 1]);
        let (t2v, _) = evaluate(&s, &Pairing::identity(2), &[1]).unwrap();
        assert_eq!(t2v.recall_at(1), Some(0.5));
        assert_eq!(t2v.median_rank, 1.5);
        assert_eq!(t2v.mean_rank, 1.5);
    }

    #[test]
    fn min_rank_over_captions() {
        // video 0 owns captions 0..3, ranked 4, 1 and 7 among all 8 captions
        let row0 = [0.8, 0.95, 0.1, 0.9, 0.85, 0.7, 0.6, 0.05];
        assert_eq!([rank_of(&row0, 0), rank_of(&row0, 1), rank_of(&row0, 2)], [4, 1, 7]);
        let mut data = row0.to_vec();
        data.extend_from_slice(&[0.0; 8]);
        let s = Tensor::matrix(2, 8, data).unwrap();
        let pairing = Pairing::new(vec![0, 0, 0, 1, 1, 1, 1, 1], 2).unwrap();
        let (_, v2t) = ranks(&s, &pairing).unwrap();
        assert_eq!(v2t[0], 1);
    }

    #[test]
    fn integrity_errors() {
        assert!(matches!(Pairing::new(vec![0, 2], 2), Err(Error::Integrity(_))));
        assert!(matches!(Pairing::new(vec![0, 0], 2), Err(Error::Integrity(_))));
    }

    #[test]
    fn recall_saturates_beyond_candidates() {
        let s = Tensor::matrix(2, 2, vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        let (t2v, _) = evaluate(&s, &Pairing::identity(2), &[2, 5]).unwrap();
        assert_eq!(t2v.recall_at(2), Some(1.0));
        assert_eq!(t2v.recall_at(5), Some(1.0));
    }
}
