//! Evaluation of a trained model and multi-seed aggregation of the results,
//! as JSON-serializable structs and aligned text tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::manifest::Split;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Direction, Pairing, RetrievalReport};
use crate::model::{ModelConfig, Variant};
use crate::params::ParamStore;
use crate::record::VideoRecord;
use crate::similarity::similarity_matrix;
use crate::tensor::Tensor;
use crate::text_encoder::encode_text;
use crate::video_encoder::encode_video;

/// Scores of every video against every caption of `records`, with the
/// caption→video pairing.
pub fn score_records(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    records: &[VideoRecord<f64>],
) -> Result<(Tensor<f64>, Pairing)> {
    if records.is_empty() {
        return Err(Error::Integrity("nothing to evaluate".into()));
    }
    let videos = records
        .iter()
        .map(|r| encode_video(r, cfg, params))
        .collect::<Result<Vec<_>>>()?;
    let mut texts = Vec::new();
    let mut owner = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for c in &r.captions {
            texts.push(encode_text(c, cfg, params)?);
            owner.push(i);
        }
    }
    let pairing = Pairing::new(owner, records.len())?;
    Ok((similarity_matrix(&videos, &texts)?, pairing))
}

/// Retrieval reports in both directions over `records`.
pub fn evaluate_model(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    records: &[VideoRecord<f64>],
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (scores, pairing) = score_records(cfg, params, records)?;
    evaluate(&scores, &pairing, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub variant: Variant,
    pub experts: Vec<String>,
    pub split: Split,
    pub text_to_video: RetrievalReport,
    pub video_to_text: RetrievalReport,
}

impl EvalReport {
    pub fn direction(&self, d: Direction) -> &RetrievalReport {
        match d {
            Direction::TextToVideo => &self.text_to_video,
            Direction::VideoToText => &self.video_to_text,
        }
    }
}

/// `(label, value)` pairs in table order: R@K for each K, then MdR, MnR.
pub fn metric_row(r: &RetrievalReport) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = r.recall.iter().map(|(k, v)| (format!("R@{k}"), 100.0 * v)).collect();
    out.push(("MdR".into(), r.median_rank));
    out.push(("MnR".into(), r.mean_rank));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub direction: Direction,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub values: Vec<f64>,
}

/// Mean and sample standard deviation (`n − 1` denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<EvalReport>,
    pub summary: Vec<MetricSummary>,
}

impl MultiSeedReport {
    /// Runs may arrive in any order; they are sorted by seed.
    pub fn new(mut runs: Vec<EvalReport>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Contract("no runs to summarize".into()));
        }
        runs.sort_by_key(|r| r.seed);
        let mut summary = Vec::new();
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            let rows: Vec<_> = runs.iter().map(|r| metric_row(r.direction(d))).collect();
            for (m, (label, _)) in rows[0].iter().enumerate() {
                let values: Vec<f64> = rows.iter().map(|row| row[m].1).collect();
                let (mean, std) = mean_std(&values);
                summary.push(MetricSummary {
                    direction: d,
                    metric: label.clone(),
                    mean,
                    std,
                    values,
                });
            }
        }
        Ok(MultiSeedReport { runs, summary })
    }

    pub fn get(&self, direction: Direction, metric: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.direction == direction && s.metric == metric)
    }

    /// One block per direction: a row per seed, then `mean`, `std` and
    /// `mean ± std` rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            let cols: Vec<&MetricSummary> = self.summary.iter().filter(|s| s.direction == d).collect();
            let mut rows: Vec<(String, Vec<String>)> = Vec::new();
            for (i, r) in self.runs.iter().enumerate() {
                rows.push((format!("seed {}", r.seed), cols.iter().map(|c| format!("{:.2}", c.values[i])).collect()));
            }
            rows.push(("mean".into(), cols.iter().map(|c| format!("{:.2}", c.mean)).collect()));
            rows.push(("std".into(), cols.iter().map(|c| format!("{:.2}", c.std)).collect()));
            rows.push((
                "mean ± std".into(),
                cols.iter().map(|c| format!("{:.2} ± {:.2}", c.mean, c.std)).collect(),
            ));
            let header: Vec<String> = cols.iter().map(|c| c.metric.clone()).collect();
            let _ = writeln!(out, "{}", d.label());
            out.push_str(&aligned(&header, &rows));
            out.push('\n');
        }
        out
    }
}

/// Left-aligned label column followed by right-aligned value columns.
pub fn aligned(header: &[String], rows: &[(String, Vec<String>)]) -> String {
    let label_w = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (_, cells) in rows {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let pad = |s: &str, w: usize| format!("{}{s}", " ".repeat(w.saturating_sub(s.chars().count())));
    let _ = write!(out, "{}", " ".repeat(label_w));
    for (h, &w) in header.iter().zip(&widths) {
        let _ = write!(out, "  {}", pad(h, w));
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label}{}", " ".repeat(label_w - label.chars().count()));
        for (c, &w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {}", pad(c, w));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DEFAULT_KS;

    fn fake(seed: u64, r1: f64) -> EvalReport {
        let mk = |d| {
            let mut r = RetrievalReport::from_ranks(d, &[1, 2, 3, 4], 4, &DEFAULT_KS);
            r.recall.insert(1, r1);
            r
        };
        EvalReport {
            seed,
            variant: Variant::Ce,
            experts: vec!["a".into()],
            split: Split::Test,
            text_to_video: mk(Direction::TextToVideo),
            video_to_text: mk(Direction::VideoToText),
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn summary_is_order_independent() {
        let a = MultiSeedReport::new(vec![fake(0, 0.1), fake(1, 0.2), fake(2, 0.6)]).unwrap();
        let b = MultiSeedReport::new(vec![fake(2, 0.6), fake(0, 0.1), fake(1, 0.2)]).unwrap();
        assert_eq!(a, b);
        let r1 = a.get(Direction::TextToVideo, "R@1").unwrap();
        assert!((r1.mean - 30.0).abs() < 1e-12);
        assert_eq!(a.summary.len(), 2 * (DEFAULT_KS.len() + 2));
    }

    #[test]
    fn table_has_mean_and_std_rows() {
        let t = MultiSeedReport::new(vec![fake(0, 0.1), fake(1, 0.2), fake(2, 0.6)])
            .unwrap()
            .to_table();
        for needle in ["seed 0", "seed 2", "mean ", "std ", "mean ± std", "R@50", "MnR", "text->video"] {
            assert!(t.contains(needle), "{needle} missing in\n{t}");
        }
    }
}
