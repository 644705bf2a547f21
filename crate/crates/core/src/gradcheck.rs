//! Central finite-difference verification of tape gradients.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{netvlad_graph, NetVladConfig, NetVladParams};
use crate::error::Result;
use crate::graph::{gradients, Graph, Var};
use crate::layers::{gem_graph, linear_graph, GemParams, Linear, Mlp};
use crate::loss::ranking_loss_graph;
use crate::model::fixtures::{random_batch, small_config};
use crate::model::{init_params, Variant};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::similarity::similarity_graph;
use crate::tensor::Tensor;
use crate::text_encoder::{encode_texts_graph, TextBlocks};
use crate::video_encoder::{collaborative_gating_graph, encode_videos_graph, prepare_video, VideoBlocks};

/// Step used by the verification suite.
pub const FD_STEP: f64 = 1e-6;
/// Acceptance threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-5;

/// Numerical gradient of a scalar graph function by central differences,
/// perturbing every parameter entry in turn.
pub fn numeric_gradients<T, F>(params: &ParamStore<T>, f: F, h: f64) -> Result<Gradients<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let eval = |p: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::new(p);
        let v = f(&mut g)?;
        Ok(g.value(v).sum())
    };
    let h_t = T::lit(h);
    let two_h = T::lit(2.0 * h);
    let mut work = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.len();
        for k in 0..n {
            let orig = params.get(name)?.data()[k];
            set_entry(&mut work, name, k, orig + h_t);
            let plus = eval(&work)?;
            set_entry(&mut work, name, k, orig - h_t);
            let minus = eval(&work)?;
            set_entry(&mut work, name, k, orig);
            if let Some(slot) = out.get_mut(name) {
                slot.data_mut()[k] = (plus - minus) / two_h;
            }
        }
    }
    Ok(out)
}

fn set_entry<T: Scalar>(p: &mut ParamStore<T>, name: &str, k: usize, v: T) {
    if let Some(t) = p.get_mut(name) {
        t.data_mut()[k] = v;
    }
}

/// `‖analytic − numeric‖∞ / (‖numeric‖∞ + 1e-8)` over all parameters.
pub fn relative_error<T: Scalar>(analytic: &Gradients<T>, numeric: &Gradients<T>) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (name, n) in numeric.iter() {
        let Ok(a) = analytic.get(name) else {
            return f64::INFINITY;
        };
        for (&x, &y) in a.data().iter().zip(n.data()) {
            diff = diff.max((x - y).to_f64_lossy().abs());
            scale = scale.max(y.to_f64_lossy().abs());
        }
    }
    diff / (scale + 1e-8)
}

/// Compares tape gradients against central differences; returns the
/// relative error.
pub fn check<T, F>(params: &ParamStore<T>, f: F, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    check_with(params, f, h, false)
}

/// [`check`], optionally corrupting the tape gradient first (scaled by
/// `1 + 1e-3`) as a negative control.
pub fn check_with<T, F>(params: &ParamStore<T>, f: F, h: f64, corrupt: bool) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let (_, mut analytic) = gradients(params, |g| {
        let v = f(g)?;
        Ok(g.sum(v))
    })?;
    if corrupt {
        for (_, t) in analytic.iter_mut() {
            for x in t.data_mut() {
                *x *= T::lit(1.0 + 1e-3);
            }
        }
    }
    let numeric = numeric_gradients(params, &f, h)?;
    Ok(relative_error(&analytic, &numeric))
}

/// Operations covered by [`run_suite`], in report order.
pub const SUITE_OPS: [&str; 13] = [
    "matmul",
    "hadamard",
    "sigmoid",
    "softmax",
    "l2_normalize",
    "netvlad",
    "projection",
    "gating_mlps",
    "gem",
    "mixture_head",
    "similarity",
    "ranking_loss",
    "ce_end_to_end",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpResult {
    pub op: String,
    /// Largest relative error over all seeds.
    pub worst: f64,
    pub worst_seed: u64,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub step: f64,
    pub tolerance: f64,
    pub ops: Vec<OpResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpResult> {
        self.ops.iter().filter(|o| !o.passed)
    }
}

type Case = (ParamStore<f64>, Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>);

fn weighted(g: &mut Graph<'_, f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    g.hadamard(out, w)
}

fn rand_param(p: &mut ParamStore<f64>, name: &str, shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) {
    p.insert(name, Tensor::randn(shape, scale, rng));
}

/// Builds the parameters and weighted output of `op` for one seed. Outputs
/// are multiplied by fixed random weights so that no gradient vanishes by
/// symmetry (a plain sum of softmax rows is constant).
fn case(op: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(op.len() as u64));
    let mut p = ParamStore::new();
    let f: Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>> = match op {
        "matmul" => {
            rand_param(&mut p, "a", &[3, 4], 1.0, &mut rng);
            rand_param(&mut p, "b", &[4, 2], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
            Box::new(move |g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                let y = g.matmul(a, b)?;
                weighted(g, y, &w)
            })
        }
        "hadamard" => {
            rand_param(&mut p, "a", &[3, 4], 1.0, &mut rng);
            rand_param(&mut p, "b", &[3, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
            Box::new(move |g| {
                let (a, b) = (g.param("a")?, g.param("b")?);
                let y = g.hadamard(a, b)?;
                weighted(g, y, &w)
            })
        }
        "sigmoid" => {
            rand_param(&mut p, "x", &[3, 4], 2.0, &mut rng);
            let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
            Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.sigmoid(x);
                weighted(g, y, &w)
            })
        }
        "softmax" => {
            rand_param(&mut p, "x", &[3, 5], 2.0, &mut rng);
            let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
            Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.softmax(x);
                weighted(g, y, &w)
            })
        }
        "l2_normalize" => {
            rand_param(&mut p, "x", &[3, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
            Box::new(move |g| {
                let x = g.param("x")?;
                let y = g.l2_normalize(x, 1e-12);
                weighted(g, y, &w)
            })
        }
        "netvlad" => {
            rand_param(&mut p, "seq", &[5, 3], 1.0, &mut rng);
            NetVladParams::<f64>::init(NetVladConfig::new(2, 1), 3, &mut rng).store("vlad", &mut p);
            let w = Tensor::randn(&[1, 6], 1.0, &mut rng);
            Box::new(move |g| {
                let seq = g.param("seq")?;
                let y = netvlad_graph(g, seq, "vlad")?;
                weighted(g, y, &w)
            })
        }
        "projection" => {
            rand_param(&mut p, "x", &[2, 4], 1.0, &mut rng);
            Linear::<f64>::init(4, 3, &mut rng).store("proj", &mut p);
            let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
            Box::new(move |g| {
                let x = g.param("x")?;
                let y = linear_graph(g, x, "proj")?;
                weighted(g, y, &w)
            })
        }
        "gating_mlps" => {
            let (b, d, h) = (3, 4, 5);
            for i in 0..3 {
                rand_param(&mut p, &format!("p{i}"), &[b, d], 1.0, &mut rng);
            }
            Mlp::<f64>::init(2 * d, h, d, &mut rng).store("cg.g", &mut p);
            Mlp::<f64>::init(d, h, d, &mut rng).store("cg.h", &mut p);
            // row 0 has everything, row 1 misses expert 1, row 2 only has expert 2
            let mask = [[1.0, 1.0, 1.0], [1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
            let w: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[b, d], 1.0, &mut rng)).collect();
            Box::new(move |g| {
                let proj: Vec<Var> = (0..3).map(|i| g.param(&format!("p{i}"))).collect::<Result<_>>()?;
                let cols: Vec<Var> = (0..3)
                    .map(|i| g.constant(Tensor::matrix(b, 1, mask.iter().map(|r| r[i]).collect()).expect("b×1")))
                    .collect();
                let gated = collaborative_gating_graph(g, &proj, &cols, "cg")?;
                let mut total = weighted(g, gated[0], &w[0])?;
                for i in 1..3 {
                    let t = weighted(g, gated[i], &w[i])?;
                    total = g.add(total, t)?;
                }
                Ok(total)
            })
        }
        "gem" => {
            rand_param(&mut p, "x", &[2, 4], 1.0, &mut rng);
            GemParams::<f64>::init(4, 3, &mut rng).store("gem", &mut p);
            let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
            Box::new(move |g| {
                let x = g.param("x")?;
                let y = gem_graph(g, x, "gem")?;
                weighted(g, y, &w)
            })
        }
        "mixture_head" => {
            rand_param(&mut p, "h", &[2, 6], 1.0, &mut rng);
            Linear::<f64>::init(6, 3, &mut rng).store("mix", &mut p);
            let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
            Box::new(move |g| {
                let h = g.param("h")?;
                let logits = linear_graph(g, h, "mix")?;
                let y = g.softmax(logits);
                weighted(g, y, &w)
            })
        }
        "similarity" => {
            let (bv, bt, d, n) = (3, 2, 4, 3);
            for i in 0..n {
                rand_param(&mut p, &format!("v{i}"), &[bv, d], 1.0, &mut rng);
                rand_param(&mut p, &format!("t{i}"), &[bt, d], 1.0, &mut rng);
            }
            rand_param(&mut p, "logits", &[bt, n], 1.0, &mut rng);
            let mask = Tensor::matrix(bv, n, vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).expect("3×3");
            let w = Tensor::randn(&[bv, bt], 1.0, &mut rng);
            Box::new(move |g| {
                let vb: Vec<Var> = (0..n).map(|i| g.param(&format!("v{i}"))).collect::<Result<_>>()?;
                let tb: Vec<Var> = (0..n).map(|i| g.param(&format!("t{i}"))).collect::<Result<_>>()?;
                let logits = g.param("logits")?;
                let weights = g.softmax(logits);
                let video = VideoBlocks {
                    blocks: vb,
                    mask: mask.clone(),
                };
                let text = TextBlocks {
                    blocks: tb,
                    weights: Some(weights),
                };
                let s = similarity_graph(g, &video, &text)?;
                weighted(g, s, &w)
            })
        }
        "ranking_loss" => {
            rand_param(&mut p, "s", &[4, 4], 0.3, &mut rng);
            Box::new(move |g| {
                let s = g.param("s")?;
                ranking_loss_graph(g, s, 0.2)
            })
        }
        "ce_end_to_end" => {
            let cfg = small_config(Variant::Ce);
            p = init_params(&cfg, seed)?;
            let (videos, captions) = random_batch(&cfg, 3, &mut rng);
            let prepared = videos
                .iter()
                .map(|v| prepare_video(v, &cfg))
                .collect::<Result<Vec<_>>>()?;
            Box::new(move |g| {
                let vrefs: Vec<_> = prepared.iter().collect();
                let crefs: Vec<_> = captions.iter().collect();
                let vb = encode_videos_graph(g, &cfg, &vrefs)?;
                let tb = encode_texts_graph(g, &cfg, &crefs)?;
                let s = similarity_graph(g, &vb, &tb)?;
                ranking_loss_graph(g, s, 0.2)
            })
        }
        other => {
            return Err(crate::error::Error::Config(format!(
                "unknown gradient-check op `{other}`; known: {}",
                SUITE_OPS.join(", ")
            )))
        }
    };
    Ok((p, f))
}

/// Runs every op in [`SUITE_OPS`] over `seeds` seeds. `corrupt` names an op
/// whose tape gradient is deliberately perturbed.
pub fn run_suite(seeds: usize, corrupt: Option<&str>) -> Result<SuiteReport> {
    if let Some(c) = corrupt {
        if !SUITE_OPS.contains(&c) {
            return Err(crate::error::Error::Config(format!(
                "unknown gradient-check op `{c}`; known: {}",
                SUITE_OPS.join(", ")
            )));
        }
    }
    let start = Instant::now();
    let mut ops = Vec::with_capacity(SUITE_OPS.len());
    for op in SUITE_OPS {
        let mut worst = 0.0f64;
        let mut worst_seed = 0;
        for seed in 0..seeds as u64 {
            let (params, f) = case(op, seed)?;
            let err = check_with(&params, |g| f(g), FD_STEP, corrupt == Some(op))?;
            if !(err <= worst) {
                worst = err;
                worst_seed = seed;
            }
        }
        ops.push(OpResult {
            op: op.to_string(),
            worst,
            worst_seed,
            seeds,
            passed: worst < FD_TOLERANCE,
        });
    }
    Ok(SuiteReport {
        step: FD_STEP,
        tolerance: FD_TOLERANCE,
        ops,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cubic_matches() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![0.7, -1.3, 2.1]));
        let err = check(
            &p,
            |g| {
                let x = g.param("x")?;
                let x2 = g.hadamard(x, x)?;
                g.hadamard(x2, x)
            },
            FD_STEP,
        )
        .unwrap();
        assert!(err < FD_TOLERANCE, "{err}");
    }

    #[test]
    fn every_op_passes_a_few_seeds() {
        let r = run_suite(3, None).unwrap();
        assert_eq!(r.ops.len(), SUITE_OPS.len());
        for o in &r.ops {
            assert!(o.passed, "{} failed: {:e} (seed {})", o.op, o.worst, o.worst_seed);
        }
    }

    #[test]
    fn corruption_is_detected_and_named() {
        let r = run_suite(1, Some("gem")).unwrap();
        let failed: Vec<_> = r.failures().map(|o| o.op.as_str()).collect();
        assert_eq!(failed, vec!["gem"]);
    }
}
