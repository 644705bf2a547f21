//! Temporal aggregation of variable-length feature sequences.
//!
//! Slow experts are mean pooled. Dynamic experts and word sequences go
//! through NetVLAD: a softmax soft-assignment over `K + G` clusters, residual
//! sums against the `K` real centroids only (the `G` ghost clusters soak up
//! assignment mass and are then dropped), per-cluster normalization, and a
//! final l2 normalization of the flattened `K·d` vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, NORM_EPS};

/// Arithmetic mean over the rows of a `T×d` sequence.
pub fn mean_pool<T: Scalar>(seq: &Tensor<T>) -> Result<Tensor<T>> {
    if seq.rows() == 0 || seq.is_empty() {
        return Err(Error::EmptySequence(
            "mean_pool on a zero-length sequence".into(),
        ));
    }
    seq.mean_rows()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetVladConfig {
    pub clusters: usize,
    #[serde(default)]
    pub ghost_clusters: usize,
}

impl NetVladConfig {
    pub fn new(clusters: usize, ghost_clusters: usize) -> Self {
        NetVladConfig {
            clusters,
            ghost_clusters,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.clusters * input_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("NetVLAD needs at least one cluster".into()));
        }
        Ok(())
    }
}

/// Learnable NetVLAD state for input dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetVladParams<T = f64> {
    /// `K×d` real centroids.
    pub centroids: Tensor<T>,
    /// `d×(K+G)` soft-assignment weights.
    pub assign_weight: Tensor<T>,
    /// `1×(K+G)` soft-assignment biases.
    pub assign_bias: Tensor<T>,
}

impl<T: Scalar> NetVladParams<T> {
    /// Centroids ~ N(0, 1/d); assignment weights `2α·c_k`, biases `−α‖c_k‖²`
    /// with α = 1, for real and ghost clusters alike.
    pub fn init<R: Rng + ?Sized>(cfg: NetVladConfig, dim: usize, rng: &mut R) -> Self {
        let total = cfg.clusters + cfg.ghost_clusters;
        let all = Tensor::<T>::randn(&[total, dim], 1.0 / (dim as f64).sqrt(), rng);
        let alpha = T::one();
        let two = T::lit(2.0);
        let mut w = Tensor::zeros(&[dim, total]);
        let mut b = Tensor::zeros(&[1, total]);
        for k in 0..total {
            let c = all.row(k);
            let sq: T = c.iter().map(|&x| x * x).sum();
            b.set(0, k, -alpha * sq);
            for (j, &cj) in c.iter().enumerate() {
                w.set(j, k, two * alpha * cj);
            }
        }
        let centroids = Tensor::matrix(
            cfg.clusters,
            dim,
            all.data()[..cfg.clusters * dim].to_vec(),
        )
        .expect("centroid slice has K·d entries");
        NetVladParams {
            centroids,
            assign_weight: w,
            assign_bias: b,
        }
    }

    pub fn clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn total_clusters(&self) -> usize {
        self.assign_weight.cols()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn store(self, prefix: &str, params: &mut ParamStore<T>) {
        params.insert(format!("{prefix}.centroids"), self.centroids);
        params.insert(format!("{prefix}.assign.weight"), self.assign_weight);
        params.insert(format!("{prefix}.assign.bias"), self.assign_bias);
    }

    pub fn load(prefix: &str, params: &ParamStore<T>) -> Result<Self> {
        Ok(NetVladParams {
            centroids: params.get(&format!("{prefix}.centroids"))?.clone(),
            assign_weight: params.get(&format!("{prefix}.assign.weight"))?.clone(),
            assign_bias: params.get(&format!("{prefix}.assign.bias"))?.clone(),
        })
    }

    /// Intra-normalized residual blocks as a `K×d` matrix, before the
    /// final global normalization.
    pub fn residual_blocks(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let (t, d) = seq.dims();
        if t == 0 || seq.is_empty() {
            return Err(Error::EmptySequence("netvlad on a zero-length sequence".into()));
        }
        if d != self.dim() {
            return Err(Error::dim("netvlad", seq.shape(), self.centroids.shape()));
        }
        let k = self.clusters();
        let total = self.total_clusters();
        let mut logits = seq.matmul(&self.assign_weight)?;
        for i in 0..t {
            for j in 0..total {
                let v = logits.get(i, j) + self.assign_bias.data()[j];
                logits.set(i, j, v);
            }
        }
        let assign = logits.softmax();
        let mut v = Tensor::zeros(&[k, d]);
        for c in 0..k {
            for i in 0..t {
                let a = assign.get(i, c);
                for j in 0..d {
                    let r = v.get(c, j) + a * (seq.get(i, j) - self.centroids.get(c, j));
                    v.set(c, j, r);
                }
            }
        }
        Ok(v.l2_normalize(T::lit(NORM_EPS)))
    }

    /// Full NetVLAD descriptor of length `K·d`.
    pub fn aggregate(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        let blocks = self.residual_blocks(seq)?;
        Ok(Tensor::vector(blocks.into_data()).l2_normalize(T::lit(NORM_EPS)))
    }
}

/// Records NetVLAD on the tape for one `T×d` sequence, reading parameters
/// stored under `prefix`. Returns a `1×(K·d)` row.
pub fn netvlad_graph<T: Scalar>(g: &mut Graph<'_, T>, seq: Var, prefix: &str) -> Result<Var> {
    let (t, d) = g.value(seq).dims();
    if t == 0 || d == 0 {
        return Err(Error::EmptySequence("netvlad on a zero-length sequence".into()));
    }
    let centroids = g.param(&format!("{prefix}.centroids"))?;
    let w = g.param(&format!("{prefix}.assign.weight"))?;
    let b = g.param(&format!("{prefix}.assign.bias"))?;
    let k = g.value(centroids).rows();
    if g.value(centroids).cols() != d {
        return Err(Error::dim(
            "netvlad",
            g.value(seq).shape(),
            g.value(centroids).shape(),
        ));
    }

    let logits = g.matmul(seq, w)?;
    let logits = g.add_row(logits, b)?;
    let assign = g.softmax(logits);
    let real = g.slice_cols(assign, 0, k)?;
    let real_t = g.transpose(real);
    let weighted = g.matmul(real_t, seq)?;
    let mass = g.sum_rows(real);
    let mass = g.transpose(mass);
    let anchored = g.mul_col(centroids, mass)?;
    let residual = g.sub(weighted, anchored)?;
    let eps = T::lit(NORM_EPS);
    let intra = g.l2_normalize(residual, eps);
    let flat = g.reshape(intra, &[1, k * d])?;
    Ok(g.l2_normalize(flat, eps))
}
