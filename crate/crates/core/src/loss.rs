//! Bidirectional max-margin ranking loss over a square similarity matrix
//! whose diagonal holds the matched pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: DEFAULT_MARGIN,
        }
    }
}

/// `(1/N) Σ_i Σ_{j≠i} [max(0, m + s_ij − s_ii) + max(0, m + s_ji − s_ii)]`.
pub fn ranking_loss<T: Scalar>(s: &Tensor<T>, margin: T) -> Result<T> {
    let (n, c) = s.dims();
    if n != c || s.shape().len() != 2 {
        return Err(Error::dim("ranking_loss", s.shape(), &[n, n]));
    }
    let zero = T::zero();
    let hinge = |x: T| if x > zero || x.is_nan() { x } else { zero };
    let mut total = zero;
    for i in 0..n {
        let d = s.get(i, i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let row = hinge((s.get(i, j) - d) + margin);
            let col = hinge((s.get(j, i) - d) + margin);
            total += row + col;
        }
    }
    Ok(total / T::lit(n as f64))
}

/// Taped form of [`ranking_loss`]. The hinge subgradient at the kink is 0.
pub fn ranking_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, s: Var, margin: T) -> Result<Var> {
    let (n, c) = g.value(s).dims();
    if n != c {
        return Err(Error::dim("ranking_loss", g.value(s).shape(), &[n, n]));
    }
    let diag = g.diag(s)?;
    let neg_diag = g.scale(diag, -T::one());
    let off = {
        let mut m = Tensor::full(&[n, n], T::one());
        for i in 0..n {
            m.set(i, i, T::zero());
        }
        g.constant(m)
    };

    // row i: m + s_ij − s_ii
    let rows = g.add_col(s, neg_diag)?;
    let rows = g.add_scalar(rows, margin);
    let rows = g.relu(rows);
    let rows = g.hadamard(rows, off)?;
    // row i: m + s_ji − s_ii
    let st = g.transpose(s);
    let cols = g.add_col(st, neg_diag)?;
    let cols = g.add_scalar(cols, margin);
    let cols = g.relu(cols);
    let cols = g.hadamard(cols, off)?;

    let both = g.add(rows, cols)?;
    let total = g.sum(both);
    Ok(g.scale(total, T::one() / T::lit(n as f64)))
}
