//! Reverse-mode differentiation over a per-step operation tape.
//!
//! A [`Graph`] is built fresh for every loss evaluation: leaves are either
//! constants or named parameters borrowed from a [`ParamStore`], and every
//! operation appends one node holding its forward value. Because nodes are
//! appended in evaluation order, the tape is already topologically sorted and
//! [`Graph::backward`] visits it once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `M×N` plus a `1×N` row broadcast down every row.
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// `M×N` plus an `M×1` column broadcast across every column.
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    L2Normalize(Var, T),
    SumAll(Var),
    SumRows(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Diag(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar = f64> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<String, Var>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node so
    /// gradient contributions accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.push(t, Op::Leaf);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).div(self.value(b))?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    fn broadcast(
        &self,
        a: Var,
        b: Var,
        along_rows: bool,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let x = self.value(a);
        let y = self.value(b);
        let (r, c) = x.dims();
        let ok = if along_rows {
            y.dims() == (1, c)
        } else {
            y.dims() == (r, 1)
        };
        if !ok {
            return Err(Error::dim(op, x.shape(), y.shape()));
        }
        let yd = y.data();
        let mut out = x.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                let k = i * c + j;
                out[k] = f(out[k], if along_rows { yd[j] } else { yd[i] });
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Adds a `1×N` row to every row of an `M×N` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast(a, row, true, "add_row", |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast(a, row, true, "mul_row", |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast(a, col, false, "add_col", |x, y| x + y)?;
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast(a, col, false, "mul_col", |x, y| x * y)?;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a))
    }

    /// Rectifier; also serves as the hinge `max(0, x)` with a zero
    /// subgradient at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax();
        self.push(out, Op::Softmax(a))
    }

    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Var {
        let out = self.value(a).l2_normalize(eps);
        self.push(out, Op::L2Normalize(a, eps))
    }

    /// Sum of all entries as a `1×1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Column sums, `M×N → 1×N`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_rows();
        self.push(out, Op::SumRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims();
        if start > end || end > c {
            return Err(Error::dim("slice_cols", x.shape(), &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        let t = Tensor::matrix(r, w, out)?;
        Ok(self.push(t, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, c, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Diagonal of a square matrix as an `N×1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims();
        if r != c {
            return Err(Error::dim("diag", x.shape(), &[c, r]));
        }
        let d = (0..r).map(|i| x.get(i, i)).collect();
        let t = Tensor::matrix(r, 1, d)?;
        Ok(self.push(t, Op::Diag(a)))
    }

    /// Reverse sweep from a scalar output. Returns a gradient for every
    /// parameter in the store; parameters the loss never touched get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut out = self.params.zeros_like();
        for (name, v) in &self.param_vars {
            if let Some(Some(g)) = grads.get(v.0) {
                if let Some(slot) = out.get_mut(name) {
                    *slot = g.clone();
                }
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(grads, *a, g.matmul(&bv.transpose())?)?;
                accumulate(grads, *b, av.transpose().matmul(g)?)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                accumulate(grads, *a, g.div(bv)?)?;
                // d(a/b)/db = -y / b
                accumulate(grads, *b, g.hadamard(y)?.div(bv)?.scale(-T::one()))?;
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *row, g.sum_rows())?;
            }
            Op::MulRow(a, row) => {
                let (r, c) = g.dims();
                let rv = self.value(*row).data();
                let av = self.value(*a).data();
                let mut da = g.data().to_vec();
                let mut dr = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        dr[j] += g.data()[k] * av[k];
                        da[k] = g.data()[k] * rv[j];
                    }
                }
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?)?;
                accumulate(grads, *row, Tensor::matrix(1, c, dr)?)?;
            }
            Op::AddCol(a, col) => {
                let (r, c) = g.dims();
                let dc = (0..r)
                    .map(|i| g.data()[i * c..(i + 1) * c].iter().copied().sum())
                    .collect();
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *col, Tensor::matrix(r, 1, dc)?)?;
            }
            Op::MulCol(a, col) => {
                let (r, c) = g.dims();
                let cv = self.value(*col).data();
                let av = self.value(*a).data();
                let mut da = g.data().to_vec();
                let mut dc = vec![T::zero(); r];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        dc[i] += g.data()[k] * av[k];
                        da[k] = g.data()[k] * cv[i];
                    }
                }
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?)?;
                accumulate(grads, *col, Tensor::matrix(r, 1, dc)?)?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::AddScalar(a, _) => accumulate(grads, *a, g.clone())?,
            Op::Sigmoid(a) => {
                let d = y.map(|s| s * (T::one() - s));
                accumulate(grads, *a, g.hadamard(&d)?)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mask = x.map(|v| if v > T::zero() { T::one() } else { T::zero() });
                accumulate(grads, *a, g.hadamard(&mask)?)?;
            }
            Op::Softmax(a) => {
                let (r, c) = y.dims();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::L2Normalize(a, eps) => {
                let x = self.value(*a);
                let (r, c) = x.dims();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let xr = x.row(i);
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n > *eps {
                        let inner: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            dx[i * c + j] = (gr[j] - yr[j] * inner) / n;
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gr[j] / *eps;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx)?)?;
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.shape(*a), s))?;
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).dims();
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend_from_slice(g.data());
                }
                accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?)?;
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.value(*a).dims();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), dx)?)?;
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let dp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?)?;
                }
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.reshape(self.shape(*a))?)?;
            }
            Op::Diag(a) => {
                let n = self.value(*a).rows();
                let mut dx = Tensor::zeros(self.shape(*a));
                for i in 0..n {
                    dx.set(i, i, g.data()[i]);
                }
                accumulate(grads, *a, dx)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        slot @ None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::dim("accumulate", acc.shape(), g.shape()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    Ok(())
}

/// Evaluates `loss_fn` on a fresh tape and returns the loss value together
/// with exact gradients for every parameter in `params`.
pub fn gradients<T, F>(params: &ParamStore<T>, loss_fn: F) -> Result<(T, Gradients<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = loss_fn(&mut g)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0], grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(3.0));
        let (val, grads) = gradients(&p, |g| {
            let x = g.param("x")?;
            let y = g.hadamard(x, x)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(val, 9.0);
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut p = ParamStore::new();
        p.insert(
            "w",
            Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 5.0, 0.0, -0.7]).unwrap(),
        );
        let (_, grads) = gradients(&p, |g| {
            let w = g.param("w")?;
            let s = g.softmax(w);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(grads.get("w").unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(2.0));
        p.insert("unused", Tensor::vector(vec![1.0, 2.0]));
        let (_, grads) = gradients(&p, |g| {
            let a = g.param("a")?;
            Ok(g.sum(a))
        })
        .unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]));
        let err = gradients(&p, |g| g.param("a")).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::scalar(1.5));
        let (_, grads) = gradients(&p, |g| {
            let a = g.param("a")?;
            let a2 = g.param("a")?;
            let s = g.add(a, a2)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[2.0]);
    }
}
