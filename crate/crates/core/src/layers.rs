//! Parameterized building blocks: affine maps, two-layer MLPs and the gated
//! embedding unit. Each has an eager forward on plain tensors and a taped
//! forward that reads the same named parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, NORM_EPS};

/// `y = x·W + b` with `W` stored `in×out` and `b` stored `1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform in `±1/√in` for both weight and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Tensor::uniform(&[1, output], bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn store(self, prefix: &str, params: &mut ParamStore<T>) {
        params.insert(format!("{prefix}.weight"), self.weight);
        params.insert(format!("{prefix}.bias"), self.bias);
    }

    pub fn load(prefix: &str, params: &ParamStore<T>) -> Result<Self> {
        Ok(Linear {
            weight: params.get(&format!("{prefix}.weight"))?.clone(),
            bias: params.get(&format!("{prefix}.bias"))?.clone(),
        })
    }

    /// Row-batched forward: `B×in → B×out`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul(&self.weight)?;
        let (r, c) = y.dims();
        for i in 0..r {
            for j in 0..c {
                let v = y.get(i, j) + self.bias.data()[j];
                y.set(i, j, v);
            }
        }
        Ok(y)
    }
}

pub fn linear_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// One hidden layer with ReLU: `fc2(relu(fc1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f64> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::init(input, hidden, rng),
            fc2: Linear::init(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, output),
        }
    }

    pub fn store(self, prefix: &str, params: &mut ParamStore<T>) {
        self.fc1.store(&format!("{prefix}.fc1"), params);
        self.fc2.store(&format!("{prefix}.fc2"), params);
    }

    pub fn load(prefix: &str, params: &ParamStore<T>) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::load(&format!("{prefix}.fc1"), params)?,
            fc2: Linear::load(&format!("{prefix}.fc2"), params)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }
}

pub fn mlp_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear_graph(g, x, &format!("{prefix}.fc1"))?;
    let h = g.relu(h);
    linear_graph(g, h, &format!("{prefix}.fc2"))
}

/// Gated embedding unit: `y₁ = fc(x)`, `y₂ = y₁ ∘ σ(gate(y₁))`,
/// output `y₂ / max(‖y₂‖, ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GemParams<T = f64> {
    pub fc: Linear<T>,
    pub gate: Linear<T>,
}

impl<T: Scalar> GemParams<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        GemParams {
            fc: Linear::init(input, output, rng),
            gate: Linear::init(output, output, rng),
        }
    }

    pub fn store(self, prefix: &str, params: &mut ParamStore<T>) {
        self.fc.store(&format!("{prefix}.fc"), params);
        self.gate.store(&format!("{prefix}.gate"), params);
    }

    pub fn load(prefix: &str, params: &ParamStore<T>) -> Result<Self> {
        Ok(GemParams {
            fc: Linear::load(&format!("{prefix}.fc"), params)?,
            gate: Linear::load(&format!("{prefix}.gate"), params)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.fc.input_dim() {
            return Err(Error::dim("gem", x.shape(), self.fc.weight.shape()));
        }
        let y1 = self.fc.forward(x)?;
        let gate = self.gate.forward(&y1)?.sigmoid();
        Ok(y1.hadamard(&gate)?.l2_normalize(T::lit(NORM_EPS)))
    }
}

/// Eager GEM on a single vector.
pub fn gem<T: Scalar>(x: &Tensor<T>, p: &GemParams<T>) -> Result<Tensor<T>> {
    let row = x.reshape(&[1, x.len()])?;
    Ok(Tensor::vector(p.forward(&row)?.into_data()))
}

pub fn gem_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let y1 = linear_graph(g, x, &format!("{prefix}.fc"))?;
    let gate = linear_graph(g, y1, &format!("{prefix}.gate"))?;
    let gate = g.sigmoid(gate);
    let y2 = g.hadamard(y1, gate)?;
    Ok(g.l2_normalize(y2, T::lit(NORM_EPS)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn gem_with_zero_gate_normalizes_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = GemParams::<f64>::init(4, 4, &mut rng);
        p.gate = Linear::zeros(4, 4);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let got = gem(&x, &p).unwrap();
        let want = Tensor::vector(p.fc.forward(&x.reshape(&[1, 4]).unwrap()).unwrap().into_data())
            .l2_normalize(NORM_EPS);
        close(&got, &want, 1e-12);
    }

    #[test]
    fn gem_open_gate_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GemParams {
            fc: Linear {
                weight: Tensor::identity(3),
                bias: Tensor::zeros(&[1, 3]),
            },
            gate: Linear {
                weight: Tensor::zeros(&[3, 3]),
                bias: Tensor::full(&[1, 3], 50.0),
            },
        };
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        close(&gem(&x, &p).unwrap(), &x.l2_normalize(NORM_EPS), 1e-12);
    }

    #[test]
    fn gem_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GemParams::<f64>::init(5, 3, &mut rng);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let mut y1 = [0.0; 3];
        for (j, y) in y1.iter_mut().enumerate() {
            *y = p.fc.bias.data()[j];
            for i in 0..5 {
                *y += x.data()[i] * p.fc.weight.get(i, j);
            }
        }
        let mut y2 = [0.0; 3];
        for j in 0..3 {
            let mut z = p.gate.bias.data()[j];
            for i in 0..3 {
                z += y1[i] * p.gate.weight.get(i, j);
            }
            y2[j] = y1[j] / (1.0 + (-z).exp());
        }
        let n = y2.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = Tensor::vector(y2.iter().map(|v| v / n).collect());
        let got = gem(&x, &p).unwrap();
        close(&got, &want, 1e-12);
        assert!((got.norm() - 1.0).abs() < 1e-12);

        let mut store = ParamStore::new();
        p.store("gem", &mut store);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.reshape(&[1, 5]).unwrap());
        let out = gem_graph(&mut g, xv, "gem").unwrap();
        close(&Tensor::vector(g.value(out).data().to_vec()), &want, 1e-12);
    }
}
