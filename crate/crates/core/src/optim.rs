//! Adam, RAdam and the Lookahead wrapper, with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Radam,
    #[default]
    RadamLookahead,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Lookahead sync period.
    pub lookahead_k: usize,
    /// Lookahead slow-weight interpolation factor.
    pub lookahead_alpha: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::RadamLookahead,
            learning_rate: 0.01,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

impl OptimizerSettings {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push("optim.learning_rate: must be finite and ≥ 0".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push("optim.weight_decay: must be finite and ≥ 0".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            v.push("optim.beta1: must lie in [0, 1)".to_string());
        }
        if !(0.0..1.0).contains(&self.beta2) || self.beta2 == 0.0 {
            v.push("optim.beta2: must lie in (0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            v.push("optim.eps: must be positive".to_string());
        }
        if self.lookahead_k == 0 {
            v.push("optim.lookahead_k: must be ≥ 1".to_string());
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            v.push("optim.lookahead_alpha: must lie in (0, 1]".to_string());
        }
        v
    }
}

/// Everything needed to continue optimization bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f64> {
    pub step: u64,
    pub exp_avg: ParamStore<T>,
    pub exp_avg_sq: ParamStore<T>,
    /// Lookahead slow weights, when enabled.
    pub slow: Option<ParamStore<T>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T = f64> {
    pub settings: OptimizerSettings,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(settings: OptimizerSettings, params: &ParamStore<T>) -> Result<Self> {
        let v = settings.violations();
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        let slow = (settings.kind == OptimizerKind::RadamLookahead).then(|| params.clone());
        Ok(Optimizer {
            settings,
            state: OptimizerState {
                step: 0,
                exp_avg: params.zeros_like(),
                exp_avg_sq: params.zeros_like(),
                slow,
            },
        })
    }

    pub fn from_state(settings: OptimizerSettings, state: OptimizerState<T>) -> Self {
        Optimizer { settings, state }
    }

    /// One update of `params` from `grads`, followed by a Lookahead sync
    /// every `k` steps when enabled.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let s = self.settings;
        self.state.step += 1;
        let t = self.state.step;
        let lr = T::lit(s.learning_rate);
        let wd = T::lit(s.weight_decay);
        let b1 = T::lit(s.beta1);
        let b2 = T::lit(s.beta2);
        let eps = T::lit(s.eps);
        let one = T::one();

        let bias1 = one - T::lit(s.beta1.powi(t as i32));
        let beta2_t = s.beta2.powi(t as i32);
        let bias2 = one - T::lit(beta2_t);

        // Rectification term, or None while the variance estimate is unreliable.
        let rect = match s.kind {
            OptimizerKind::Adam => Some(T::one()),
            _ => {
                let rho_inf = 2.0 / (1.0 - s.beta2) - 1.0;
                let rho_t = rho_inf - 2.0 * t as f64 * beta2_t / (1.0 - beta2_t);
                (rho_t >= 5.0).then(|| {
                    T::lit(
                        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                            .sqrt(),
                    )
                })
            }
        };

        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::dim("optimizer step", p.shape(), g.shape()));
            }
            let m = self
                .state
                .exp_avg
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no optimizer state for `{name}`")))?;
            let v = self
                .state
                .exp_avg_sq
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("no optimizer state for `{name}`")))?;
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k];
                md[k] = b1 * md[k] + (one - b1) * gk;
                vd[k] = b2 * vd[k] + (one - b2) * gk * gk;
                if s.weight_decay != 0.0 {
                    pd[k] -= lr * wd * pd[k];
                }
                let m_hat = md[k] / bias1;
                let update = match rect {
                    Some(r) => {
                        let v_hat = (vd[k] / bias2).sqrt();
                        r * m_hat / (v_hat + eps)
                    }
                    None => m_hat,
                };
                pd[k] -= lr * update;
            }
        }

        if let Some(slow) = &mut self.state.slow {
            if t.is_multiple_of(s.lookahead_k as u64) {
                let alpha = T::lit(s.lookahead_alpha);
                for (name, fast) in params.iter_mut() {
                    let sw = slow
                        .get_mut(name)
                        .ok_or_else(|| Error::Contract(format!("no slow weights for `{name}`")))?;
                    for (sk, fk) in sw.data_mut().iter_mut().zip(fast.data_mut()) {
                        *sk += alpha * (*fk - *sk);
                        *fk = *sk;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(x));
        p
    }

    fn quad_grad(p: &ParamStore) -> Gradients {
        let mut g = ParamStore::new();
        g.insert("theta", Tensor::scalar(2.0 * p.get("theta").unwrap().data()[0]));
        g
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Radam, OptimizerKind::RadamLookahead] {
            let settings = OptimizerSettings {
                kind,
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut p = scalar_store(0.7);
            let mut opt = Optimizer::new(settings, &p).unwrap();
            let zero = p.zeros_like();
            for _ in 0..20 {
                opt.step(&mut p, &zero).unwrap();
            }
            assert_eq!(p.get("theta").unwrap().data()[0], 0.7);
        }
    }

    #[test]
    fn zero_gradients_with_decay_shrink_geometrically() {
        let settings = OptimizerSettings {
            kind: OptimizerKind::Radam,
            weight_decay: 0.1,
            learning_rate: 0.5,
            ..Default::default()
        };
        let mut p = scalar_store(1.0);
        let mut opt = Optimizer::new(settings, &p).unwrap();
        let zero = p.zeros_like();
        for _ in 0..3 {
            opt.step(&mut p, &zero).unwrap();
        }
        assert!((p.get("theta").unwrap().data()[0] - 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_null() {
        let settings = OptimizerSettings {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut p = scalar_store(0.3);
        let mut opt = Optimizer::new(settings, &p).unwrap();
        for _ in 0..12 {
            let g = quad_grad(&p);
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().data()[0].to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn alpha_one_lookahead_equals_inner() {
        let la = OptimizerSettings {
            kind: OptimizerKind::RadamLookahead,
            lookahead_alpha: 1.0,
            lookahead_k: 3,
            ..Default::default()
        };
        let inner = OptimizerSettings {
            kind: OptimizerKind::Radam,
            ..la
        };
        let mut a = scalar_store(1.0);
        let mut b = scalar_store(1.0);
        let mut oa = Optimizer::new(la, &a).unwrap();
        let mut ob = Optimizer::new(inner, &b).unwrap();
        for _ in 0..30 {
            let ga = quad_grad(&a);
            oa.step(&mut a, &ga).unwrap();
            let gb = quad_grad(&b);
            ob.step(&mut b, &gb).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn radam_descends_quadratic_monotonically() {
        let settings = OptimizerSettings {
            kind: OptimizerKind::Radam,
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_store(1.0);
        let mut opt = Optimizer::new(settings, &p).unwrap();
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let g = quad_grad(&p);
            opt.step(&mut p, &g).unwrap();
            let now = p.get("theta").unwrap().data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn lookahead_slow_weights_descend_quadratic() {
        let settings = OptimizerSettings {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = scalar_store(1.0);
        let mut opt = Optimizer::new(settings, &p).unwrap();
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let g = quad_grad(&p);
            opt.step(&mut p, &g).unwrap();
            let slow = opt.state.slow.as_ref().unwrap().get("theta").unwrap().data()[0].abs();
            assert!(slow <= prev);
            prev = slow;
        }
        assert!(prev < 0.9);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = OptimizerSettings {
            lookahead_alpha: 0.0,
            lookahead_k: 0,
            ..Default::default()
        };
        assert_eq!(bad.violations().len(), 2);
        assert!(Optimizer::new(bad, &scalar_store(0.0)).is_err());
    }
}
