use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{NowcastError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a fixed parameter list.
///
/// Adam moments are allocated on the first step and must keep matching the
/// parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NowcastError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients held in `params`, then clears them.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(NowcastError::Usage(format!("parameter {} has no gradient", p.name)));
        }
        if self.kind == OptimizerKind::Adam {
            if self.first_moment.is_empty() {
                self.first_moment = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
                self.second_moment = self.first_moment.clone();
            }
            let consistent = self.first_moment.len() == params.len()
                && self.first_moment.iter().zip(params.iter()).all(|(m, p)| m.len() == p.value.len());
            if !consistent {
                return Err(NowcastError::Usage(
                    "parameter set changed shape between optimizer steps".into(),
                ));
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let g = p.grad.take().expect("checked above");
                    for (v, gv) in p.value.values_mut().iter_mut().zip(g.values()) {
                        *v -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bias1 = 1.0 - self.beta1.powi(t);
                let bias2 = 1.0 - self.beta2.powi(t);
                for ((p, m), s) in params
                    .iter_mut()
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    let g = p.grad.take().expect("checked above");
                    for (((v, gv), mv), sv) in p
                        .value
                        .values_mut()
                        .iter_mut()
                        .zip(g.values())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *sv = self.beta2 * *sv + (1.0 - self.beta2) * gv * gv;
                        let m_hat = *mv / bias1;
                        let s_hat = *sv / bias2;
                        *v -= lr * m_hat / (s_hat.sqrt() + self.epsilon);
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

    fn param_with_grad(value: f64, grad: f64) -> Param {
        let mut p = Param::new("p", Tensor::scalar(value));
        p.grad = Some(Tensor::scalar(grad));
        p
    }

    #[test]
    fn sgd_single_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut params = vec![param_with_grad(1.0, 2.0)];
        opt.step(&mut params).unwrap();
        assert!((params[0].value.values()[0] - 0.8).abs() < 1e-15);
        assert!(params[0].grad.is_none());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [1e-3, 1.0, 1e4] {
            let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01).unwrap();
            let mut params = vec![param_with_grad(0.0, g)];
            opt.step(&mut params).unwrap();
            let moved = params[0].value.values()[0].abs();
            assert!((moved - 0.01).abs() < 1e-4 * 0.01, "g={g} moved={moved}");
        }
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut params = vec![Param::new("w", Tensor::scalar(1.0))];
        assert!(matches!(opt.step(&mut params), Err(NowcastError::Usage(_))));
    }

    #[test]
    fn sgd_converges_on_convex_quadratic() {
        // f(x) = 0.5 (x - a)^T diag(h) (x - a); minimizer a.
        let target = [3.0, -2.0, 0.5];
        let curvature = [1.0, 2.0, 4.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.2).unwrap();
        let mut params = vec![Param::new("x", Tensor::zeros(&[3]))];
        for _ in 0..200 {
            let g: Vec<f64> = params[0]
                .value
                .values()
                .iter()
                .zip(target.iter().zip(&curvature))
                .map(|(x, (a, h))| h * (x - a))
                .collect();
            params[0].grad = Some(Tensor::from_vec(g));
            opt.step(&mut params).unwrap();
        }
        for (x, a) in params[0].value.values().iter().zip(&target) {
            assert!((x - a).abs() < 1e-6, "{x} vs {a}");
        }
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        assert!(Optimizer::new(OptimizerKind::Adam, 0.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, -1.0).is_err());
    }
}
