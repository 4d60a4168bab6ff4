//! SGD and Adam over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Matrix;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptSpec {
    Sgd { lr: f64 },
    Adam { alpha: f64, beta1: f64, beta2: f64 },
}

impl OptSpec {
    pub fn adam(alpha: f64, beta1: f64, beta2: f64) -> Self {
        OptSpec::Adam {
            alpha,
            beta1,
            beta2,
        }
    }
}

impl std::str::FromStr for OptSpec {
    type Err = Error;

    /// `sgd:LR` or `adam:ALPHA,BETA1,BETA2`
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("optimizer spec `{s}` missing `:`")))?;
        match kind {
            "sgd" => Ok(OptSpec::Sgd {
                lr: rest
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad sgd learning rate `{rest}`")))?,
            }),
            "adam" => {
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::Parse(format!(
                        "adam spec `{rest}` needs alpha,beta1,beta2"
                    )));
                }
                let nums: Vec<f64> = parts
                    .iter()
                    .map(|p| {
                        p.trim()
                            .parse()
                            .map_err(|_| Error::Parse(format!("bad adam parameter `{p}`")))
                    })
                    .collect::<Result<_>>()?;
                Ok(OptSpec::adam(nums[0], nums[1], nums[2]))
            }
            other => Err(Error::Parse(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub spec: OptSpec,
    pub step: u64,
}

/// Optimizer state over a fixed list of tensors. Moment accumulators match
/// the parameter shapes; the step counter drives bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: OptSpec,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Optimizer {
    pub fn new(spec: OptSpec) -> Self {
        Optimizer {
            spec,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Rejects the whole step if any gradient entry is
    /// non-finite, leaving parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        for (p, g) in params.iter().zip(grads) {
            assert_eq!(p.dim(), g.dim(), "params/grads shape mismatch");
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        match self.spec {
            OptSpec::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    **p -= &g.mapv(|t| lr * t);
                }
            }
            OptSpec::Adam {
                alpha,
                beta1,
                beta2,
            } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Matrix::zeros(g.dim())).collect();
                    self.v = grads.iter().map(|g| Matrix::zeros(g.dim())).collect();
                }
                self.step += 1;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    m.zip_mut_with(g, |mi, &gi| *mi = beta1 * *mi + (1.0 - beta1) * gi);
                    v.zip_mut_with(g, |vi, &gi| *vi = beta2 * *vi + (1.0 - beta2) * gi * gi);
                    ndarray::Zip::from(&mut **p)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|pi, &mi, &vi| {
                            let m_hat = mi / bc1;
                            let v_hat = vi / bc2;
                            *pi -= alpha * m_hat / (v_hat.sqrt() + ADAM_EPS);
                        });
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> OptimizerCheckpoint {
        OptimizerCheckpoint {
            spec: self.spec,
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(v: f64) -> Matrix {
        Matrix::from_elem((1, 1), v)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = Optimizer::new(OptSpec::adam(0.01, 0.9, 0.999));
        let mut p = single(1.5);
        for _ in 0..3 {
            let g = single(0.0);
            opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        }
        assert_eq!(p[(0, 0)], 1.5);
    }

    #[test]
    fn first_adam_step_matches_hand_computation() {
        // alpha=0.01, beta1=0, beta2=0.9, g=1: m_hat=1, v_hat=1, delta ~ -0.01.
        let mut opt = Optimizer::new(OptSpec::adam(0.01, 0.0, 0.9));
        let mut p = single(0.0);
        let g = single(1.0);
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        assert_relative_eq!(p[(0, 0)], -0.01, max_relative = 1e-7);
    }

    #[test]
    fn constant_gradient_step_size_approaches_alpha() {
        let mut opt = Optimizer::new(OptSpec::adam(0.01, 0.5, 0.9));
        let mut p = single(0.0);
        let g = single(2.0);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..300 {
            opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
            last_step = (p[(0, 0)] - prev).abs();
            prev = p[(0, 0)];
        }
        assert_relative_eq!(last_step, 0.01, max_relative = 1e-2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_touching_state() {
        let mut opt = Optimizer::new(OptSpec::adam(0.01, 0.9, 0.999));
        let mut p = single(1.0);
        let good = single(0.5);
        opt.step(&mut [&mut p], std::slice::from_ref(&good)).unwrap();
        let before = p[(0, 0)];
        let steps_before = opt.step_count();
        let bad = single(f64::NAN);
        let err = opt.step(&mut [&mut p], std::slice::from_ref(&bad));
        assert!(err.is_err());
        assert_eq!(p[(0, 0)], before);
        assert_eq!(opt.step_count(), steps_before);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut opt = Optimizer::new(OptSpec::Sgd { lr: 0.1 });
        let mut p = single(1.0);
        let g = single(2.0);
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        assert_eq!(p[(0, 0)], 1.0 - 0.2);
    }

    #[test]
    fn optimizer_spec_parsing() {
        assert_eq!(
            "sgd:0.05".parse::<OptSpec>().unwrap(),
            OptSpec::Sgd { lr: 0.05 }
        );
        assert_eq!(
            "adam:0.01,0,0.9".parse::<OptSpec>().unwrap(),
            OptSpec::adam(0.01, 0.0, 0.9)
        );
        assert!("adam:1,2".parse::<OptSpec>().is_err());
        assert!("rmsprop:0.1".parse::<OptSpec>().is_err());
    }
}
