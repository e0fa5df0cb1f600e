//! First-order parameter updates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `theta -= lr * grad`.
    Sgd,
    /// Adaptive moment estimation with bias correction.
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other} (expected sgd or adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Updates applied so far.
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    /// Fresh state for parameter tensors of the given lengths.
    pub fn new(kind: OptimizerKind, learning_rate: f64, lengths: &[usize]) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            match kind {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::Adam => lengths.iter().map(|&l| vec![T::zero(); l]).collect(),
            }
        };
        Self {
            kind,
            learning_rate: T::lit(learning_rate),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn apply(&mut self, params: Vec<&mut Vec<T>>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::arg("parameter and gradient lists differ in length"));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = &mut self.first_moment[k];
                    let v = &mut self.second_moment[k];
                    for i in 0..p.len() {
                        let d = g[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * d;
                        v[i] = b2 * v[i] + (T::one() - b2) * d * d;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + self.eps);
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

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.5, &[2]);
        let mut p = vec![1.0, 2.0];
        opt.apply(vec![&mut p], &[vec![2.0, -2.0]]).unwrap();
        assert_eq!(p, vec![0.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 0.01, &[2]);
        let mut p = vec![1.0, 1.0];
        opt.apply(vec![&mut p], &[vec![3.0, -0.001]]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-4);
    }

    #[test]
    fn zero_rate_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::<f32>::new(kind, 0.0, &[1]);
            let mut p = vec![0.25f32];
            opt.apply(vec![&mut p], &[vec![7.0]]).unwrap();
            assert_eq!(p[0].to_bits(), 0.25f32.to_bits());
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
