//! Classical-momentum SGD.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.001,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// `v <- momentum * v + g; p <- p - lr * v` over trainable parameters, keyed by name.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    learning_rate: T,
    momentum: T,
    velocity: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            learning_rate: T::lit(cfg.learning_rate),
            momentum: T::lit(cfg.momentum),
            velocity: BTreeMap::new(),
        })
    }

    /// Apply one update to every trainable parameter of `model`, then clear its gradients.
    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            v.zip_mut_with(&p.grad, |v, &g| *v = mu * *v + g);
            p.value.zip_mut_with(v, |w, &v| *w -= lr * v);
            p.zero_grad();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use ndarray::IxDyn;

    struct Scalar1(Param<f64>);

    impl Parameterized<f64> for Scalar1 {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn momentum_update_on_quadratic() {
        // f(w) = 0.5 * a * w^2, gradient a * w
        let a = 3.0;
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            ..Default::default()
        };
        let mut opt = Sgd::<f64>::new(&cfg).unwrap();
        let mut m = Scalar1(Param::new(ArrayD::from_elem(IxDyn(&[1]), 2.0)));
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for _ in 0..5 {
            m.0.grad[[0]] = a * m.0.value[[0]];
            opt.step(&mut m);
            v = 0.9 * v + a * w;
            w -= 0.1 * v;
            assert_eq!(m.0.value[[0]], w);
            assert_eq!(m.0.grad[[0]], 0.0);
        }
    }

    #[test]
    fn buffers_are_untouched() {
        let mut opt = Sgd::<f64>::new(&OptimizerConfig::default()).unwrap();
        let mut m = Scalar1(Param::buffer(ArrayD::from_elem(IxDyn(&[1]), 2.0)));
        m.0.grad[[0]] = 1.0;
        opt.step(&mut m);
        assert_eq!(m.0.value[[0]], 2.0);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(matches!(Sgd::<f32>::new(&bad), Err(Error::Config(_))));
        let bad = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
