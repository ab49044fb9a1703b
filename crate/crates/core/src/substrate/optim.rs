use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    LarsLite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::Config {
            path: "optimizer".into(),
            reason: reason.into(),
        };
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(bad("learning rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(bad("weight decay must be >= 0"));
        }
        Ok(())
    }
}

const LARS_EPS: f64 = 1e-9;
const LARS_MAX_TRUST: f64 = 10.0;

/// Layer-wise trust ratio `‖w‖ / (‖g‖ + wd·‖w‖ + eps)` clamped to `[0, 10]`.
/// Falls back to 1 when either norm vanishes.
pub fn lars_trust_ratio(w: &[f64], g: &[f64], weight_decay: f64) -> f64 {
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if wn == 0.0 || gn == 0.0 {
        return 1.0;
    }
    (wn / (gn + weight_decay * wn + LARS_EPS)).clamp(0.0, LARS_MAX_TRUST)
}

/// Applies one update to every parameter of `store` and clears gradients.
pub fn optimizer_step(store: &mut ParameterStore, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    if let Some((name, _)) = store.params().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGradient(name.clone()));
    }
    let names: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
    for name in names {
        let (w, g) = {
            let t = store.param_mut(&name)?;
            let g = t.take_grad().expect("checked above");
            (t.data().to_vec(), g)
        };
        let local_lr = match config.kind {
            OptimizerKind::SgdMomentum => config.lr,
            OptimizerKind::LarsLite => config.lr * lars_trust_ratio(&w, &g, config.weight_decay),
        };
        let buf = store.momentum_entry(&name, w.len());
        for i in 0..w.len() {
            let d = g[i] + config.weight_decay * w[i];
            buf[i] = config.momentum * buf[i] + local_lr * d;
        }
        let step: Vec<f64> = buf.clone();
        let t = store.param_mut(&name)?;
        for (v, s) in t.data_mut().iter_mut().zip(step) {
            *v -= s;
        }
    }
    store.bump_step();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Tensor;

    fn store_with(w: &[f64], g: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        let mut t = Tensor::new(vec![w.len()], w.to_vec()).unwrap();
        t.set_grad(g.to_vec()).unwrap();
        s.insert("w", t);
        s
    }

    #[test]
    fn zero_gradient_is_fixpoint() {
        let mut s = store_with(&[1.0, -2.0], &[0.0, 0.0]);
        optimizer_step(&mut s, &OptimizerConfig::sgd(0.1, 0.9, 0.0)).unwrap();
        assert_eq!(s.param("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn sgd_one_step() {
        let mut s = store_with(&[1.0], &[0.5]);
        optimizer_step(&mut s, &OptimizerConfig::sgd(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(s.param("w").unwrap().data(), &[0.95]);
    }

    #[test]
    fn lars_scales_by_trust_ratio() {
        // ‖w‖ = 2, ‖g‖ = 1
        let mut s = store_with(&[2.0], &[1.0]);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::LarsLite,
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        optimizer_step(&mut s, &cfg).unwrap();
        let trust: f64 = 2.0 / (1.0 + 1e-9);
        assert!((trust - 2.0).abs() < 1e-8);
        assert_eq!(s.param("w").unwrap().data(), &[2.0 - 0.1 * trust * 1.0]);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2]));
        let err = optimizer_step(&mut s, &OptimizerConfig::sgd(0.1, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(n) if n == "w"));
    }
}
