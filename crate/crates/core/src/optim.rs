//! SGD with momentum, LARS, and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use lsn_tensor::{Real, Tensor};

use crate::params::{ParamKind, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Lars,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Lars => "lars",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "lars" => Ok(OptimizerKind::Lars),
            _ => Err(format!("expected sgd or lars, got `{s}`")),
        }
    }
}

pub const LARS_EPS: f64 = 1e-9;

/// Momentum buffers keyed by parameter name, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub momentum: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> OptState<T> {
    /// Zero buffers for every trainable tensor of `params`.
    pub fn new(params: &ParamStore<T>) -> Self {
        let momentum = params
            .iter()
            .filter(|(n, _)| ParamKind::of(n).trainable())
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        OptState { momentum, step: 0 }
    }
}

/// `base·(1 + cos(π·step/total))/2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (PI * t).cos()) / 2.0
}

fn check_shapes<T: Real>(name: &str, p: &Tensor<T>, g: Option<&Tensor<T>>, v: &Tensor<T>) -> Result<()> {
    let ok = g.is_none_or(|g| g.shape() == p.shape()) && v.shape() == p.shape();
    if ok {
        Ok(())
    } else {
        Err(Error::NameMismatch(format!("shape mismatch for `{name}`")))
    }
}

/// Shared update loop. `rate(kind, θ, g')` returns the local learning rate.
/// Trainable parameters without a gradient are updated as if their gradient
/// were zero.
fn momentum_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptState<T>,
    mu: f64,
    wd: f64,
    decay_norm_free: bool,
    mut rate: impl FnMut(ParamKind, &[T], &[T]) -> f64,
) -> Result<()> {
    if let Some(name) = grads.keys().find(|n| !state.momentum.contains(n)) {
        return Err(Error::NameMismatch(format!("gradient for unknown parameter `{name}`")));
    }
    let mu_t = T::from_f64_lossy(mu);
    for (name, p) in params.iter_mut() {
        let kind = ParamKind::of(name);
        if !kind.trainable() {
            continue;
        }
        let v = state
            .momentum
            .get_mut(name)
            .ok_or_else(|| Error::NameMismatch(format!("no momentum buffer for `{name}`")))?;
        let g = grads.get(name);
        check_shapes(name, p, g, v)?;
        let decay = if kind == ParamKind::Weight || decay_norm_free { wd } else { 0.0 };
        let wd_t = T::from_f64_lossy(decay);
        let theta = p.data_mut();
        let g_eff: Vec<T> = match g {
            Some(g) => g.data().iter().zip(theta.iter()).map(|(&gi, &ti)| gi + wd_t * ti).collect(),
            None => theta.iter().map(|&ti| wd_t * ti).collect(),
        };
        let lr = T::from_f64_lossy(rate(kind, theta, &g_eff));
        for ((ti, vi), gi) in theta.iter_mut().zip(v.data_mut()).zip(g_eff) {
            *vi = mu_t * *vi + gi;
            *ti -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// `g' = g + wd·θ; v ← μv + g'; θ ← θ − lr·v` on every trainable tensor.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptState<T>,
    lr: f64,
    mu: f64,
    wd: f64,
) -> Result<()> {
    momentum_update(params, grads, state, mu, wd, true, |_, _, _| lr)
}

fn norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Per-tensor trust ratio `‖θ‖ / (‖g'‖ + eps)`, or 1 when either norm is 0.
pub fn trust_ratio<T: Real>(theta: &[T], g_eff: &[T], eps: f64) -> f64 {
    let (pn, gn) = (norm(theta), norm(g_eff));
    if pn > 0.0 && gn > 0.0 {
        pn / (gn + eps)
    } else {
        1.0
    }
}

/// SGD momentum with the learning rate of each weight tensor scaled by its
/// trust ratio. Norm-free parameters use ratio 1 and no decay.
pub fn lars_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptState<T>,
    lr: f64,
    mu: f64,
    wd: f64,
    eps: f64,
) -> Result<()> {
    momentum_update(params, grads, state, mu, wd, false, |kind, theta, g| match kind {
        ParamKind::Weight => lr * trust_ratio(theta, g, eps),
        _ => lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new([1], vec![v]).unwrap());
        s
    }

    fn grad(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::new([1], vec![v]).unwrap())])
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.5), 0.5);
        assert_eq!(cosine_lr(10, 10, 0.5), 0.0);
        assert!((cosine_lr(5, 10, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sgd_one_step() {
        let mut p = scalar_store("x.weight", 1.0);
        let mut st = OptState::new(&p);
        sgd_momentum_step(&mut p, &grad("x.weight", 2.0), &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(st.momentum.get("x.weight").unwrap().data(), [2.0]);
        assert!((p.get("x.weight").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = scalar_store("x.weight", 1.5);
        let before = p.clone();
        let mut st = OptState::new(&p);
        sgd_momentum_step(&mut p, &grad("x.weight", 0.0), &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn lars_scalar_and_fallback() {
        let mut p = scalar_store("x.weight", 2.0);
        let mut st = OptState::new(&p);
        lars_step(&mut p, &grad("x.weight", 1.0), &mut st, 0.1, 0.0, 0.0, 0.0).unwrap();
        assert!((p.get("x.weight").unwrap().data()[0] - 1.8).abs() < 1e-15);
        assert_eq!(trust_ratio(&[0.0, 0.0], &[1.0, 2.0], LARS_EPS), 1.0);
        let r = trust_ratio(&[3.0, 4.0], &[1.0, 0.0], 0.0);
        let r10 = trust_ratio(&[30.0, 40.0], &[10.0, 0.0], 0.0);
        assert_eq!(r, r10);
    }

    #[test]
    fn norm_free_params_skip_decay_and_trust_ratio() {
        let mut p = scalar_store("x.bias", 2.0);
        let mut st = OptState::new(&p);
        lars_step(&mut p, &grad("x.bias", 1.0), &mut st, 0.1, 0.0, 0.5, LARS_EPS).unwrap();
        assert!((p.get("x.bias").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let mut p = scalar_store("x.weight", 1.0);
        let mut st = OptState::new(&p);
        let bad = BTreeMap::from([("x.weight".to_string(), Tensor::<f64>::zeros([2]))]);
        assert!(sgd_momentum_step(&mut p, &bad, &mut st, 0.1, 0.9, 0.0).is_err());
        assert!(sgd_momentum_step(&mut p, &grad("y.weight", 1.0), &mut st, 0.1, 0.9, 0.0).is_err());
    }
}
