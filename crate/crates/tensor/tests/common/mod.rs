#![allow(dead_code)]

use lsn_tensor::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
pub fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Max-norm relative error `‖a − n‖∞ / ‖n‖∞` between analytic and numeric
/// gradients (absolute when the numeric gradient is ~0).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-9 { diff } else { diff / scale }
}

/// Central finite differences `(f(x+h) − f(x−h)) / 2h` of a scalar function
/// of several input tensors, compared against the graph's backward pass.
/// Returns the worst relative error over all inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        let numeric = numeric_grad(inputs, k, &build);
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Central-difference gradient of the scalar `build` w.r.t. input `k`.
pub fn numeric_grad<F>(inputs: &[Tensor<f64>], k: usize, build: F) -> Vec<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-5;
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item()
    };

    let mut numeric = vec![0.0; inputs[k].numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = inputs.to_vec();
        plus[k].data_mut()[i] += H;
        let mut minus = inputs.to_vec();
        minus[k].data_mut()[i] -= H;
        *slot = (eval(&plus) - eval(&minus)) / (2.0 * H);
    }
    numeric
}

/// Contracts a non-scalar output with a fixed random tensor so every output
/// element reaches the loss with a distinct weight.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = random(&mut r, g.shape(x));
    let w = g.constant(w)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}
