#![allow(dead_code)]

use std::collections::BTreeMap;

use lsn_core::augment::AugPolicy;
use lsn_core::backbone::{uniform_tensor, ArchConfig, BnMode, Net};
use lsn_core::params::{ParamKind, ParamStore};
use lsn_core::ssl::{LadderConfig, Preset};
use lsn_core::tensor::{Graph, Tensor, Var};
use lsn_core::train::{siamese_forward, target_mode, TrainConfig, TrainState};
use lsn_core::ssl::HeadConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tiny network, narrow heads, small batches: fast enough for many steps.
pub fn tiny_config(preset: Preset) -> TrainConfig {
    let arch = ArchConfig::tiny();
    let ladder = LadderConfig::preset(preset, arch.stages(), 0.5);
    TrainConfig {
        aug_a: AugPolicy { out_size: arch.input_size, ..AugPolicy::default() },
        aug_b: AugPolicy { out_size: arch.input_size, ..AugPolicy::default() },
        arch,
        heads: HeadConfig { hidden: 8, embed: 4 },
        ladder,
        epochs: 1,
        batch_size: 4,
        threads: 1,
        ..TrainConfig::default()
    }
}

/// Full-resolution compact network for short training runs.
pub fn compact_config(preset: Preset, epochs: usize, batch: usize) -> TrainConfig {
    let arch = ArchConfig::compact();
    let ladder = LadderConfig::preset(preset, arch.stages(), 0.5);
    TrainConfig {
        arch,
        heads: HeadConfig { hidden: 64, embed: 32 },
        ladder,
        epochs,
        batch_size: batch,
        threads: 1,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

pub fn random_views(arch: &ArchConfig, batch: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let shape = [batch, arch.in_channels, arch.input_size, arch.input_size];
    (uniform_tensor(&shape, 0.0, 1.0, seed), uniform_tensor(&shape, 0.0, 1.0, seed ^ 0xABCD))
}

/// Which scalar of the ladder graph to differentiate.
#[derive(Clone, Copy, Debug)]
pub enum Pick {
    Total,
    Level(usize),
}

/// Online/target stores in double precision with a target that differs
/// from the online copy.
pub fn fd_stores(cfg: &TrainConfig, seed: u64) -> (ParamStore<f64>, ParamStore<f64>) {
    let state = TrainState::init(&TrainConfig { seed, ..cfg.clone() }).unwrap();
    let online = state.online.cast::<f64>();
    let mut target = state.target.cast::<f64>();
    let mut r = rng(seed ^ 0x7A7A);
    for (name, t) in target.iter_mut() {
        if ParamKind::of(name).trainable() {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
        }
    }
    (online, target)
}

struct Eval {
    loss: f64,
    relu_pattern: Vec<bool>,
    matches: Vec<usize>,
}

fn build(
    online: &ParamStore<f64>,
    target: &ParamStore<f64>,
    cfg: &TrainConfig,
    xa: &Tensor<f64>,
    xb: &Tensor<f64>,
    pick: Pick,
    trainable: bool,
) -> (Graph<f64>, Var, BTreeMap<String, Tensor<f64>>) {
    let mut g = Graph::new();
    let mut on = Net::for_arch(online, &cfg.arch, BnMode::Train, trainable);
    let mut tg = Net::for_arch(target, &cfg.arch, target_mode(cfg), false);
    let a = g.constant(xa.clone()).unwrap();
    let b = g.constant(xb.clone()).unwrap();
    let (_, loss) = siamese_forward(&mut g, &mut on, &mut tg, &cfg.arch, &cfg.ladder, a, b).unwrap();
    let root = match pick {
        Pick::Total => loss.total,
        Pick::Level(i) => loss.levels[i - 1].unwrap(),
    };
    let grads = if trainable {
        g.backward(root).unwrap();
        on.gradients(&g)
    } else {
        BTreeMap::new()
    };
    (g, root, grads)
}

fn evaluate(online: &ParamStore<f64>, target: &ParamStore<f64>, cfg: &TrainConfig, xa: &Tensor<f64>, xb: &Tensor<f64>, pick: Pick) -> Eval {
    let (g, root, _) = build(online, target, cfg, xa, xb, pick, false);
    let mut relu_pattern = Vec::new();
    let mut matches = Vec::new();
    for v in g.vars() {
        if g.op_name(v) == "relu" {
            let input = g.inputs(v)[0];
            relu_pattern.extend(g.value(input).data().iter().map(|&x| x > 0.0));
        }
        if let Some(index) = g.gather_index(v) {
            matches.extend_from_slice(index);
        }
    }
    Eval { loss: g.value(root).item(), relu_pattern, matches }
}

/// Worst relative error between analytic and central-difference
/// gradients over `coords` randomly chosen online parameter entries.
///
/// Entries whose stencil flips a ReLU or a dense match are redrawn: the
/// loss is only piecewise smooth there and the difference quotient means
/// nothing.
pub fn ladder_fd_error(cfg: &TrainConfig, seed: u64, pick: Pick, coords: usize) -> f64 {
    const H: f64 = 1e-6;
    let (online, target) = fd_stores(cfg, seed);
    let (xa, xb) = random_views(&cfg.arch, cfg.batch_size, seed);
    let (xa, xb) = (xa.cast::<f64>(), xb.cast::<f64>());
    let (_, _, grads) = build(&online, &target, cfg, &xa, &xb, pick, true);
    let base = evaluate(&online, &target, cfg, &xa, &xb, pick);
    let names: Vec<&String> = grads.keys().collect();

    let mut r = rng(seed ^ 0xFD);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut attempts = 0;
    while analytic.len() < coords {
        attempts += 1;
        assert!(attempts < coords * 20, "too many kink crossings");
        let name = names[r.random_range(0..names.len())];
        let i = r.random_range(0..grads[name].numel());
        let shifted = |delta: f64| {
            let mut p = online.clone();
            p.get_mut(name).unwrap().data_mut()[i] += delta;
            evaluate(&p, &target, cfg, &xa, &xb, pick)
        };
        let (plus, minus) = (shifted(H), shifted(-H));
        let same = |e: &Eval| e.relu_pattern == base.relu_pattern && e.matches == base.matches;
        if !same(&plus) || !same(&minus) {
            continue;
        }
        analytic.push(grads[name].data()[i]);
        numeric.push((plus.loss - minus.loss) / (2.0 * H));
    }
    rel_error(&analytic, &numeric)
}

/// `‖a − n‖∞ / ‖n‖∞`, absolute when the numeric gradient is ~0.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

/// Naive dense matching: for each online location the target location of
/// largest cosine similarity, first one on ties.
pub fn naive_align(ya: &Tensor<f64>, yb: &Tensor<f64>) -> Vec<usize> {
    let s = ya.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let at = |t: &Tensor<f64>, bi: usize, ci: usize, p: usize| t.data()[(bi * c + ci) * hw + p];
    let norm = |t: &Tensor<f64>, bi: usize, p: usize| (0..c).map(|ci| at(t, bi, ci, p).powi(2)).sum::<f64>().sqrt().max(1e-12);
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = (0, f64::NEG_INFINITY);
            for q in 0..hw {
                let mut dot = 0.0;
                for ci in 0..c {
                    dot += (at(ya, bi, ci, p) / norm(ya, bi, p)) * (at(yb, bi, ci, q) / norm(yb, bi, q));
                }
                if dot > best.1 {
                    best = (q, dot);
                }
            }
            out.push(best.0);
        }
    }
    out
}

/// Central-difference check of a scalar graph function of `inputs`;
/// worst relative error over all inputs.
pub fn op_grad_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> lsn_core::tensor::Result<Var>,
{
    const H: f64 = 1e-6;
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap().to_vec();
        let numeric: Vec<f64> = (0..inputs[k].numel())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += H;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= H;
                (eval(&plus) - eval(&minus)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Contracts any output with fixed pseudo-random weights into a scalar.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> lsn_core::tensor::Result<Var> {
    let mut r = rng(seed ^ 0x5EED);
    let w = Tensor::from_fn(g.shape(y).to_vec(), |_| r.random_range(-1.0..1.0));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Entries bounded away from 0 so ReLU kinks stay outside the stencil.
pub fn off_zero_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) { m } else { -m }
    })
}
