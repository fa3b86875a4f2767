use rand::seq::SliceRandom;

use super::Features;
use crate::optim::cosine_lr;
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Share of samples used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            lr: 1.0,
            batch_size: 256,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub stage: usize,
    pub accuracy: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    pub epochs: usize,
}

/// Softmax regression on frozen features.
///
/// Features are standardized with training-split statistics, weights start
/// at zero, and minibatch SGD runs under a cosine schedule without weight
/// decay. Returns held-out top-1 accuracy; `stage` is left 0 for the
/// caller to fill in.
pub fn linear_probe(features: &Features, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (n, d) = (features.rows, features.dim);
    if labels.len() != n {
        return Err(Error::DegenerateSplit(format!("{n} feature rows but {} labels", labels.len())));
    }
    if num_classes < 2 || labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::DegenerateSplit(format!("labels must lie in 0..{num_classes} with at least 2 classes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(&[0x5052_4F42, cfg.seed]));
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::DegenerateSplit(format!(
            "train fraction {} of {n} samples leaves an empty side",
            cfg.train_fraction
        )));
    }
    let (train, val) = order.split_at(n_train);
    let mut seen = vec![false; num_classes];
    train.iter().for_each(|&i| seen[labels[i]] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateSplit("training split holds a single class".into()));
    }

    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in train {
        for (m, &x) in mean.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for &i in train {
        for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(features.row(i)) {
            *v += (x - m) * (x - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / n_train as f64).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect();
    let standardized = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&inv_std)
            .map(|((&x, &m), &s)| (x - m) * s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = (0..n).map(standardized).collect();

    let k = num_classes;
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let batch = cfg.batch_size.clamp(1, n_train);
    let steps_per_epoch = n_train.div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch) as u64;
    let mut step = 0u64;
    let mut idx = train.to_vec();
    let mut logits = vec![0.0; k];
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut seed::rng(&[0x5052_4F42, cfg.seed, epoch as u64 + 1]));
        for chunk in idx.chunks(batch) {
            let lr = cosine_lr(step, total, cfg.lr);
            let mut gw = vec![0.0; d * k];
            let mut gb = vec![0.0; k];
            for &i in chunk {
                softmax_into(&xs[i], &w, &b, &mut logits);
                logits[labels[i]] -= 1.0;
                for (c, &g) in logits.iter().enumerate() {
                    gb[c] += g;
                }
                for (j, &x) in xs[i].iter().enumerate() {
                    let row = &mut gw[j * k..(j + 1) * k];
                    for (gv, &g) in row.iter_mut().zip(&logits) {
                        *gv += x * g;
                    }
                }
            }
            let scale = lr / chunk.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(wv, g)| *wv -= scale * g);
            b.iter_mut().zip(&gb).for_each(|(bv, g)| *bv -= scale * g);
            step += 1;
        }
    }

    let correct = val
        .iter()
        .filter(|&&i| {
            softmax_into(&xs[i], &w, &b, &mut logits);
            argmax(&logits) == labels[i]
        })
        .count();
    Ok(ProbeResult {
        stage: 0,
        accuracy: correct as f64 / val.len() as f64,
        train_size: train.len(),
        val_size: val.len(),
        seed: cfg.seed,
        epochs: cfg.epochs,
    })
}

fn softmax_into(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let k = b.len();
    out.copy_from_slice(b);
    for (j, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[j * k..(j + 1) * k]) {
            *o += xv * wv;
        }
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
