use rand::seq::SliceRandom;

use super::features::pool_into;
use crate::augment::{make_view_pair, AugPolicy};
use crate::backbone::{encode_eval, ArchConfig};
use crate::data::Dataset;
use crate::params::ParamStore;
use crate::ssl::NORM_EPS;
use crate::{seed, Error, Result};

/// Distances between the normalized pooled representations of two views
/// of the same image, at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceStats {
    pub stage: usize,
    pub samples: Vec<usize>,
    pub distances: Vec<f64>,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

/// Two views per sample of `n` images drawn without replacement with
/// `seed_value`; one [`DistanceStats`] per requested stage.
pub fn view_distance_stats(
    store: &ParamStore<f32>,
    arch: &ArchConfig,
    ds: &Dataset,
    stages: &[usize],
    n: usize,
    policy: &AugPolicy,
    seed_value: u64,
) -> Result<Vec<DistanceStats>> {
    for &s in stages {
        arch.check_stage(s)?;
    }
    if n == 0 || n > ds.len() {
        return Err(Error::InsufficientSamples { needed: n.max(1), got: ds.len() });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seed::rng(&[0x4449_5354, seed_value]));
    order.truncate(n);

    let mut dists: Vec<Vec<f64>> = vec![Vec::with_capacity(n); stages.len()];
    for chunk in order.chunks(64) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for &i in chunk {
            let (va, vb) = make_view_pair(&ds.image(i), policy, seed::view_seed(seed_value, 0, i as u64));
            a.extend_from_slice(va.data());
            b.extend_from_slice(vb.data());
        }
        let shape = [chunk.len(), arch.in_channels, policy.out_size, policy.out_size];
        let za = encode_eval(store, arch, lsn_tensor::Tensor::new(shape, a)?)?;
        let zb = encode_eval(store, arch, lsn_tensor::Tensor::new(shape, b)?)?;
        for (k, &s) in stages.iter().enumerate() {
            let (mut pa, mut pb) = (Vec::new(), Vec::new());
            pool_into(&za[s - 1], &mut pa);
            pool_into(&zb[s - 1], &mut pb);
            let c = arch.stage_channels[s - 1];
            for (ra, rb) in pa.chunks(c).zip(pb.chunks(c)) {
                let (na, nb) = (normalized(ra), normalized(rb));
                let d = na.iter().zip(&nb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                dists[k].push(d);
            }
        }
    }
    Ok(stages
        .iter()
        .zip(dists)
        .map(|(&stage, distances)| {
            let mut sorted = distances.clone();
            sorted.sort_by(f64::total_cmp);
            DistanceStats {
                stage,
                samples: order.clone(),
                min: sorted[0],
                q25: quantile(&sorted, 0.25),
                median: quantile(&sorted, 0.5),
                q75: quantile(&sorted, 0.75),
                max: sorted[sorted.len() - 1],
                distances,
            }
        })
        .collect())
}
