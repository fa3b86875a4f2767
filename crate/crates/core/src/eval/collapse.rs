use lsn_tensor::{Graph, Tensor};

use crate::backbone::{encode, ArchConfig, BnMode, Net};
use crate::data::Dataset;
use crate::params::ParamStore;
use crate::ssl::{global_head, NORM_EPS};
use crate::{Error, Result};

use super::features::network_batch;
use super::Features;

pub const MIN_COLLAPSE_SAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub samples: usize,
    pub dims: usize,
    /// Mean over dimensions of the per-dimension standard deviation.
    pub mean_std: f64,
    /// `0.2 / √D`; about a fifth of the spread of uniformly scattered unit vectors.
    pub threshold: f64,
    pub collapsed: bool,
}

/// Spread of L2-normalized embeddings (`rows` of `features`).
pub fn collapse_metric(features: &Features) -> Result<CollapseReport> {
    let (n, d) = (features.rows, features.dim);
    if n < MIN_COLLAPSE_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_COLLAPSE_SAMPLES, got: n });
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = features.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    let mean_std = total / d as f64;
    let threshold = 0.2 / (d as f64).sqrt();
    Ok(CollapseReport {
        samples: n,
        dims: d,
        mean_std,
        threshold,
        collapsed: mean_std < threshold,
    })
}

/// Eval-mode top-level projections of the online network (unnormalized).
pub fn top_embeddings(store: &ParamStore<f32>, arch: &ArchConfig, ds: &Dataset) -> Result<Features> {
    let stage = arch.stages();
    let mut data = Vec::new();
    let mut dim = 0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(128) {
        let mut g = Graph::<f32>::new();
        let mut net = Net::for_arch(store, arch, BnMode::Eval, false);
        let x = g.constant(network_batch(ds, chunk, arch))?;
        let z = encode(&mut net, &mut g, arch, x)?;
        let head = global_head(&mut net, &mut g, stage, z.top(), false)?;
        let p: &Tensor<f32> = g.value(head.projection);
        dim = p.shape()[1];
        data.extend(p.data().iter().map(|&v| v as f64));
    }
    Ok(Features { rows: ds.len(), dim, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_collapse_and_spread_rows_do_not() {
        let same = Features { rows: 64, dim: 4, data: [1.0, 2.0, 3.0, 4.0].repeat(64) };
        let r = collapse_metric(&same).unwrap();
        assert!(r.collapsed && r.mean_std < 1e-12);

        let mut data = Vec::new();
        for i in 0..64 {
            let mut row = vec![0.0; 4];
            row[i % 4] = if i % 8 < 4 { 1.0 } else { -1.0 };
            data.extend(row);
        }
        let spread = Features { rows: 64, dim: 4, data };
        let r = collapse_metric(&spread).unwrap();
        assert!(!r.collapsed, "{r:?}");
        assert!(collapse_metric(&Features { rows: 63, dim: 1, data: vec![0.0; 63] }).is_err());
    }
}
