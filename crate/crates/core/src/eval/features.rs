use lsn_tensor::Tensor;

use crate::augment::{resize_crop, CropBox};
use crate::backbone::{encode_eval, ArchConfig};
use crate::data::Dataset;
use crate::params::ParamStore;
use crate::Result;

/// Row-major `[rows, dim]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Channel means of a `[B, C, H, W]` map, appended row by row.
pub(crate) fn pool_into(z: &Tensor<f32>, out: &mut Vec<f64>) {
    let s = z.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    for bi in 0..b {
        for ci in 0..c {
            let plane = &z.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            out.push(plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64);
        }
    }
}

const CHUNK: usize = 128;

/// Images `indices` at the network's input size; whole images are resized
/// when the dataset resolution differs.
pub(crate) fn network_batch(ds: &Dataset, indices: &[usize], arch: &ArchConfig) -> Tensor<f32> {
    let size = arch.input_size;
    if ds.side == size {
        return ds.batch(indices);
    }
    let full = CropBox { top: 0, left: 0, height: ds.side, width: ds.side };
    let mut data = Vec::with_capacity(indices.len() * ds.channels * size * size);
    for &i in indices {
        data.extend_from_slice(resize_crop(&ds.image(i), full, size).data());
    }
    Tensor::new([indices.len(), ds.channels, size, size], data).expect("sized above")
}

/// Globally pooled eval-mode outputs of every stage, one matrix per stage.
pub fn extract_all_features(store: &ParamStore<f32>, arch: &ArchConfig, ds: &Dataset) -> Result<Vec<Features>> {
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::new(); arch.stages()];
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let z = encode_eval(store, arch, network_batch(ds, chunk, arch))?;
        for (acc, zi) in per_stage.iter_mut().zip(&z) {
            pool_into(zi, acc);
        }
    }
    Ok(per_stage
        .into_iter()
        .zip(&arch.stage_channels)
        .map(|(data, &dim)| Features {
            rows: ds.len(),
            dim,
            data,
        })
        .collect())
}

/// Pooled features of one stage (1-based) of the online backbone.
pub fn extract_features(store: &ParamStore<f32>, arch: &ArchConfig, stage: usize, ds: &Dataset) -> Result<Features> {
    arch.check_stage(stage)?;
    Ok(extract_all_features(store, arch, ds)?.swap_remove(stage - 1))
}
