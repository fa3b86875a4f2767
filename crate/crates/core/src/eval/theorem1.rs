use lsn_tensor::Graph;

use crate::backbone::{collapse_stage, encode, init_params, uniform_tensor, ArchConfig, BnMode, Net};
use crate::{seed, Result};

/// Input dependence of every stage output after collapsing one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    pub collapsed_stage: usize,
    /// Largest deviation of any sample from sample 0, per stage.
    pub spread: Vec<f64>,
    /// Whether each stage output is the same for every input.
    pub constant: Vec<bool>,
    /// Whether the collapsed stage output is also the same at every location.
    pub spatially_constant: bool,
    /// Every stage from the collapsed one up is constant, and the stage
    /// below (if any) still depends on the input.
    pub holds: bool,
}

const CONSTANT_TOL: f64 = 1e-6;

/// Collapses `stage` of a freshly initialized network and runs random
/// inputs through it with batch-statistics normalization.
pub fn theorem1_probe(arch: &ArchConfig, seed_value: u64, stage: usize, batch: usize) -> Result<Theorem1Report> {
    arch.check_stage(stage)?;
    let mut params = init_params(arch, seed_value)?;
    collapse_stage(&mut params, arch, stage)?;
    let shape = [batch.max(2), arch.in_channels, arch.input_size, arch.input_size];
    let x = uniform_tensor(&shape, 0.0, 1.0, seed::derive(&[seed_value, 0x5448_4D31]));

    let mut g = Graph::<f32>::new();
    let mut net = Net::for_arch(&params, arch, BnMode::Train, false);
    let xv = g.constant(x)?;
    let out = encode(&mut net, &mut g, arch, xv)?;

    let mut spread = Vec::with_capacity(arch.stages());
    let mut constant = Vec::with_capacity(arch.stages());
    for &z in &out.z {
        let t = g.value(z);
        let per = t.numel() / t.shape()[0];
        let first = &t.data()[..per];
        let scale = first.iter().fold(1.0f64, |m, &v| m.max((v as f64).abs()));
        let dev = t
            .data()
            .chunks(per)
            .flat_map(|row| row.iter().zip(first).map(|(&a, &b)| (a as f64 - b as f64).abs()))
            .fold(0.0, f64::max);
        spread.push(dev);
        constant.push(dev <= CONSTANT_TOL * scale);
    }

    let z = g.value(out.stage(stage));
    let hw = z.shape()[2] * z.shape()[3];
    let spatially_constant = z.data().chunks(hw).all(|plane| {
        let scale = plane.iter().fold(1.0f32, |m, &v| m.max(v.abs())) as f64;
        plane.iter().all(|&v| ((v - plane[0]) as f64).abs() <= CONSTANT_TOL * scale)
    });
    let holds = constant[stage - 1..].iter().all(|&c| c) && (stage == 1 || !constant[stage - 2]);
    Ok(Theorem1Report {
        collapsed_stage: stage,
        spread,
        constant,
        spatially_constant,
        holds,
    })
}
