use std::path::Path;

use lsn_tensor::{Graph, Tensor};

use crate::backbone::{BnMode, Net};
use crate::params::ParamStore;
use crate::train::{siamese_forward, target_mode, TrainConfig};
use crate::{Error, Result};

/// Which part of the ladder loss to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSelection {
    Total,
    /// Level `i` (1-based), unweighted.
    Level(usize),
    /// Level `i` scaled by its weight in the total (weight 1 at the top).
    WeightedLevel(usize),
}

/// Signed gradient of the selected loss w.r.t. the online view-a output of
/// `probe_stage`, in double precision, shape `[B, C, H, W]`.
///
/// The loss is built exactly as in a training step: online BN on batch
/// statistics, target BN per the config.
pub fn level_gradient(
    online: &ParamStore<f32>,
    target: &ParamStore<f32>,
    cfg: &TrainConfig,
    xa: &Tensor<f32>,
    xb: &Tensor<f32>,
    selection: LossSelection,
    probe_stage: usize,
) -> Result<Tensor<f64>> {
    let arch = &cfg.arch;
    arch.check_stage(probe_stage)?;
    let stages = arch.stages();
    if let LossSelection::Level(i) | LossSelection::WeightedLevel(i) = selection {
        arch.check_stage(i)?;
    }
    let online = online.cast::<f64>();
    let target = target.cast::<f64>();
    let mut g = Graph::<f64>::new();
    // Trainable online leaves make the stage outputs carry gradients.
    let mut on = Net::for_arch(&online, arch, BnMode::Train, true);
    let mut tg = Net::for_arch(&target, arch, target_mode(cfg), false);
    let xa = g.constant(xa.cast())?;
    let xb = g.constant(xb.cast())?;
    let (outputs, loss) = siamese_forward(&mut g, &mut on, &mut tg, arch, &cfg.ladder, xa, xb)?;
    let root = match selection {
        LossSelection::Total => loss.total,
        LossSelection::Level(i) => loss.levels[i - 1].ok_or(Error::MissingHead(i))?,
        LossSelection::WeightedLevel(i) => {
            let l = loss.levels[i - 1].ok_or(Error::MissingHead(i))?;
            if i == stages {
                l
            } else {
                g.scale(l, cfg.ladder.weights[i - 1])?
            }
        }
    };
    let z = outputs.online_a.stage(probe_stage);
    g.backward(root)?;
    Ok(g
        .grad_tensor(z)
        .unwrap_or_else(|| Tensor::zeros(g.shape(z).to_vec())))
}

/// Per-sample attribution maps `[H × W]`: channel-summed absolute gradient.
pub fn attribution_map(grad: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = grad.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    (0..b)
        .map(|bi| {
            let mut m = vec![0.0; hw];
            for ci in 0..c {
                let plane = &grad.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                m.iter_mut().zip(plane).for_each(|(acc, v)| *acc += v.abs());
            }
            m
        })
        .collect()
}

/// Linear rescale to `[0, 255]`; a flat map becomes all zeros.
pub fn to_gray(map: &[f64]) -> Vec<u8> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    map.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary greyscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Config(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug)]
pub struct Attribution {
    pub level: usize,
    pub probe_stage: usize,
    pub side: usize,
    /// One `side × side` map per sample, row-major.
    pub maps: Vec<Vec<f64>>,
}

/// Attribution of level `level`'s loss onto stage `probe_stage`, which
/// must lie strictly below it.
pub fn gradient_attribution(
    online: &ParamStore<f32>,
    target: &ParamStore<f32>,
    cfg: &TrainConfig,
    xa: &Tensor<f32>,
    xb: &Tensor<f32>,
    level: usize,
    probe_stage: usize,
) -> Result<Attribution> {
    cfg.arch.check_stage(level)?;
    if probe_stage >= level {
        return Err(Error::Config(format!(
            "probe stage {probe_stage} must lie below loss level {level}"
        )));
    }
    let grad = level_gradient(online, target, cfg, xa, xb, LossSelection::Level(level), probe_stage)?;
    Ok(Attribution {
        level,
        probe_stage,
        side: grad.shape()[2],
        maps: attribution_map(&grad),
    })
}
