use lsn_tensor::kernels::gemm;
use lsn_tensor::{Graph, Real, Tensor, TensorError, Var};

use super::heads::{dense_head, global_head};
use super::{HeadKind, LadderConfig};
use crate::backbone::{Net, StageOutputs};
use crate::{Error, Result};

/// Guard for normalizing zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Mean over rows (and locations) of `‖n(a) − n(b)‖²`, where `n` divides
/// each channel vector (axis 1) by its norm. Lies in `[0, 4]`.
pub fn normalized_mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() < 2 {
        return Err(TensorError::Shape {
            op: "normalized_mse",
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        }
        .into());
    }
    let shape = g.shape(a);
    let vectors = shape[0] * shape[2..].iter().product::<usize>();
    let eps = T::from_f64_lossy(NORM_EPS);
    let na = g.l2_normalize(a, 1, eps)?;
    let nb = g.l2_normalize(b, 1, eps)?;
    let d = g.sub(na, nb)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, T::from_f64_lossy(1.0 / vectors as f64))?)
}

/// BYOL regression loss between `pred[B,D]` and `target[B,D]`; the caller
/// stops the gradient into `target`.
pub fn byol_pair_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred).len() != 2 {
        return Err(TensorError::Shape {
            op: "byol_pair_loss",
            detail: format!("expected [B, D], got {:?}", g.shape(pred)),
        }
        .into());
    }
    normalized_mse(g, pred, target)
}

/// `(dense + global) / 2`.
pub fn mix_dense_global<T: Real>(g: &mut Graph<T>, dense: Var, global: Var) -> Result<Var> {
    let s = g.add(dense, global)?;
    Ok(g.scale(s, T::from_f64_lossy(0.5))?)
}

/// Unit channel vectors of `x[B,C,...]` laid out `[B][loc][C]` in f64.
fn unit_rows<T: Real>(x: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let locs: usize = s[2..].iter().product();
    let d = x.data();
    let mut out = vec![0.0; b * locs * c];
    for bi in 0..b {
        for p in 0..locs {
            let row = &mut out[(bi * locs + p) * c..(bi * locs + p + 1) * c];
            for (ci, r) in row.iter_mut().enumerate() {
                *r = d[(bi * c + ci) * locs + p].as_f64();
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    (locs, c, out)
}

/// For every location of `ya[B,C,...]`, the row-major index of the location
/// of `yb[B,C,...]` (same sample) with the highest cosine similarity.
///
/// Cosine is the sequential f64 dot product of the two vectors after each
/// is divided by `max(‖v‖, NORM_EPS)`. Ties go to the smallest index.
pub fn dense_align_indices<T: Real>(ya: &Tensor<T>, yb: &Tensor<T>) -> Result<Vec<usize>> {
    let (sa, sb) = (ya.shape(), yb.shape());
    if sa.len() < 2 || sb.len() < 2 || sa[0] != sb[0] || sa[1] != sb[1] {
        return Err(TensorError::Shape {
            op: "dense_align",
            detail: format!("{sa:?} vs {sb:?}: batch and channel extents must match"),
        }
        .into());
    }
    let batch = sa[0];
    let (p, c, a) = unit_rows(ya);
    let (q, _, b) = unit_rows(yb);
    let mut bt = vec![0.0; c * q];
    let mut sim = vec![0.0; p * q];
    let mut index = Vec::with_capacity(batch * p);
    for bi in 0..batch {
        let brows = &b[bi * q * c..(bi + 1) * q * c];
        for (j, row) in brows.chunks_exact(c).enumerate() {
            for (ci, &v) in row.iter().enumerate() {
                bt[ci * q + j] = v;
            }
        }
        sim.fill(0.0);
        gemm(p, c, q, &a[bi * p * c..(bi + 1) * p * c], &bt, &mut sim);
        for row in sim.chunks_exact(q) {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            index.push(best);
        }
    }
    Ok(index)
}

/// `yb` resampled onto the locations of `ya`: each output vector is the
/// best-matching location vector of `yb`.
pub fn dense_align<T: Real>(ya: &Tensor<T>, yb: &Tensor<T>) -> Result<Tensor<T>> {
    let index = dense_align_indices(ya, yb)?;
    let mut g = Graph::new();
    let b = g.constant(yb.clone())?;
    let out = g.gather_locations(b, &index, &ya.shape()[2..])?;
    Ok(g.value(out).clone())
}

/// Stage outputs feeding one level's loss. `swapped` holds the
/// `(online view b, target view a)` pair when the loss is symmetrized.
#[derive(Clone, Copy, Debug)]
pub struct LevelViews {
    pub online_a: Var,
    pub target_b: Var,
    pub swapped: Option<(Var, Var)>,
}

fn require_head<T: Real>(net: &Net<T>, stage: usize, group: &str) -> Result<()> {
    if net.store().contains(&format!("head.stage{stage}.{group}.fc1.weight")) {
        Ok(())
    } else {
        Err(Error::MissingHead(stage))
    }
}

fn symmetrized<T: Real>(
    g: &mut Graph<T>,
    views: LevelViews,
    mut direction: impl FnMut(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<Var> {
    let ab = direction(g, views.online_a, views.target_b)?;
    match views.swapped {
        None => Ok(ab),
        Some((online_b, target_a)) => {
            let ba = direction(g, online_b, target_a)?;
            let s = g.add(ab, ba)?;
            Ok(g.scale(s, T::from_f64_lossy(0.5))?)
        }
    }
}

/// Global BYOL loss at one stage: pooled online features through projector
/// and predictor regress the stopped target projection.
pub fn global_level_loss<T: Real>(
    g: &mut Graph<T>,
    online: &mut Net<T>,
    target: &mut Net<T>,
    stage: usize,
    views: LevelViews,
) -> Result<Var> {
    require_head(online, stage, "pred")?;
    require_head(target, stage, "proj")?;
    symmetrized(g, views, |g, za, zb| {
        let on = global_head(online, g, stage, za, true)?;
        let tg = global_head(target, g, stage, zb, false)?;
        let t = g.stop_gradient(tg.projection)?;
        byol_pair_loss(g, on.prediction.expect("online head predicts"), t)
    })
}

/// Dense BYOL loss at one stage: per location, the online prediction
/// regresses the target projection vector best matching the online
/// projection at that location.
pub fn dense_level_loss<T: Real>(
    g: &mut Graph<T>,
    online: &mut Net<T>,
    target: &mut Net<T>,
    stage: usize,
    views: LevelViews,
) -> Result<Var> {
    require_head(online, stage, "dpred")?;
    require_head(target, stage, "dproj")?;
    symmetrized(g, views, |g, za, zb| {
        let on = dense_head(online, g, stage, za, true)?;
        let tg = dense_head(target, g, stage, zb, false)?;
        let t = g.stop_gradient(tg.projection)?;
        let index = dense_align_indices(g.value(on.projection), g.value(t))?;
        let spatial = g.shape(on.projection)[2..].to_vec();
        let aligned = g.gather_locations(t, &index, &spatial)?;
        normalized_mse(g, on.prediction.expect("online head predicts"), aligned)
    })
}

/// Encoder outputs of both branches for both views.
#[derive(Clone, Debug)]
pub struct SiameseOutputs {
    pub online_a: StageOutputs,
    pub target_b: StageOutputs,
    /// `(online view b, target view a)`, present when symmetrized.
    pub swapped: Option<(StageOutputs, StageOutputs)>,
}

impl SiameseOutputs {
    pub fn level(&self, stage: usize) -> LevelViews {
        LevelViews {
            online_a: self.online_a.stage(stage),
            target_b: self.target_b.stage(stage),
            swapped: self
                .swapped
                .as_ref()
                .map(|(ob, ta)| (ob.stage(stage), ta.stage(stage))),
        }
    }
}

/// Total loss and the unweighted per-level losses (`None` where a stage
/// has no head).
#[derive(Clone, Debug)]
pub struct LadderLoss {
    pub total: Var,
    pub levels: Vec<Option<Var>>,
}

impl LadderLoss {
    /// `L_S + Σ_{i<S} w_i·L_i`, summed from the lowest stage up.
    pub fn combine<T: Real>(g: &mut Graph<T>, levels: Vec<Option<Var>>, weights: &[f64]) -> Result<Self> {
        let s = levels.len();
        let mut total = levels[s - 1].ok_or(Error::MissingHead(s))?;
        for (l, &w) in levels[..s - 1].iter().zip(weights) {
            if let Some(l) = *l {
                let scaled = g.scale(l, T::from_f64_lossy(w))?;
                total = g.add(total, scaled)?;
            }
        }
        Ok(LadderLoss { total, levels })
    }
}

/// Every configured level loss, combined with the configured weights.
pub fn ladder_total_loss<T: Real>(
    g: &mut Graph<T>,
    online: &mut Net<T>,
    target: &mut Net<T>,
    cfg: &LadderConfig,
    outputs: &SiameseOutputs,
) -> Result<LadderLoss> {
    let stages = outputs.online_a.z.len();
    cfg.validate(stages)?;
    if cfg.symmetrize != outputs.swapped.is_some() {
        return Err(Error::Config(
            "symmetrized loss needs both view orderings encoded (and only then)".into(),
        ));
    }
    let mut levels = Vec::with_capacity(stages);
    for stage in 1..=stages {
        let views = outputs.level(stage);
        let l = match cfg.heads[stage - 1] {
            HeadKind::None => None,
            HeadKind::Global => Some(global_level_loss(g, online, target, stage, views)?),
            HeadKind::DensePlusGlobal => {
                let dense = dense_level_loss(g, online, target, stage, views)?;
                let global = global_level_loss(g, online, target, stage, views)?;
                Some(mix_dense_global(g, dense, global)?)
            }
        };
        levels.push(l);
    }
    LadderLoss::combine(g, levels, &cfg.weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn pair_loss(a: &[f64], b: &[f64], rows: usize) -> f64 {
        let mut g = Graph::new();
        let d = a.len() / rows;
        let av = g.constant(t(&[rows, d], a)).unwrap();
        let bv = g.constant(t(&[rows, d], b)).unwrap();
        let l = byol_pair_loss(&mut g, av, bv).unwrap();
        g.value(l).item()
    }

    #[test]
    fn pair_loss_examples() {
        assert_eq!(pair_loss(&[1.0, 2.0], &[1.0, 2.0], 1), 0.0);
        assert!((pair_loss(&[1.0, 2.0], &[-1.0, -2.0], 1) - 4.0).abs() < 1e-12);
        assert!((pair_loss(&[1.0, 0.0, 0.0, 3.0], &[0.0, 5.0, 2.0, 0.0], 2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_is_an_average() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(2.0)).unwrap();
        let b = g.constant(Tensor::scalar(4.0)).unwrap();
        let m = mix_dense_global(&mut g, a, b).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
        let m = mix_dense_global(&mut g, a, a).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn combine_synthetic_levels() {
        let mut g = Graph::<f64>::new();
        let levels = (0..4)
            .map(|_| Some(g.constant(Tensor::scalar(1.0)).unwrap()))
            .collect();
        let l = LadderLoss::combine(&mut g, levels, &[1.0 / 16.0, 0.125, 0.25, 1.0]).unwrap();
        assert_eq!(g.value(l.total).item(), 1.0 + 7.0 / 16.0);
    }

    #[test]
    fn align_single_candidate_broadcasts() {
        let ya = t(&[1, 2, 2, 2], &[1.0, -1.0, 0.5, 2.0, 0.0, 3.0, -2.0, 1.0]);
        let yb = t(&[1, 2, 1, 1], &[0.3, -0.7]);
        let out = dense_align(&ya, &yb).unwrap();
        assert_eq!(out.shape(), [1, 2, 2, 2]);
        assert_eq!(out.data(), [0.3, 0.3, 0.3, 0.3, -0.7, -0.7, -0.7, -0.7]);
    }

    #[test]
    fn align_self_match_and_channel_check() {
        let y = t(&[1, 2, 1, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(dense_align(&y, &y).unwrap(), y);
        let other = t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]);
        assert!(dense_align(&y, &other).is_err());
    }

    #[test]
    fn align_tie_goes_to_first_location() {
        // Locations 1 and 2 of yb are the same direction.
        let ya = t(&[1, 2, 1, 1], &[1.0, 1.0]);
        let yb = t(&[1, 2, 1, 3], &[1.0, 2.0, 4.0, 0.0, 2.0, 4.0]);
        assert_eq!(dense_align_indices(&ya, &yb).unwrap(), [1]);
    }
}
