//! Siamese losses on every stage: heads, pair and dense losses, the ladder
//! total, and the schedules that weight and average them.

mod heads;
mod loss;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use lsn_tensor::Real;

pub use heads::{
    dense_head, global_head, init_heads, is_predictor, target_names, HeadConfig, HeadOutput,
};
pub use loss::{
    byol_pair_loss, dense_align, dense_align_indices, dense_level_loss, global_level_loss,
    ladder_total_loss, mix_dense_global, normalized_mse, LadderLoss, LevelViews, SiameseOutputs,
    NORM_EPS,
};

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    None,
    Global,
    DensePlusGlobal,
}

impl HeadKind {
    pub fn has_global(self) -> bool {
        self != HeadKind::None
    }

    pub fn has_dense(self) -> bool {
        self == HeadKind::DensePlusGlobal
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::None => "none",
            HeadKind::Global => "global",
            HeadKind::DensePlusGlobal => "dense_plus_global",
        })
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(HeadKind::None),
            "global" => Ok(HeadKind::Global),
            "dense_plus_global" => Ok(HeadKind::DensePlusGlobal),
            _ => Err(format!("expected none, global or dense_plus_global, got `{s}`")),
        }
    }
}

/// Named head layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Global loss on the top stage only.
    Byol,
    /// Global loss on every stage.
    LadderByol,
    /// Dense plus global loss on the top stage only.
    DenseByol,
    /// Dense plus global on the lower half of the stages, global above.
    LadderDenseByol,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Byol, Preset::LadderByol, Preset::DenseByol, Preset::LadderDenseByol];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Byol => "byol",
            Preset::LadderByol => "ladder_byol",
            Preset::DenseByol => "dense_byol",
            Preset::LadderDenseByol => "ladder_dense_byol",
        }
    }

    pub fn heads(self, stages: usize) -> Vec<HeadKind> {
        (1..=stages)
            .map(|i| {
                let top = i == stages;
                match self {
                    Preset::Byol if top => HeadKind::Global,
                    Preset::DenseByol if top => HeadKind::DensePlusGlobal,
                    Preset::Byol | Preset::DenseByol => HeadKind::None,
                    Preset::LadderByol => HeadKind::Global,
                    Preset::LadderDenseByol if i <= stages / 2 => HeadKind::DensePlusGlobal,
                    Preset::LadderDenseByol => HeadKind::Global,
                }
            })
            .collect()
    }

    /// Whether intermediate stages carry losses.
    pub fn is_ladder(self) -> bool {
        matches!(self, Preset::LadderByol | Preset::LadderDenseByol)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("expected one of byol, ladder_byol, dense_byol, ladder_dense_byol, got `{s}`"))
    }
}

/// Per-stage loss heads and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LadderConfig {
    pub heads: Vec<HeadKind>,
    pub weights: Vec<f64>,
    pub tau_base: f64,
    pub symmetrize: bool,
}

impl LadderConfig {
    /// Preset heads with weights from [`weight_schedule`]. Stages without a
    /// head get weight 0.
    pub fn preset(preset: Preset, stages: usize, w: f64) -> Self {
        let heads = preset.heads(stages);
        let weights = weight_schedule(w, stages)
            .into_iter()
            .zip(&heads)
            .map(|(wi, h)| if h.has_global() { wi } else { 0.0 })
            .collect();
        LadderConfig {
            heads,
            weights,
            tau_base: 0.99,
            symmetrize: true,
        }
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads.len() != stages || self.weights.len() != stages {
            return bad(format!(
                "{} heads and {} weights for {stages} stages",
                self.heads.len(),
                self.weights.len()
            ));
        }
        if self.heads[stages - 1] == HeadKind::None {
            return bad("the top stage must carry a loss".into());
        }
        if self.weights[stages - 1] != 1.0 {
            return bad(format!("top weight must be 1, got {}", self.weights[stages - 1]));
        }
        for (i, (&w, h)) in self.weights.iter().zip(&self.heads).enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("weight of stage {} must be finite and >= 0, got {w}", i + 1));
            }
            if *h == HeadKind::None && w != 0.0 {
                return bad(format!("stage {} has weight {w} but no head", i + 1));
            }
        }
        if !(0.0..=1.0).contains(&self.tau_base) {
            return bad(format!("tau_base must lie in [0,1], got {}", self.tau_base));
        }
        Ok(())
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Halving weights below the top: `[2^(i−S)·w for i < S] ++ [1]`.
pub fn weight_schedule(w: f64, stages: usize) -> Vec<f64> {
    assert!(stages >= 2, "weight_schedule needs at least 2 stages");
    (1..stages)
        .map(|i| w * 2f64.powi(i as i32 - stages as i32))
        .chain(std::iter::once(1.0))
        .collect()
}

/// Target momentum rising from `tau_base` at step 0 to 1 at the last step.
pub fn tau_schedule(step: u64, total_steps: u64, tau_base: f64) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - tau_base) * ((PI * t).cos() + 1.0) / 2.0
}

/// `target ← τ·target + (1−τ)·online` for every tensor of `target`,
/// running statistics included. The online store may hold more tensors
/// (its predictors); every target name must be present there.
pub fn ema_update<T: Real>(target: &mut ParamStore<T>, online: &ParamStore<T>, tau: f64) -> Result<()> {
    for (name, t) in target.iter() {
        match online.get(name) {
            Some(o) if o.shape() == t.shape() => {}
            Some(o) => {
                return Err(Error::NameMismatch(format!(
                    "`{name}` is {:?} in the target but {:?} online",
                    t.shape(),
                    o.shape()
                )))
            }
            None => return Err(Error::NameMismatch(format!("`{name}` missing from the online store"))),
        }
    }
    let keep = T::from_f64_lossy(tau);
    let take = T::from_f64_lossy(1.0 - tau);
    for (name, t) in target.iter_mut() {
        let o = online.get(name).expect("checked above");
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = keep * *tv + take * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lsn_tensor::Tensor;

    #[test]
    fn schedule_rows() {
        assert_eq!(weight_schedule(0.5, 4), [0.0625, 0.125, 0.25, 1.0]);
        assert_eq!(weight_schedule(0.0, 4), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(weight_schedule(1.0, 4), [0.125, 0.25, 0.5, 1.0]);
        assert_eq!(weight_schedule(1.0, 2), [0.5, 1.0]);
    }

    #[test]
    fn tau_endpoints_and_midpoint() {
        assert_eq!(tau_schedule(0, 100, 0.99), 0.99);
        assert_eq!(tau_schedule(100, 100, 0.99), 1.0);
        assert!((tau_schedule(50, 100, 0.99) - 0.995).abs() < 1e-12);
    }

    #[test]
    fn presets_expand() {
        use HeadKind::*;
        assert_eq!(Preset::Byol.heads(4), [None, None, None, Global]);
        assert_eq!(Preset::LadderByol.heads(4), [Global; 4]);
        assert_eq!(Preset::DenseByol.heads(4), [None, None, None, DensePlusGlobal]);
        assert_eq!(
            Preset::LadderDenseByol.heads(4),
            [DensePlusGlobal, DensePlusGlobal, Global, Global]
        );
        let c = LadderConfig::preset(Preset::Byol, 4, 0.5);
        assert_eq!(c.weights, [0.0, 0.0, 0.0, 1.0]);
        c.validate(4).unwrap();
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn validation_rejects_weight_without_head() {
        let mut c = LadderConfig::preset(Preset::Byol, 4, 0.5);
        c.weights[0] = 0.5;
        assert!(c.validate(4).is_err());
        let mut c = LadderConfig::preset(Preset::LadderByol, 4, 0.5);
        c.weights[3] = 2.0;
        assert!(c.validate(4).is_err());
    }

    #[test]
    fn ema_scalar_and_endpoints() {
        let mut t = ParamStore::<f64>::new();
        t.insert("a.weight", Tensor::new([1], vec![1.0]).unwrap());
        let mut o = ParamStore::<f64>::new();
        o.insert("a.weight", Tensor::new([1], vec![2.0]).unwrap());
        o.insert("a.pred.fc1.weight", Tensor::zeros([1]));

        let mut x = t.clone();
        ema_update(&mut x, &o, 0.9).unwrap();
        assert!((x.get("a.weight").unwrap().data()[0] - 1.1).abs() < 1e-15);

        let mut x = t.clone();
        ema_update(&mut x, &o, 1.0).unwrap();
        assert_eq!(x, t);
        ema_update(&mut x, &o, 0.0).unwrap();
        assert_eq!(x.get("a.weight"), o.get("a.weight"));

        let mut bad = t.clone();
        bad.insert("b.weight", Tensor::zeros([1]));
        assert!(matches!(ema_update(&mut bad, &o, 0.5), Err(Error::NameMismatch(_))));
    }
}
