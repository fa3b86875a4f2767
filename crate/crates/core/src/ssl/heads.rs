use lsn_tensor::{Graph, Real, Tensor, Var};

use super::HeadKind;
use crate::backbone::{he_normal, insert_bn, ArchConfig, Net};
use crate::params::ParamStore;
use crate::Result;

/// Widths of every projector and predictor MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: 256, embed: 64 }
    }
}

fn insert_linear(store: &mut ParamStore<f32>, seed_value: u64, prefix: &str, din: usize, dout: usize) {
    let name = format!("{prefix}.weight");
    store.insert(name.clone(), he_normal(seed_value, &name, &[din, dout], din));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([dout]));
}

fn insert_pointwise(store: &mut ParamStore<f32>, seed_value: u64, prefix: &str, din: usize, dout: usize) {
    let name = format!("{prefix}.weight");
    store.insert(name.clone(), he_normal(seed_value, &name, &[dout, din, 1, 1], din));
    store.insert(format!("{prefix}.bias"), Tensor::zeros([dout]));
}

fn insert_mlp(store: &mut ParamStore<f32>, seed_value: u64, prefix: &str, din: usize, cfg: HeadConfig, dense: bool) {
    let layer = if dense { insert_pointwise } else { insert_linear };
    layer(store, seed_value, &format!("{prefix}.fc1"), din, cfg.hidden);
    insert_bn(store, &format!("{prefix}.bn"), cfg.hidden);
    layer(store, seed_value, &format!("{prefix}.fc2"), cfg.hidden, cfg.embed);
}

/// Adds projector and predictor parameters for every stage carrying a loss.
///
/// Global heads live under `head.stage{i}.proj` / `.pred`, dense heads
/// (1×1 convolutions) under `.dproj` / `.dpred`.
pub fn init_heads(store: &mut ParamStore<f32>, arch: &ArchConfig, heads: &[HeadKind], cfg: HeadConfig, seed_value: u64) {
    for (i, kind) in heads.iter().enumerate() {
        let stage = i + 1;
        let c = arch.stage_channels[i];
        if kind.has_global() {
            insert_mlp(store, seed_value, &format!("head.stage{stage}.proj"), c, cfg, false);
            insert_mlp(store, seed_value, &format!("head.stage{stage}.pred"), cfg.embed, cfg, false);
        }
        if kind.has_dense() {
            insert_mlp(store, seed_value, &format!("head.stage{stage}.dproj"), c, cfg, true);
            insert_mlp(store, seed_value, &format!("head.stage{stage}.dpred"), cfg.embed, cfg, true);
        }
    }
}

/// Predictors exist on the online branch only.
pub fn is_predictor(name: &str) -> bool {
    name.contains(".pred.") || name.contains(".dpred.")
}

/// The target copy of an online store: everything but the predictors.
pub fn target_names<T: Real>(online: &ParamStore<T>) -> ParamStore<T> {
    online.filtered(|n| !is_predictor(n))
}

fn mlp<T: Real>(net: &mut Net<T>, g: &mut Graph<T>, prefix: &str, x: Var, dense: bool) -> Result<Var> {
    let layer = |net: &mut Net<T>, g: &mut Graph<T>, p: &str, x: Var| {
        if dense {
            net.conv(g, p, x, 1, 0)
        } else {
            net.linear(g, p, x)
        }
    };
    let h = layer(net, g, &format!("{prefix}.fc1"), x)?;
    let h = net.batch_norm(g, &format!("{prefix}.bn"), h)?;
    let h = g.relu(h)?;
    layer(net, g, &format!("{prefix}.fc2"), h)
}

/// Projector output and, on the online branch, the predictor applied to it.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub projection: Var,
    pub prediction: Option<Var>,
}

/// Global head: average pooling in a side branch, then projector (and
/// predictor when `predict`).
pub fn global_head<T: Real>(net: &mut Net<T>, g: &mut Graph<T>, stage: usize, z: Var, predict: bool) -> Result<HeadOutput> {
    let pooled = g.global_avg_pool(z)?;
    let projection = mlp(net, g, &format!("head.stage{stage}.proj"), pooled, false)?;
    let prediction = if predict {
        Some(mlp(net, g, &format!("head.stage{stage}.pred"), projection, false)?)
    } else {
        None
    };
    Ok(HeadOutput { projection, prediction })
}

/// Dense head: 1×1-conv projector (and predictor) on the unpooled map.
pub fn dense_head<T: Real>(net: &mut Net<T>, g: &mut Graph<T>, stage: usize, z: Var, predict: bool) -> Result<HeadOutput> {
    let projection = mlp(net, g, &format!("head.stage{stage}.dproj"), z, true)?;
    let prediction = if predict {
        Some(mlp(net, g, &format!("head.stage{stage}.dpred"), projection, true)?)
    } else {
        None
    };
    Ok(HeadOutput { projection, prediction })
}
