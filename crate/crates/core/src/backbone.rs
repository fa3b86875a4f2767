//! Staged residual encoder.
//!
//! Layout: a 3×3 stem (conv, BN, ReLU) followed by `S` stages of basic
//! residual blocks. Stage 1 keeps the stem resolution, every later stage
//! halves it in its first block. The stem carries no loss; stage `i`
//! output is `z_i`.

use std::collections::BTreeMap;

use lsn_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::{ParamKind, ParamStore};
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            input_size: 32,
            stem_channels: 32,
            stage_channels: vec![32, 64, 128, 256],
            blocks_per_stage: 2,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    /// A narrow variant for tests: same topology, few channels, small input.
    pub fn tiny() -> Self {
        ArchConfig {
            in_channels: 3,
            input_size: 8,
            stem_channels: 4,
            stage_channels: vec![4, 6, 8, 8],
            blocks_per_stage: 1,
            ..ArchConfig::default()
        }
    }

    /// Full-resolution input with narrow stages, for quick training runs.
    pub fn compact() -> Self {
        ArchConfig {
            stem_channels: 8,
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            ..ArchConfig::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        let bad = |msg: String| Err(Error::Config(msg));
        if s < 2 {
            return bad(format!("need at least 2 stages, got {s}"));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be positive".into());
        }
        let factor = 1usize << (s - 1);
        if self.input_size < factor || self.input_size % factor != 0 {
            return bad(format!(
                "input size {} must be a positive multiple of {factor} for {s} stages",
                self.input_size
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0,1) and bn_eps be positive".into());
        }
        Ok(())
    }

    /// Spatial side of `z_stage` (1-based).
    pub fn stage_size(&self, stage: usize) -> usize {
        self.input_size >> (stage - 1)
    }

    pub fn stage_shape(&self, stage: usize, batch: usize) -> [usize; 4] {
        let s = self.stage_size(stage);
        [batch, self.stage_channels[stage - 1], s, s]
    }

    pub fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.stages() {
            return Err(Error::StageOutOfRange {
                stage,
                stages: self.stages(),
            });
        }
        Ok(())
    }

    fn block_channels(&self, stage: usize, block: usize) -> (usize, usize, usize) {
        let cout = self.stage_channels[stage - 1];
        let cin = if block > 1 {
            cout
        } else if stage == 1 {
            self.stem_channels
        } else {
            self.stage_channels[stage - 2]
        };
        let stride = if block == 1 && stage > 1 { 2 } else { 1 };
        (cin, cout, stride)
    }

    fn has_projection(&self, stage: usize, block: usize) -> bool {
        let (cin, cout, stride) = self.block_channels(stage, block);
        cin != cout || stride != 1
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.stage{stage}.block{block}")
}

/// Per-stage outputs `z_1..z_S` of one encoder pass.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub z: Vec<Var>,
}

impl StageOutputs {
    pub fn stage(&self, i: usize) -> Var {
        self.z[i - 1]
    }

    pub fn top(&self) -> Var {
        *self.z.last().expect("at least two stages")
    }
}

/// Normal draw for a parameter, keyed by the run seed and the parameter name
/// so a tensor's initial value does not depend on which other tensors exist.
pub(crate) fn he_normal(seed_value: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let mut rng = seed::rng(&[seed_value, seed::hash_str(name)]);
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng) as f32)
}

pub(crate) fn insert_bn(store: &mut ParamStore<f32>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full([c], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros([c]));
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros([c]));
    store.insert(format!("{prefix}.running_var"), Tensor::full([c], 1.0));
}

pub(crate) fn insert_conv(store: &mut ParamStore<f32>, seed_value: u64, name: &str, cout: usize, cin: usize, k: usize) {
    let shape = [cout, cin, k, k];
    store.insert(name.to_string(), he_normal(seed_value, name, &shape, cin * k * k));
}

/// Backbone parameters: He-normal conv weights, BN scale 1 and shift 0.
/// Convolutions feeding a batch norm carry no bias.
pub fn init_params(arch: &ArchConfig, seed_value: u64) -> Result<ParamStore<f32>> {
    arch.validate()?;
    let mut store = ParamStore::new();
    insert_conv(&mut store, seed_value, "backbone.stem.conv.weight", arch.stem_channels, arch.in_channels, 3);
    insert_bn(&mut store, "backbone.stem.bn", arch.stem_channels);
    for stage in 1..=arch.stages() {
        for block in 1..=arch.blocks_per_stage {
            let p = block_prefix(stage, block);
            let (cin, cout, _) = arch.block_channels(stage, block);
            insert_conv(&mut store, seed_value, &format!("{p}.conv1.weight"), cout, cin, 3);
            insert_bn(&mut store, &format!("{p}.bn1"), cout);
            insert_conv(&mut store, seed_value, &format!("{p}.conv2.weight"), cout, cout, 3);
            insert_bn(&mut store, &format!("{p}.bn2"), cout);
            if arch.has_projection(stage, block) {
                insert_conv(&mut store, seed_value, &format!("{p}.proj.conv.weight"), cout, cin, 1);
                insert_bn(&mut store, &format!("{p}.proj.bn"), cout);
            }
        }
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Binds a [`ParamStore`] into a [`Graph`] for one forward pass.
///
/// Parameters become graph leaves on first use. In train mode every batch
/// norm call folds its batch statistics into a private copy of the running
/// statistics, in call order; [`Net::running_stats`] hands them back so the
/// caller decides whether to commit them.
pub struct Net<'a, T: Real> {
    store: &'a ParamStore<T>,
    mode: BnMode,
    trainable: bool,
    momentum: T,
    eps: T,
    bound: BTreeMap<String, Var>,
    running: BTreeMap<String, Vec<T>>,
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: BnMode, trainable: bool, bn_momentum: f64, bn_eps: f64) -> Self {
        Net {
            store,
            mode,
            trainable,
            momentum: T::from_f64_lossy(bn_momentum),
            eps: T::from_f64_lossy(bn_eps),
            bound: BTreeMap::new(),
            running: BTreeMap::new(),
        }
    }

    pub fn for_arch(store: &'a ParamStore<T>, arch: &ArchConfig, mode: BnMode, trainable: bool) -> Self {
        Self::new(store, mode, trainable, arch.bn_momentum, arch.bn_eps)
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = g.leaf(t, self.trainable && ParamKind::of(name).trainable())?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Graph leaves bound so far, by parameter name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound trainable parameter after a backward pass.
    pub fn gradients(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| g.grad_tensor(v).map(|t| (n.clone(), t)))
            .collect()
    }

    /// Largest absolute gradient entry over the bound parameters.
    pub fn max_abs_grad(&self, g: &Graph<T>) -> f64 {
        self.bound
            .values()
            .filter_map(|&v| g.grad(v))
            .flat_map(|gr| gr.iter().map(|x| x.as_f64().abs()))
            .fold(0.0, f64::max)
    }

    /// Updated running statistics, by full tensor name.
    pub fn running_stats(self) -> BTreeMap<String, Vec<T>> {
        self.running
    }

    pub fn conv(&mut self, g: &mut Graph<T>, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(g, &bias_name)?)
        } else {
            None
        };
        Ok(g.conv2d(x, w, b, stride, pad)?)
    }

    /// `x · W + b` with `W` stored as `[in, out]`.
    pub fn linear(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}.weight"))?;
        let b = self.param(g, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    pub fn batch_norm(&mut self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, &format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match self.mode {
            BnMode::Eval => {
                let mean = self.current(&mean_name)?;
                let var = self.current(&var_name)?;
                Ok(g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)?)
            }
            BnMode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let keep = T::one() - m;
                for (name, batch) in [(mean_name, stats.mean), (var_name, stats.var)] {
                    let mut cur = self.current(&name)?;
                    for (c, b) in cur.iter_mut().zip(batch) {
                        *c = m * *c + keep * b;
                    }
                    self.running.insert(name, cur);
                }
                Ok(y)
            }
        }
    }

    fn current(&self, name: &str) -> Result<Vec<T>> {
        match self.running.get(name) {
            Some(v) => Ok(v.clone()),
            None => Ok(self.store.require(name)?.data().to_vec()),
        }
    }
}

/// Writes running statistics collected by a [`Net`] back into a store.
pub fn commit_running_stats<T: Real>(store: &mut ParamStore<T>, stats: BTreeMap<String, Vec<T>>) -> Result<()> {
    for (name, values) in stats {
        let t = store
            .get_mut(&name)
            .ok_or_else(|| Error::NameMismatch(format!("missing buffer `{name}`")))?;
        t.data_mut().copy_from_slice(&values);
    }
    Ok(())
}

fn basic_block<T: Real>(net: &mut Net<T>, g: &mut Graph<T>, arch: &ArchConfig, stage: usize, block: usize, x: Var) -> Result<Var> {
    let p = block_prefix(stage, block);
    let (_, _, stride) = arch.block_channels(stage, block);
    let h = net.conv(g, &format!("{p}.conv1"), x, stride, 1)?;
    let h = net.batch_norm(g, &format!("{p}.bn1"), h)?;
    let h = g.relu(h)?;
    let h = net.conv(g, &format!("{p}.conv2"), h, 1, 1)?;
    let h = net.batch_norm(g, &format!("{p}.bn2"), h)?;
    let shortcut = if arch.has_projection(stage, block) {
        let s = net.conv(g, &format!("{p}.proj.conv"), x, stride, 0)?;
        net.batch_norm(g, &format!("{p}.proj.bn"), s)?
    } else {
        x
    };
    let y = g.add(h, shortcut)?;
    Ok(g.relu(y)?)
}

/// Runs the backbone on `x[B, C, H, W]`, returning every stage output.
pub fn encode<T: Real>(net: &mut Net<T>, g: &mut Graph<T>, arch: &ArchConfig, x: Var) -> Result<StageOutputs> {
    let expect = [arch.in_channels, arch.input_size, arch.input_size];
    let shape = g.shape(x);
    if shape.len() != 4 || shape[1..] != expect {
        return Err(Error::Config(format!(
            "input shape {shape:?} does not match [B, {}, {}, {}]",
            expect[0], expect[1], expect[2]
        )));
    }
    let h = net.conv(g, "backbone.stem.conv", x, 1, 1)?;
    let h = net.batch_norm(g, "backbone.stem.bn", h)?;
    let mut h = g.relu(h)?;
    let mut z = Vec::with_capacity(arch.stages());
    for stage in 1..=arch.stages() {
        for block in 1..=arch.blocks_per_stage {
            h = basic_block(net, g, arch, stage, block, h)?;
        }
        z.push(h);
    }
    Ok(StageOutputs { z })
}

/// Eval-mode stage outputs as plain tensors.
pub fn encode_eval<T: Real>(store: &ParamStore<T>, arch: &ArchConfig, x: Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let mut net = Net::for_arch(store, arch, BnMode::Eval, false);
    let xv = g.constant(x)?;
    let out = encode(&mut net, &mut g, arch, xv)?;
    Ok(out.z.iter().map(|&v| g.value(v).clone()).collect())
}

/// Edits `store` so that `z_stage` no longer depends on the input.
///
/// The second conv of every block in the stage is zeroed, so each residual
/// branch emits its BN shift alone; the first block's projection shortcut is
/// zeroed likewise. When that shortcut is an identity (stage 1 with matching
/// stem width) the stem conv is zeroed instead, making the shortcut input
/// constant. Every later stage is then a function of a constant.
pub fn collapse_stage<T: Real>(store: &mut ParamStore<T>, arch: &ArchConfig, stage: usize) -> Result<()> {
    arch.check_stage(stage)?;
    let mut zero = |name: String| -> Result<()> {
        let t = store
            .get_mut(&name)
            .ok_or_else(|| Error::NameMismatch(format!("missing parameter `{name}`")))?;
        t.data_mut().fill(T::zero());
        Ok(())
    };
    for block in 1..=arch.blocks_per_stage {
        zero(format!("{}.conv2.weight", block_prefix(stage, block)))?;
    }
    if arch.has_projection(stage, 1) {
        zero(format!("{}.proj.conv.weight", block_prefix(stage, 1)))?;
    } else {
        // Only stage 1 can start with an identity shortcut.
        zero("backbone.stem.conv.weight".to_string())?;
    }
    Ok(())
}

/// Fills a tensor with uniform noise in `[lo, hi)`.
pub fn uniform_tensor(shape: &[usize], lo: f32, hi: f32, seed_value: u64) -> Tensor<f32> {
    let mut rng = seed::rng(&[seed_value, 0x554E_4946]);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}
