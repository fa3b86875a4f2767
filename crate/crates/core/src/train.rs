//! Siamese training: one optimizer step, view preparation, and full runs.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lsn_tensor::{Graph, Real, Tensor, Var};
use rayon::prelude::*;

use crate::augment::{make_view_pair_with, AugPolicy};
use crate::backbone::{self, commit_running_stats, encode, ArchConfig, BnMode, Net};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{batch_iter, Dataset};
use crate::metrics::{csv_header, csv_row, MetricsRow};
use crate::optim::{cosine_lr, lars_step, sgd_momentum_step, OptState, OptimizerKind, LARS_EPS};
use crate::params::ParamStore;
use crate::ssl::{self, ladder_total_loss, HeadConfig, LadderConfig, LadderLoss, SiameseOutputs};
use crate::{seed, Error, Result};

/// Statistics the target branch normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetBn {
    /// Running statistics, themselves averaged from the online ones.
    Eval,
    /// Statistics of the current batch.
    Train,
}

impl fmt::Display for TargetBn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetBn::Eval => "eval",
            TargetBn::Train => "train",
        })
    }
}

impl FromStr for TargetBn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "eval" => Ok(TargetBn::Eval),
            "train" => Ok(TargetBn::Train),
            _ => Err(format!("expected eval or train, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub heads: HeadConfig,
    pub ladder: LadderConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub target_bn: TargetBn,
    pub aug_a: AugPolicy,
    pub aug_b: AugPolicy,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Augmentation workers; 0 uses every available core.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let ladder = LadderConfig::preset(ssl::Preset::LadderByol, arch.stages(), 0.5);
        TrainConfig {
            arch,
            heads: HeadConfig::default(),
            ladder,
            optim: OptimConfig::default(),
            epochs: 40,
            batch_size: 256,
            seed: 0,
            target_bn: TargetBn::Eval,
            aug_a: AugPolicy::default(),
            aug_b: AugPolicy::default(),
            checkpoint_every: 10,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.ladder.validate(self.arch.stages())?;
        self.aug_a.validate()?;
        self.aug_b.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("epochs must be positive and batch size at least 2");
        }
        if !(self.optim.lr > 0.0) || !(self.optim.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.optim.momentum) {
            return bad("need lr > 0, weight decay >= 0 and momentum in [0,1)");
        }
        if self.heads.hidden == 0 || self.heads.embed == 0 {
            return bad("head widths must be positive");
        }
        if self.aug_a.out_size != self.arch.input_size || self.aug_b.out_size != self.arch.input_size {
            return bad("augmentation output size must equal the network input size");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len / self.batch_size
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(dataset_len)) as u64
    }
}

/// Online and target parameters with the optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub opt: OptState<f32>,
}

impl TrainState {
    /// Fresh parameters; the target starts as a copy of the online network
    /// without its predictors.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut online = backbone::init_params(&cfg.arch, cfg.seed)?;
        ssl::init_heads(&mut online, &cfg.arch, &cfg.ladder.heads, cfg.heads, cfg.seed);
        let target = ssl::target_names(&online);
        let opt = OptState::new(&online);
        Ok(TrainState { online, target, opt })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn to_checkpoint(&self, config_digest: &str, rng_state: String, config: Vec<(String, String)>) -> Checkpoint {
        Checkpoint {
            online: self.online.clone(),
            target: self.target.clone(),
            momentum: self.opt.momentum.clone(),
            step: self.opt.step,
            config_digest: config_digest.to_string(),
            rng_state,
            config,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        TrainState {
            online: ckpt.online.clone(),
            target: ckpt.target.clone(),
            opt: OptState {
                momentum: ckpt.momentum.clone(),
                step: ckpt.step,
            },
        }
    }
}

/// Encodes both views through both branches and builds the ladder loss.
/// The target branch is encoded only on the view opposite to each online
/// pass.
pub fn siamese_forward<T: Real>(
    g: &mut Graph<T>,
    online: &mut Net<T>,
    target: &mut Net<T>,
    arch: &ArchConfig,
    ladder: &LadderConfig,
    xa: Var,
    xb: Var,
) -> Result<(SiameseOutputs, LadderLoss)> {
    let online_a = encode(online, g, arch, xa)?;
    let target_b = encode(target, g, arch, xb)?;
    let swapped = if ladder.symmetrize {
        Some((encode(online, g, arch, xb)?, encode(target, g, arch, xa)?))
    } else {
        None
    };
    let outputs = SiameseOutputs {
        online_a,
        target_b,
        swapped,
    };
    let loss = ladder_total_loss(g, online, target, ladder, &outputs)?;
    Ok((outputs, loss))
}

pub fn target_mode(cfg: &TrainConfig) -> BnMode {
    match cfg.target_bn {
        TargetBn::Eval => BnMode::Eval,
        TargetBn::Train => BnMode::Train,
    }
}

/// Losses and schedule values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub total: f64,
    pub levels: Vec<Option<f64>>,
    /// Largest gradient entry seen on the target parameters (always 0).
    pub target_grad_max: f64,
}

impl StepReport {
    pub fn metrics_row(&self) -> MetricsRow {
        MetricsRow {
            step: self.step,
            lr: self.lr,
            tau: self.tau,
            total: self.total,
            levels: self.levels.clone(),
        }
    }
}

fn format_levels(levels: &[Option<f64>]) -> String {
    let parts: Vec<String> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Some(v) => format!("L{}={v}", i + 1),
            None => format!("L{}=-", i + 1),
        })
        .collect();
    if parts.is_empty() {
        "unavailable".into()
    } else {
        parts.join(" ")
    }
}

/// One optimization step on prepared views `[B, C, S, S]`.
///
/// Backward of the ladder loss, then the optimizer on the online
/// parameters, then the online running statistics, then the target EMA.
pub fn train_step_on_views(
    state: &mut TrainState,
    cfg: &TrainConfig,
    xa: &Tensor<f32>,
    xb: &Tensor<f32>,
    total_steps: u64,
) -> Result<StepReport> {
    let step = state.opt.step;
    let mut levels: Vec<Option<f64>> = Vec::new();
    let fail = |levels: &[Option<f64>], source: Error| Error::Training {
        step,
        levels: format_levels(levels),
        source: Box::new(source),
    };

    let mut g = Graph::<f32>::new();
    let mut online = Net::for_arch(&state.online, &cfg.arch, BnMode::Train, true);
    // Target leaves are trainable so that any gradient leaking past the
    // stop-gradient would show up on them.
    let mut target = Net::for_arch(&state.target, &cfg.arch, target_mode(cfg), true);
    let xa = g.constant(xa.clone()).map_err(|e| fail(&levels, e.into()))?;
    let xb = g.constant(xb.clone()).map_err(|e| fail(&levels, e.into()))?;
    let (_, loss) = siamese_forward(&mut g, &mut online, &mut target, &cfg.arch, &cfg.ladder, xa, xb)
        .map_err(|e| fail(&levels, e))?;
    levels = loss.levels.iter().map(|l| l.map(|v| g.value(v).item() as f64)).collect();
    let total = g.value(loss.total).item() as f64;
    g.backward(loss.total).map_err(|e| fail(&levels, e.into()))?;

    let target_grad_max = target.max_abs_grad(&g);
    if target_grad_max != 0.0 {
        return Err(fail(&levels, Error::TargetGradient(target_grad_max)));
    }
    let grads = online.gradients(&g);
    let running = online.running_stats();
    drop(target);
    drop(g);

    let lr = cosine_lr(step, total_steps, cfg.optim.lr);
    let o = &cfg.optim;
    match o.kind {
        OptimizerKind::Sgd => sgd_momentum_step(&mut state.online, &grads, &mut state.opt, lr, o.momentum, o.weight_decay)?,
        OptimizerKind::Lars => lars_step(&mut state.online, &grads, &mut state.opt, lr, o.momentum, o.weight_decay, LARS_EPS)?,
    }
    commit_running_stats(&mut state.online, running)?;
    let tau = ssl::tau_schedule(step, total_steps, cfg.ladder.tau_base);
    ssl::ema_update(&mut state.target, &state.online, tau)?;
    if !state.online.iter().all(|(_, t)| t.is_finite()) {
        return Err(fail(&levels, Error::Config("non-finite parameters after the update".into())));
    }
    Ok(StepReport {
        step,
        lr,
        tau,
        total,
        levels,
        target_grad_max,
    })
}

/// Thread pool for per-sample view generation.
pub struct ViewWorkers {
    pool: rayon::ThreadPool,
}

impl ViewWorkers {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(ViewWorkers { pool })
    }

    /// Both view batches for `indices`. Each sample's pair depends only on
    /// `(seed, epoch, sample index)`.
    pub fn prepare(
        &self,
        ds: &Dataset,
        indices: &[usize],
        a: &AugPolicy,
        b: &AugPolicy,
        seed_value: u64,
        epoch: u64,
    ) -> (Tensor<f32>, Tensor<f32>) {
        let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = self.pool.install(|| {
            indices
                .par_iter()
                .map(|&i| make_view_pair_with(&ds.image(i), a, b, seed::view_seed(seed_value, epoch, i as u64)))
                .collect()
        });
        let stack = |pick: fn(&(Tensor<f32>, Tensor<f32>)) -> &Tensor<f32>| {
            let first = pick(&pairs[0]).shape().to_vec();
            let mut data = Vec::with_capacity(pairs.len() * first.iter().product::<usize>());
            for p in &pairs {
                data.extend_from_slice(pick(p).data());
            }
            let mut shape = vec![pairs.len()];
            shape.extend(first);
            Tensor::new(shape, data).expect("stacked views")
        };
        (stack(|p| &p.0), stack(|p| &p.1))
    }
}

/// Samples one batch, builds its views and takes a step.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    workers: &ViewWorkers,
    ds: &Dataset,
    indices: &[usize],
    epoch: u64,
    total_steps: u64,
) -> Result<StepReport> {
    let (xa, xb) = workers.prepare(ds, indices, &cfg.aug_a, &cfg.aug_b, cfg.seed, epoch);
    train_step_on_views(state, cfg, &xa, &xb, total_steps)
}

/// Where a run writes checkpoints and its metrics log.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_digest: String,
    /// Resolved configuration stored in every checkpoint.
    pub config: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
}

fn rng_state(seed_value: u64, epoch: usize, step: u64) -> String {
    format!("seed:{seed_value};epoch:{epoch};step:{step}")
}

/// A step that fails before its losses exist reports the previous step's.
fn with_previous_levels(e: Error, previous: Option<&MetricsRow>) -> Error {
    match (e, previous) {
        (Error::Training { step, levels, source }, Some(prev)) if levels == "unavailable" => Error::Training {
            step,
            levels: format!("unavailable; step {} had {}", prev.step, format_levels(&prev.levels)),
            source,
        },
        (e, _) => e,
    }
}

/// Full pretraining: `epochs × ⌊N / batch⌋` steps under cosine lr and τ
/// schedules. With `out`, writes `metrics.csv`, `epoch{E}.ckpt` at the
/// configured cadence and `final.ckpt`.
pub fn pretrain_run(
    cfg: &TrainConfig,
    ds: &Dataset,
    out: Option<&RunOutput>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<RunResult> {
    cfg.validate()?;
    if ds.channels != cfg.arch.in_channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, network expects {}",
            ds.channels, cfg.arch.in_channels
        )));
    }
    let steps_per_epoch = cfg.steps_per_epoch(ds.len());
    if steps_per_epoch == 0 {
        return Err(Error::InsufficientSamples {
            needed: cfg.batch_size,
            got: ds.len(),
        });
    }
    let total = cfg.total_steps(ds.len());
    let workers = ViewWorkers::new(cfg.threads)?;
    let mut state = TrainState::init(cfg)?;
    let stages = cfg.arch.stages();

    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(format!("creating {}", o.dir.display()), e))?;
            let path = o.dir.join("metrics.csv");
            let f = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", csv_header(stages)).map_err(|e| Error::io("writing metrics", e))?;
            Some(w)
        }
        None => None,
    };
    let save = |state: &TrainState, epoch: usize, name: &str| -> Result<Checkpoint> {
        let (digest, config) = out.map(|o| (o.config_digest.clone(), o.config.clone())).unwrap_or_default();
        let ckpt = state.to_checkpoint(&digest, rng_state(cfg.seed, epoch, state.step()), config);
        if let Some(o) = out {
            save_checkpoint(&ckpt, &o.dir.join(name))?;
        }
        Ok(ckpt)
    };

    let mut metrics = Vec::with_capacity(total as usize);
    for epoch in 0..cfg.epochs {
        for batch in batch_iter(ds, cfg.batch_size, epoch as u64, cfg.seed) {
            let report = train_step(&mut state, cfg, &workers, ds, &batch, epoch as u64, total)
                .map_err(|e| with_previous_levels(e, metrics.last()))?;
            let row = report.metrics_row();
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", csv_row(&row)).map_err(|e| Error::io("writing metrics", e))?;
            }
            on_step(&report);
            metrics.push(row);
        }
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io("writing metrics", e))?;
        }
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            save(&state, done, &format!("epoch{done}.ckpt"))?;
        }
    }
    let checkpoint = save(&state, cfg.epochs, "final.ckpt")?;
    Ok(RunResult {
        state,
        metrics,
        checkpoint,
    })
}

/// Default checkpoint path of a finished run.
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}
