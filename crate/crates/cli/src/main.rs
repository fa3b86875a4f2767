use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lsn_core::checkpoint::{load_checkpoint, Checkpoint};
use lsn_core::config::{Resolved, RunConfig};
use lsn_core::eval::{
    collapse_metric, extract_features, gradient_attribution, linear_probe, theorem1_probe, to_gray, top_embeddings,
    view_distance_stats, write_pgm, MIN_COLLAPSE_SAMPLES,
};
use lsn_core::train::{pretrain_run, RunOutput, ViewWorkers};
use lsn_core::Error;

/// Multi-level siamese self-supervised pretraining, probing and analysis.
#[derive(Parser)]
#[command(name = "lsn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone; writes checkpoints, metrics.csv and resolved.cfg.
    Pretrain(Common),
    /// Linear probes on frozen per-stage features; writes probes.csv.
    Probe(ProbeArgs),
    /// Diagnostics on a trained checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// `all` or a stage number.
    #[arg(long, default_value = "all")]
    stage: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dist,
    Grad,
    Collapse,
    Theorem1,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Dist => "dist",
            Kind::Grad => "grad",
            Kind::Collapse => "collapse",
            Kind::Theorem1 => "theorem1",
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    kind: Kind,
    #[command(flatten)]
    common: Common,
    /// Trained checkpoint; optional for theorem1.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// dist: comma-separated stages (default: all).
    #[arg(long)]
    stages: Option<String>,
    /// dist: sampled images; collapse: embedded images.
    #[arg(long)]
    n: Option<usize>,
    /// grad: loss level to attribute (default: top).
    #[arg(long)]
    level: Option<usize>,
    /// grad: number of images, one map each.
    #[arg(long, default_value_t = 8)]
    samples: usize,
}

/// Bad invocation rather than a failed computation.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::UnknownKey(_)
            | Error::InvalidValue { .. }
            | Error::StageOutOfRange { .. }
            | Error::MissingHead(_)
            | Error::NotACheckpoint { .. }
            | Error::CorruptCheckpoint { .. }
            | Error::UnsupportedVersion { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Base pairs (from a checkpoint, if any), then the file, then `--set`.
fn build_config(base: Option<&Checkpoint>, common: &Common, seed_key: &str) -> Result<RunConfig> {
    let mut cfg = match base {
        Some(c) => RunConfig::from_pairs(&c.config)?,
        None => RunConfig::new(),
    };
    if let Some(path) = &common.config {
        if !path.is_file() {
            return Err(usage(format!("config file {} not found", path.display())));
        }
        let file = RunConfig::from_file(path)?;
        for (k, v) in file.explicit() {
            cfg.set(k, v)?;
        }
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set(seed_key, &seed.to_string())?;
    }
    Ok(cfg)
}

/// `run.threads`, capped by `LSN_THREADS` when set.
fn worker_threads(configured: usize) -> Result<usize> {
    let Ok(cap) = std::env::var("LSN_THREADS") else {
        return Ok(configured);
    };
    let cap: usize = cap
        .trim()
        .parse()
        .map_err(|_| usage(format!("LSN_THREADS must be a non-negative integer, got `{cap}`")))?;
    Ok(match (configured, cap) {
        (_, 0) => configured,
        (0, c) => c,
        (n, c) => n.min(c),
    })
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = load_checkpoint(path)?;
    if ckpt.config.is_empty() {
        return Err(usage(format!("{} carries no configuration", path.display())));
    }
    Ok(ckpt)
}

fn output_dir(common: &Common, ckpt: Option<&Path>) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        ckpt.and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare_dir(dir: &Path, resolved: &Resolved, snapshot: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join(snapshot), &resolved.snapshot())
}

fn pretrain(a: Common) -> Result<()> {
    let mut cfg = build_config(None, &a, "run.seed")?;
    if let Some(out) = &a.out {
        cfg.set("run.out_dir", &out.to_string_lossy())?;
    }
    let resolved = cfg.resolve()?;
    let dir = resolved.out_dir.clone();
    prepare_dir(&dir, &resolved, "resolved.cfg")?;
    let ds = resolved.data.load()?;

    let mut train = resolved.train.clone();
    train.threads = worker_threads(train.threads)?;
    let steps = train.total_steps(ds.len());
    eprintln!(
        "pretraining {} on {} images: {} epochs, {} steps, out {}",
        resolved.preset,
        ds.len(),
        train.epochs,
        steps,
        dir.display()
    );
    let out = RunOutput {
        dir: dir.clone(),
        config_digest: resolved.digest(),
        config: resolved.entries.clone(),
    };
    let started = Instant::now();
    let every = (steps / 20).max(1);
    pretrain_run(&train, &ds, Some(&out), |r| {
        if r.step % every == 0 || r.step == steps {
            eprintln!(
                "step {:>6}/{steps}  lr {:.4}  tau {:.5}  loss {:.5}  ({:.0} s)",
                r.step,
                r.lr,
                r.tau,
                r.total,
                started.elapsed().as_secs_f64()
            );
        }
    })?;
    println!("{}", dir.join("final.ckpt").display());
    Ok(())
}

fn parse_stage_list(text: &str, stages: usize) -> Result<Vec<usize>> {
    if text.trim() == "all" {
        return Ok((1..=stages).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let s: usize = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad stage `{}`: expected `all` or numbers 1..={stages}", part.trim())))?;
        if s == 0 || s > stages {
            return Err(Error::StageOutOfRange { stage: s, stages }.into());
        }
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let ckpt = open_checkpoint(&a.ckpt)?;
    let resolved = build_config(Some(&ckpt), &a.common, "probe.seeds")?.resolve()?;
    let arch = &resolved.train.arch;
    let stages = parse_stage_list(&a.stage, arch.stages())?;
    let dir = output_dir(&a.common, Some(&a.ckpt));
    prepare_dir(&dir, &resolved, "probe.cfg")?;
    let ds = resolved.data.load()?;

    let mut csv = String::from("stage,seed,accuracy\n");
    for &stage in &stages {
        let feats = extract_features(&ckpt.online, arch, stage, &ds)?;
        for &seed in &resolved.probe_seeds {
            let cfg = lsn_core::eval::ProbeConfig { seed, ..resolved.probe.clone() };
            let r = linear_probe(&feats, &ds.labels, ds.num_classes, &cfg)?;
            eprintln!("stage {stage} seed {seed}: {:.4} ({} train / {} val)", r.accuracy, r.train_size, r.val_size);
            writeln!(csv, "{stage},{seed},{}", r.accuracy)?;
        }
    }
    write_file(&dir.join("probes.csv"), &csv)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ckpt = match (&a.ckpt, a.kind) {
        (Some(p), _) => Some(open_checkpoint(p)?),
        (None, Kind::Theorem1) => None,
        (None, k) => return Err(usage(format!("analyze {} needs --ckpt", k.name()))),
    };
    let resolved = build_config(ckpt.as_ref(), &a.common, "run.seed")?.resolve()?;
    let dir = output_dir(&a.common, a.ckpt.as_deref());
    prepare_dir(&dir, &resolved, &format!("analyze_{}.cfg", a.kind.name()))?;
    let arch = &resolved.train.arch;
    let seed = resolved.train.seed;

    match (a.kind, ckpt) {
        (Kind::Theorem1, _) => {
            let mut csv = String::from("collapsed_stage,stage,constant\n");
            let mut failed = Vec::new();
            for l in 1..=arch.stages() {
                let r = theorem1_probe(arch, seed, l, 8)?;
                for (m, c) in r.constant.iter().enumerate() {
                    writeln!(csv, "{l},{},{c}", m + 1)?;
                }
                let verdict = if r.holds { "holds" } else { "FAILS" };
                eprintln!("stage {l} zeroed: constant {:?}, {verdict}", r.constant);
                if !r.holds {
                    failed.push(l);
                }
            }
            write_file(&dir.join("theorem1.csv"), &csv)?;
            if !failed.is_empty() {
                bail!("collapse nesting fails for zeroed stages {failed:?}");
            }
        }
        (Kind::Dist, Some(ckpt)) => {
            let stages = parse_stage_list(a.stages.as_deref().unwrap_or("all"), arch.stages())?;
            let ds = resolved.data.load()?;
            let n = a.n.unwrap_or(500.min(ds.len()));
            let stats = view_distance_stats(&ckpt.online, arch, &ds, &stages, n, &resolved.train.aug_a, seed)?;
            let mut csv = String::from("stage,sample,distance\n");
            for s in &stats {
                for (i, d) in s.samples.iter().zip(&s.distances) {
                    writeln!(csv, "{},{i},{d}", s.stage)?;
                }
                eprintln!(
                    "stage {}: min {:.4} q25 {:.4} median {:.4} q75 {:.4} max {:.4}",
                    s.stage, s.min, s.q25, s.median, s.q75, s.max
                );
            }
            write_file(&dir.join("distances.csv"), &csv)?;
        }
        (Kind::Grad, Some(ckpt)) => {
            let level = a.level.unwrap_or(arch.stages());
            arch.check_stage(level)?;
            if a.samples == 0 {
                return Err(usage("--samples must be at least 1"));
            }
            let ds = resolved.data.load()?;
            if a.samples > ds.len() {
                return Err(Error::InsufficientSamples { needed: a.samples, got: ds.len() }.into());
            }
            let indices: Vec<usize> = (0..a.samples).collect();
            let workers = ViewWorkers::new(worker_threads(resolved.train.threads)?)?;
            let (xa, xb) = workers.prepare(&ds, &indices, &resolved.train.aug_a, &resolved.train.aug_b, seed, 0);
            let attr = gradient_attribution(&ckpt.online, &ckpt.target, &resolved.train, &xa, &xb, level, 1)?;
            for (i, map) in attr.maps.iter().enumerate() {
                let path = dir.join(format!("grad_L{level}_s{i}.pgm"));
                write_pgm(&path, attr.side, attr.side, &to_gray(map))?;
            }
            eprintln!("wrote {} maps of {}x{} for level {level}", attr.maps.len(), attr.side, attr.side);
        }
        (Kind::Collapse, Some(ckpt)) => {
            let ds = resolved.data.load()?;
            let n = a.n.unwrap_or(1000).min(ds.len());
            if n < MIN_COLLAPSE_SAMPLES {
                return Err(Error::InsufficientSamples { needed: MIN_COLLAPSE_SAMPLES, got: n }.into());
            }
            let emb = top_embeddings(&ckpt.online, arch, &ds.truncated(n))?;
            let r = collapse_metric(&emb)?;
            let csv = format!(
                "samples,dims,mean_std,threshold,collapsed\n{},{},{},{},{}\n",
                r.samples, r.dims, r.mean_std, r.threshold, r.collapsed
            );
            write_file(&dir.join("collapse.csv"), &csv)?;
            eprintln!(
                "mean std {:.5} vs threshold {:.5}: {}",
                r.mean_std,
                r.threshold,
                if r.collapsed { "collapsed" } else { "not collapsed" }
            );
        }
        (_, None) => unreachable!("checked above"),
    }
    Ok(())
}
