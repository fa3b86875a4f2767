//! Plain-text run configuration: `key = value` lines, `#` comments, dotted
//! sections. Every key has a default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugPolicy;
use crate::backbone::ArchConfig;
use crate::data::{load_cifar10, synth_dataset, Dataset};
use crate::eval::ProbeConfig;
use crate::optim::OptimizerKind;
use crate::ssl::{HeadConfig, LadderConfig, Preset};
use crate::train::{OptimConfig, TargetBn, TrainConfig};
use crate::{Error, Result};

/// Every accepted key with its default. Empty `arch.*` defaults fall back
/// to the chosen `arch.preset`; an empty `ladder.weights` derives the
/// weights from `ladder.weight_w`.
const KEYS: &[(&str, &str)] = &[
    ("data.source", "synth"),
    ("data.path", ""),
    ("data.n", "2048"),
    ("data.num_classes", "10"),
    ("data.seed", "0"),
    ("arch.preset", "default"),
    ("arch.stem_channels", ""),
    ("arch.stage_channels", ""),
    ("arch.blocks_per_stage", ""),
    ("arch.bn_momentum", ""),
    ("arch.bn_eps", ""),
    ("head.hidden", "256"),
    ("head.embed", "64"),
    ("ladder.preset", "ladder_byol"),
    ("ladder.weight_w", "0.5"),
    ("ladder.weights", ""),
    ("ladder.tau_base", "0.99"),
    ("ladder.symmetrize", "true"),
    ("optim.kind", "sgd"),
    ("optim.lr", "0.5"),
    ("optim.momentum", "0.9"),
    ("optim.weight_decay", "0.0001"),
    ("optim.epochs", "40"),
    ("optim.batch_size", "256"),
    ("optim.target_bn", "eval"),
    ("aug.crop_min", "0.2"),
    ("aug.flip_p", "0.5"),
    ("aug.jitter_p", "0.8"),
    ("aug.brightness", "0.4"),
    ("aug.contrast", "0.4"),
    ("aug.saturation", "0.4"),
    ("aug.hue", "0.1"),
    ("aug.gray_p", "0.2"),
    ("run.seed", "0"),
    ("run.out_dir", "runs/default"),
    ("run.checkpoint_every", "10"),
    ("run.threads", "0"),
    ("probe.seeds", "0,1,2"),
    ("probe.epochs", "30"),
    ("probe.lr", "1"),
    ("probe.batch_size", "256"),
    ("probe.train_fraction", "0.8"),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Raw key/value settings, before interpretation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{}`", n + 1, raw.trim())))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse_str(&text)
    }

    /// Rebuilds a configuration from stored `(key, value)` pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a (String, String)>) -> Result<Self> {
        let mut cfg = RunConfig::new();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Current value, explicit or default.
    pub fn get(&self, key: &str) -> Result<&str> {
        if let Some(v) = self.values.get(key) {
            return Ok(v);
        }
        KEYS.iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Keys given explicitly, with their values.
    pub fn explicit(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key)?;
        v.parse().map_err(|e: T::Err| invalid(key, v, e))
    }

    fn parse_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T>
    where
        T::Err: Display,
    {
        if self.get(key)?.is_empty() {
            Ok(fallback)
        } else {
            self.parse(key)
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let v = self.get(key)?;
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e: T::Err| invalid(key, v, e)))
            .collect()
    }

    fn arch(&self) -> Result<ArchConfig> {
        let base = match self.get("arch.preset")? {
            "default" => ArchConfig::default(),
            "compact" => ArchConfig::compact(),
            "tiny" => ArchConfig::tiny(),
            other => return Err(invalid("arch.preset", other, "expected default, compact or tiny")),
        };
        let stage_channels = if self.get("arch.stage_channels")?.is_empty() {
            base.stage_channels.clone()
        } else {
            self.list("arch.stage_channels")?
        };
        let arch = ArchConfig {
            stem_channels: self.parse_or("arch.stem_channels", base.stem_channels)?,
            stage_channels,
            blocks_per_stage: self.parse_or("arch.blocks_per_stage", base.blocks_per_stage)?,
            bn_momentum: self.parse_or("arch.bn_momentum", base.bn_momentum)?,
            bn_eps: self.parse_or("arch.bn_eps", base.bn_eps)?,
            ..base
        };
        arch.validate().map_err(|e| invalid("arch", &format!("{arch:?}"), e))?;
        Ok(arch)
    }

    fn ladder(&self, stages: usize) -> Result<(Preset, LadderConfig)> {
        let preset: Preset = self.parse("ladder.preset")?;
        let w: f64 = self.parse("ladder.weight_w")?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(invalid("ladder.weight_w", self.get("ladder.weight_w")?, "must be finite and >= 0"));
        }
        let mut ladder = LadderConfig::preset(preset, stages, w);
        if !self.get("ladder.weights")?.is_empty() {
            ladder.weights = self.list("ladder.weights")?;
        }
        ladder.tau_base = self.parse("ladder.tau_base")?;
        ladder.symmetrize = self.parse("ladder.symmetrize")?;
        ladder
            .validate(stages)
            .map_err(|e| invalid("ladder.weights", self.get("ladder.weights").unwrap_or(""), e))?;
        Ok((preset, ladder))
    }

    fn aug(&self, size: usize) -> Result<AugPolicy> {
        let policy = AugPolicy {
            crop_scale: (self.parse("aug.crop_min")?, 1.0),
            out_size: size,
            flip_p: self.parse("aug.flip_p")?,
            jitter_p: self.parse("aug.jitter_p")?,
            brightness: self.parse("aug.brightness")?,
            contrast: self.parse("aug.contrast")?,
            saturation: self.parse("aug.saturation")?,
            hue: self.parse("aug.hue")?,
            gray_p: self.parse("aug.gray_p")?,
            ..AugPolicy::default()
        };
        policy.validate().map_err(|e| invalid("aug", &format!("{policy:?}"), e))?;
        Ok(policy)
    }

    /// Interprets every key. Errors name the offending key.
    pub fn resolve(&self) -> Result<Resolved> {
        let arch = self.arch()?;
        let (preset, ladder) = self.ladder(arch.stages())?;
        let aug = self.aug(arch.input_size)?;
        let train = TrainConfig {
            heads: HeadConfig {
                hidden: positive(self, "head.hidden")?,
                embed: positive(self, "head.embed")?,
            },
            ladder,
            optim: OptimConfig {
                kind: self.parse::<OptimizerKind>("optim.kind")?,
                lr: self.parse("optim.lr")?,
                momentum: self.parse("optim.momentum")?,
                weight_decay: self.parse("optim.weight_decay")?,
            },
            epochs: positive(self, "optim.epochs")?,
            batch_size: positive(self, "optim.batch_size")?,
            seed: self.parse("run.seed")?,
            target_bn: self.parse::<TargetBn>("optim.target_bn")?,
            aug_a: aug.clone(),
            aug_b: aug,
            checkpoint_every: self.parse("run.checkpoint_every")?,
            threads: self.parse("run.threads")?,
            arch,
        };
        train.validate().map_err(|e| invalid("optim", "", e))?;

        let data = match self.get("data.source")? {
            "synth" => DataSpec::Synth {
                n: positive(self, "data.n")?,
                num_classes: self.parse("data.num_classes")?,
                seed: self.parse("data.seed")?,
            },
            "cifar10" => {
                let path = self.get("data.path")?;
                if path.is_empty() {
                    return Err(invalid("data.path", path, "required when data.source = cifar10"));
                }
                DataSpec::Cifar10 {
                    dir: PathBuf::from(path),
                    n: self.parse("data.n")?,
                }
            }
            other => return Err(invalid("data.source", other, "expected synth or cifar10")),
        };

        let probe = ProbeConfig {
            epochs: positive(self, "probe.epochs")?,
            lr: self.parse("probe.lr")?,
            batch_size: positive(self, "probe.batch_size")?,
            train_fraction: self.parse("probe.train_fraction")?,
            seed: 0,
        };
        let fraction = probe.train_fraction;
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(invalid("probe.train_fraction", self.get("probe.train_fraction")?, "must lie in (0, 1)"));
        }

        let mut entries = Vec::with_capacity(KEYS.len());
        for (key, _) in KEYS {
            let value = match *key {
                "arch.stem_channels" => train.arch.stem_channels.to_string(),
                "arch.stage_channels" => join(&train.arch.stage_channels),
                "arch.blocks_per_stage" => train.arch.blocks_per_stage.to_string(),
                "arch.bn_momentum" => train.arch.bn_momentum.to_string(),
                "arch.bn_eps" => train.arch.bn_eps.to_string(),
                "ladder.weights" => join(&train.ladder.weights),
                _ => self.get(key)?.to_string(),
            };
            entries.push((key.to_string(), value));
        }

        Ok(Resolved {
            train,
            preset,
            data,
            probe,
            probe_seeds: self.list("probe.seeds")?,
            out_dir: PathBuf::from(self.get("run.out_dir")?),
            entries,
        })
    }
}

fn invalid(key: &str, value: &str, reason: impl Display) -> Error {
    Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn positive(cfg: &RunConfig, key: &str) -> Result<usize> {
    let v: usize = cfg.parse(key)?;
    if v == 0 {
        return Err(invalid(key, "0", "must be positive"));
    }
    Ok(v)
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Where training and probing images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synth { n: usize, num_classes: usize, seed: u64 },
    /// The first `n` training images (all of them when `n` is 0).
    Cifar10 { dir: PathBuf, n: usize },
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Synth { n, num_classes, seed } => synth_dataset(*n, *num_classes, *seed),
            DataSpec::Cifar10 { dir, n } => Ok(load_cifar10(dir)?.truncated(*n)),
        }
    }
}

/// A fully interpreted configuration.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub preset: Preset,
    pub data: DataSpec,
    /// Probe settings; the seed is taken from `probe_seeds`.
    pub probe: ProbeConfig,
    pub probe_seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Final value of every key, in table order.
    pub entries: Vec<(String, String)>,
}

impl Resolved {
    /// `key = value` text that reproduces this configuration when parsed.
    pub fn snapshot(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// SHA-256 of the snapshot, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.snapshot().as_bytes()))
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}
