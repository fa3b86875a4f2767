//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LDRS" | version u32 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | rank u8 | extents u32 × rank | f32 payload
//! metadata len u32 | `key=value` lines
//! ```
//!
//! Tensor names carry a `online/`, `target/` or `momentum/` prefix. The
//! metadata holds the step, config digest, RNG state and every resolved
//! configuration entry as `config.<key>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use lsn_tensor::Tensor;

use crate::params::ParamStore;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LDRS";
pub const VERSION: u32 = 1;

const GROUPS: [&str; 3] = ["online", "target", "momentum"];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    /// Optimizer momentum buffers keyed by parameter name.
    pub momentum: ParamStore<f32>,
    /// Completed optimizer (and EMA) steps.
    pub step: u64,
    pub config_digest: String,
    pub rng_state: String,
    /// Resolved run configuration, `(key, value)` in key order.
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    fn groups(&self) -> [(&str, &ParamStore<f32>); 3] {
        [(GROUPS[0], &self.online), (GROUPS[1], &self.target), (GROUPS[2], &self.momentum)]
    }

    fn metadata(&self) -> Result<String> {
        let mut lines = vec![
            ("step".to_string(), self.step.to_string()),
            ("ema_step".to_string(), self.step.to_string()),
            ("config_digest".to_string(), self.config_digest.clone()),
            ("rng_state".to_string(), self.rng_state.clone()),
        ];
        lines.extend(self.config.iter().map(|(k, v)| (format!("config.{k}"), v.clone())));
        let mut out = String::new();
        for (k, v) in lines {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!("metadata entry `{k}` cannot be stored on one line")));
            }
            out.push_str(&format!("{k}={v}\n"));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count: usize = self.groups().iter().map(|(_, s)| s.len()).sum();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(count).expect("tensor count fits u32").to_le_bytes());
        for (group, store) in self.groups() {
            for (name, t) in store.iter() {
                let full = format!("{group}/{name}");
                let len = u16::try_from(full.len())
                    .map_err(|_| Error::Config(format!("tensor name too long: {full}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(u8::try_from(t.rank()).expect("rank fits u8"));
                for &e in t.shape() {
                    out.extend_from_slice(&u32::try_from(e).expect("extent fits u32").to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let meta = self.metadata()?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint { path: path.to_path_buf() });
        }
        let mut r = Reader { bytes, pos: 4, path };
        let version = r.u32()?;
        if version > VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: VERSION,
            });
        }
        if version == 0 {
            return Err(r.corrupt("version 0"));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let full = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| r.corrupt("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| r.corrupt(e.to_string()))?;
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| r.corrupt(format!("tensor `{full}` has no group prefix")))?;
            let store = match group {
                "online" => &mut ckpt.online,
                "target" => &mut ckpt.target,
                "momentum" => &mut ckpt.momentum,
                _ => return Err(r.corrupt(format!("unknown tensor group `{group}`"))),
            };
            if store.insert(name, tensor).is_some() {
                return Err(r.corrupt(format!("duplicate tensor `{full}`")));
            }
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| r.corrupt("metadata is not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut step = None;
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.corrupt(format!("metadata line `{line}`")))?;
            match k {
                "step" => step = Some(v.parse().map_err(|_| r.corrupt(format!("step `{v}`")))?),
                "ema_step" => {}
                "config_digest" => ckpt.config_digest = v.to_string(),
                "rng_state" => ckpt.rng_state = v.to_string(),
                _ => match k.strip_prefix("config.") {
                    Some(key) => ckpt.config.push((key.to_string(), v.to_string())),
                    None => return Err(r.corrupt(format!("unknown metadata key `{k}`"))),
                },
            }
        }
        ckpt.step = step.ok_or_else(|| r.corrupt("metadata lacks a step"))?;
        Ok(ckpt)
    }

    /// Value of one resolved configuration entry.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming onto {}", path.display()), e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            step: 12,
            config_digest: "abc".into(),
            rng_state: "seed=3".into(),
            config: vec![("run.seed".into(), "3".into())],
            ..Default::default()
        };
        c.online.insert("a.weight", Tensor::new([2, 1], vec![1.5, -0.0]).unwrap());
        c.online.insert("b.gamma", Tensor::new([1], vec![f32::MIN_POSITIVE]).unwrap());
        c.target.insert("a.weight", Tensor::new([2, 1], vec![0.25, 3.0]).unwrap());
        c.momentum.insert("a.weight", Tensor::zeros([2, 1]));
        c
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LDRS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        let back = Checkpoint::from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config_value("run.seed"), Some("3"));
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("m");
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::NotACheckpoint { .. })));
        for cut in [4, 5, 13, 40, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut], p), Err(Error::CorruptCheckpoint { .. })),
                "cut at {cut}"
            );
        }
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&newer, p), Err(Error::UnsupportedVersion { found: 2, .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer, p).is_err());
    }
}
