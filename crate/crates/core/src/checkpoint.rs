//! Binary checkpoints: parameters, optimizer velocities, epoch counter and
//! the run configuration that built the model.
//!
//! Layout (little endian): magic `REAPSCK1`, `u32` version, `u32` entry
//! count, then per entry `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims, `f32` data. A `u32`-length-prefixed config text closes the file.

use crate::config::{ConfigError, RunConfig};
use crate::model::ReapsModel;
use crate::tensor::{Tensor, TensorError};
use crate::train::{TrainError, Trainer};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"REAPSCK1";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity/";
const EPOCH_ENTRY: &str = "meta/epoch";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: embedded config: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: TensorError },
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialises a trainer and the configuration it was built from.
pub fn encode(run: &RunConfig, trainer: &Trainer) -> Vec<u8> {
    let params = &trainer.model.params;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, (2 * params.len() + 1) as u32);
    for (id, name, t) in params.iter() {
        put_entry(&mut out, name, t.shape(), t.data().iter().copied());
        let vel = trainer.optimizer.velocity(id.index());
        put_entry(
            &mut out,
            &format!("{VELOCITY_PREFIX}{name}"),
            t.shape(),
            vel.iter().copied(),
        );
    }
    put_entry(&mut out, EPOCH_ENTRY, &[1], std::iter::once(trainer.epoch as f32));
    let mut cfg = run.clone();
    cfg.train = trainer.config.clone();
    let text = cfg.to_text();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    out
}

pub fn save(path: &Path, run: &RunConfig, trainer: &Trainer) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&encode(run, trainer)).map_err(io_err)?;
    f.sync_all().map_err(io_err)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        let path = self.path.to_path_buf();
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt {
            path,
            msg: "name is not UTF-8".into(),
        })
    }
}

/// Rebuilds a trainer from bytes produced by [`encode`]. `path` is only
/// used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(RunConfig, Trainer), CheckpointError> {
    let corrupt = |msg: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader { bytes, pos: 8, path };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = r.string(len)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, shape, data));
    }
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let run = RunConfig::from_text(&text).map_err(|source| CheckpointError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    let model_err = |source| CheckpointError::Model {
        path: path.to_path_buf(),
        source,
    };
    let model = ReapsModel::<f32>::new(&run.model, run.train.seed).map_err(model_err)?;
    let mut trainer = Trainer::new(model, run.train.clone()).map_err(|e| match e {
        TrainError::Tensor(source) => model_err(source),
        other => corrupt(other.to_string()),
    })?;
    let mut seen = vec![[false; 2]; trainer.model.params.len()];
    let mut epoch = None;
    for (name, shape, data) in entries {
        if name == EPOCH_ENTRY {
            epoch = data.first().map(|&e| e as usize);
            continue;
        }
        let (param_name, slot) = match name.strip_prefix(VELOCITY_PREFIX) {
            Some(rest) => (rest, 1),
            None => (name.as_str(), 0),
        };
        let id = trainer
            .model
            .params
            .find(param_name)
            .ok_or_else(|| corrupt(format!("unknown entry `{name}`")))?;
        let expected = trainer.model.params.get(id).shape().to_vec();
        if shape != expected {
            return Err(corrupt(format!(
                "entry `{name}` has shape {shape:?}, model expects {expected:?}"
            )));
        }
        if slot == 0 {
            let t = Tensor::new(&shape, data).map_err(model_err)?;
            *trainer.model.params.get_mut(id) = t.with_grad();
        } else {
            trainer.optimizer.velocity_mut(id.index()).copy_from_slice(&data);
        }
        seen[id.index()][slot] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s[0] || !s[1]) {
        let name = trainer.model.params.name(trainer.model.params.ids().nth(i).expect("index"));
        return Err(corrupt(format!("missing entry for parameter `{name}`")));
    }
    trainer.epoch = epoch.ok_or_else(|| corrupt(format!("missing `{EPOCH_ENTRY}`")))?;
    trainer.optimizer.learning_rate = crate::train::lr_schedule(trainer.epoch, &trainer.config);
    Ok((run, trainer))
}

pub fn load(path: &Path) -> Result<(RunConfig, Trainer), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode(&bytes, path)
}
