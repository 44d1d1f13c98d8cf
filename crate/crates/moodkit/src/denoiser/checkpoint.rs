//! Checkpoint container and its binary file format.
//!
//! Layout: magic "DENO0001", format version (u32), a length-prefixed JSON
//! header (architecture, training/scheduler/noise configs, bookkeeping),
//! then raw little-endian f32 parameter and optimizer-moment arrays plus
//! the loss history. Floats round-trip bit exactly.

use super::net::{model_layout, ArchConfig};
use super::{AdamState, DenoiserModel, TrainConfig};
use crate::diffusion::{SchedulerConfig, SimplexNoiseConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DENO0001";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub opt: AdamState,
    pub train: TrainConfig,
    pub scheduler: SchedulerConfig,
    pub noise: SimplexNoiseConfig,
    pub epochs_done: u32,
    pub loss_history: Vec<f32>,
}

impl Checkpoint {
    /// Error out if the checkpoint was trained against a different
    /// schedule than the caller expects.
    pub fn ensure_scheduler(&self, expected: &SchedulerConfig) -> Result<()> {
        if self.scheduler != *expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint schedule {:?} differs from expected {:?}",
                self.scheduler, expected
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    train: TrainConfig,
    scheduler: SchedulerConfig,
    noise: SimplexNoiseConfig,
    epochs_done: u32,
    n_params: u64,
    opt_step: u64,
    n_loss: u32,
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        arch: ckpt.model.arch.clone(),
        train: ckpt.train.clone(),
        scheduler: ckpt.scheduler,
        noise: ckpt.noise,
        epochs_done: ckpt.epochs_done,
        n_params: ckpt.model.params.len() as u64,
        opt_step: ckpt.opt.step,
        n_loss: ckpt.loss_history.len() as u32,
    };
    let json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(&json)?;
    write_f32s(&mut f, &ckpt.model.params)?;
    write_f32s(&mut f, &ckpt.opt.m)?;
    write_f32s(&mut f, &ckpt.opt.v)?;
    write_f32s(&mut f, &ckpt.loss_history)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "DENO0001",
        });
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    f.read_exact(&mut u32buf)?;
    let json_len = u32::from_le_bytes(u32buf) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let n = model_layout(&header.arch).total;
    if n as u64 != header.n_params {
        return Err(Error::CheckpointMismatch(format!(
            "architecture implies {} parameters but header declares {}",
            n, header.n_params
        )));
    }
    let params = read_f32s(&mut f, n)?;
    let m = read_f32s(&mut f, n)?;
    let v = read_f32s(&mut f, n)?;
    let loss_history = read_f32s(&mut f, header.n_loss as usize)?;
    let model = DenoiserModel::from_params(header.arch, params)?;
    Ok(Checkpoint {
        model,
        opt: AdamState { m, v, step: header.opt_step },
        train: header.train,
        scheduler: header.scheduler,
        noise: header.noise,
        epochs_done: header.epochs_done,
        loss_history,
    })
}
