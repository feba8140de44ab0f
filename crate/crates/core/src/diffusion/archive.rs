//! Binary archive for [`InversionResult`]s so edit sweeps can reuse them.
//!
//! Layout, all little-endian:
//! magic `LNCINV01`, u32 steps, u32 rank, rank x u32 shape, u32 cond_len,
//! f64 beta_start, f64 beta_end, f64 guidance, then the (steps + 1) latents,
//! the `steps` null conditionings and the `steps` step errors as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::backends::{Conditioning, Latent};
use crate::diffusion::{make_schedule, InversionResult};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LNCINV01";

/// Manifest entry pointing at an inversion archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRef {
    pub id: String,
    pub sample_id: String,
    /// Relative to the run's output directory.
    pub path: String,
    pub steps: usize,
    pub step_errors: Vec<f64>,
}

pub fn save_inversion(path: &Path, inv: &InversionResult) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let first = inv
        .trajectory
        .first()
        .ok_or_else(|| Error::Archive("empty trajectory".into()))?;
    let cond_len = inv.null_embeddings.first().map_or(0, |c| c.len());
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(inv.steps() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(first.shape.len() as u32).map_err(io)?;
    for d in &first.shape {
        w.write_u32::<LittleEndian>(*d as u32).map_err(io)?;
    }
    w.write_u32::<LittleEndian>(cond_len as u32).map_err(io)?;
    w.write_f64::<LittleEndian>(inv.schedule.beta_start).map_err(io)?;
    w.write_f64::<LittleEndian>(inv.schedule.beta_end).map_err(io)?;
    w.write_f64::<LittleEndian>(inv.guidance_scale).map_err(io)?;
    for z in &inv.trajectory {
        for v in &z.data {
            w.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
    }
    for n in &inv.null_embeddings {
        for v in &n.0 {
            w.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
    }
    for e in &inv.step_errors {
        w.write_f64::<LittleEndian>(*e).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_inversion(path: &Path) -> Result<InversionResult> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Archive(format!("{}: bad magic", path.display())));
    }
    let steps = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let shape = (0..rank)
        .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io)?;
    let cond_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let beta_start = r.read_f64::<LittleEndian>().map_err(io)?;
    let beta_end = r.read_f64::<LittleEndian>().map_err(io)?;
    let guidance_scale = r.read_f64::<LittleEndian>().map_err(io)?;
    let latent_len: usize = shape.iter().product();
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)
    };
    let mut trajectory = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        trajectory.push(Latent::new(shape.clone(), read_vec(latent_len)?)?);
    }
    let mut null_embeddings = Vec::with_capacity(steps);
    for _ in 0..steps {
        null_embeddings.push(Conditioning(read_vec(cond_len)?));
    }
    let step_errors = read_vec(steps)?;
    Ok(InversionResult {
        schedule: make_schedule(steps, beta_start, beta_end)?,
        guidance_scale,
        trajectory,
        null_embeddings,
        step_errors,
        loss_history: Vec::new(),
    })
}
