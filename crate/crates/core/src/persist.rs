//! Checkpoint and trace files.
//!
//! Checkpoint: magic `TRCK`, format version (u32), JSON descriptor (u32 length
//! prefix) carrying the model spec, step index (u64), step size (f64), then the
//! raw f64 parameters. Trace: magic `TRCE`, version, JSON header, record count
//! (u64), then `(t u64, eta f64, count u32, ids u32[count])` per step.
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ModelState};
use crate::training::{Checkpoint, StepRecord, TrainConfig, TrainingTrace};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRACE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDescriptor {
    spec: ModelSpec,
    epoch: usize,
    step_size_varied: bool,
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    config: TrainConfig,
    spec: ModelSpec,
    initial_loss: f64,
    epoch_losses: Vec<f64>,
}

fn check_version<R: Read>(r: &mut ByteReader<R>, expected: u32) -> Result<()> {
    let at = r.offset();
    let version = r.u32()?;
    if version != expected {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported format version {version}"),
        });
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(b"TRCK")?;
    binio::put_u32(w, CHECKPOINT_VERSION)?;
    binio::put_json(
        w,
        &CheckpointDescriptor {
            spec: ckpt.state.spec().clone(),
            epoch: ckpt.epoch,
            step_size_varied: ckpt.step_size_varied,
        },
    )?;
    binio::put_u64(w, ckpt.step)?;
    binio::put_f64(w, ckpt.step_size)?;
    for &p in ckpt.state.params() {
        binio::put_f64(w, p)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = ByteReader::new(r);
    r.magic(b"TRCK")?;
    check_version(&mut r, CHECKPOINT_VERSION)?;
    let desc: CheckpointDescriptor = r.json()?;
    desc.spec
        .validate()
        .map_err(|e| r.parse_error(format!("invalid model spec: {e}")))?;
    let step = r.u64()?;
    let step_size = r.f64()?;
    let params = (0..desc.spec.num_params())
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    r.expect_eof()?;
    let state = ModelState::from_params(&desc.spec, params)?;
    Ok(Checkpoint {
        step,
        epoch: desc.epoch,
        state,
        step_size,
        step_size_varied: desc.step_size_varied,
    })
}

pub fn write_trace<W: Write>(w: &mut W, trace: &TrainingTrace) -> Result<()> {
    w.write_all(b"TRCE")?;
    binio::put_u32(w, TRACE_VERSION)?;
    binio::put_json(
        w,
        &TraceHeader {
            config: trace.config.clone(),
            spec: trace.spec.clone(),
            initial_loss: trace.initial_loss,
            epoch_losses: trace.epoch_losses.clone(),
        },
    )?;
    binio::put_u64(w, trace.steps.len() as u64)?;
    for rec in &trace.steps {
        binio::put_u64(w, rec.step)?;
        binio::put_f64(w, rec.step_size)?;
        binio::put_u32(w, rec.example_ids.len() as u32)?;
        for &id in &rec.example_ids {
            binio::put_u32(w, id)?;
        }
    }
    Ok(())
}

pub fn read_trace<R: Read>(r: R) -> Result<TrainingTrace> {
    let mut r = ByteReader::new(r);
    r.magic(b"TRCE")?;
    check_version(&mut r, TRACE_VERSION)?;
    let header: TraceHeader = r.json()?;
    let count = r.u64()?;
    let mut steps = Vec::new();
    for _ in 0..count {
        let step = r.u64()?;
        let step_size = r.f64()?;
        let n = r.u32()? as usize;
        let example_ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        steps.push(StepRecord {
            step,
            example_ids,
            step_size,
        });
    }
    r.expect_eof()?;
    Ok(TrainingTrace {
        config: header.config,
        spec: header.spec,
        steps,
        initial_loss: header.initial_loss,
        epoch_losses: header.epoch_losses,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

pub fn save_trace(path: &Path, trace: &TrainingTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(&mut w, trace)?;
    w.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<TrainingTrace> {
    read_trace(BufReader::new(File::open(path)?))
}
