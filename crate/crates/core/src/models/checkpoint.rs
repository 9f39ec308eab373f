//! Checkpoint format:
//!
//! ```text
//! b"DFLCKPT\0"                 8-byte magic
//! u32 little-endian            header length in bytes
//! header                       UTF-8 JSON, see [`CheckpointHeader`]
//! f64 little-endian * full_len parameter vector in storage order
//! ```

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{Component, ParamVector};
use super::single_branch::{SingleBranchArch, SingleBranchModel};
use super::two_branch::{ModelSpec, TwoBranchArch, TwoBranchModel};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DFLCKPT\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TwoBranch,
    SingleBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: ModelKind,
    pub spec: ModelSpec,
    pub full_len: usize,
    pub invariant_len: usize,
    pub specific_len: usize,
}

fn write_raw<W: Write, S: Scalar>(mut w: W, header: &CheckpointHeader, params: &[S]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for &p in params {
        w.write_all(&p.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Reads the header and the raw parameter array.
pub fn read_checkpoint<R: Read, S: Scalar>(mut r: R) -> Result<(CheckpointHeader, ParamVector<S>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return invalid("not a DFL checkpoint");
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut values = Vec::with_capacity(header.full_len);
    let mut buf = [0u8; 8];
    for _ in 0..header.full_len {
        r.read_exact(&mut buf)?;
        values.push(S::lit(f64::from_le_bytes(buf)));
    }
    if r.read(&mut buf)? != 0 {
        return invalid("trailing bytes after parameter array");
    }
    Ok((header, ParamVector::new(values, Component::Full)))
}

pub fn write_two_branch<W: Write, S: Scalar>(w: W, model: &TwoBranchModel<S>) -> Result<()> {
    let arch = model.arch();
    let header = CheckpointHeader {
        version: 1,
        kind: ModelKind::TwoBranch,
        spec: arch.spec.clone(),
        full_len: arch.full_len(),
        invariant_len: arch.masks().invariant().len(),
        specific_len: arch.masks().specific().len(),
    };
    write_raw(w, &header, model.params())
}

pub fn read_two_branch<R: Read, S: Scalar>(r: R) -> Result<TwoBranchModel<S>> {
    let (header, params) = read_checkpoint(r)?;
    if header.kind != ModelKind::TwoBranch {
        return invalid("checkpoint holds a single-branch model");
    }
    let arch = TwoBranchArch::new(header.spec)?;
    if arch.masks().invariant().len() != header.invariant_len {
        return invalid("partition sizes in header do not match architecture");
    }
    TwoBranchModel::unflatten(arch, &params)
}

pub fn write_single_branch<W: Write, S: Scalar>(w: W, model: &SingleBranchModel<S>) -> Result<()> {
    let arch = model.arch();
    let header = CheckpointHeader {
        version: 1,
        kind: ModelKind::SingleBranch,
        spec: arch.spec.clone(),
        full_len: arch.full_len(),
        invariant_len: arch.full_len(),
        specific_len: 0,
    };
    write_raw(w, &header, model.params())
}

pub fn read_single_branch<R: Read, S: Scalar>(r: R) -> Result<SingleBranchModel<S>> {
    let (header, params) = read_checkpoint(r)?;
    if header.kind != ModelKind::SingleBranch {
        return invalid("checkpoint holds a two-branch model");
    }
    let arch: Arc<SingleBranchArch> = SingleBranchArch::new(header.spec)?;
    let mut model = SingleBranchModel::init(arch, 0);
    model.set_params(&params)?;
    Ok(model)
}
