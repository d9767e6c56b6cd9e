//! Plain-text parameter checkpoints.
//!
//! The format is line oriented and versioned. Values print with Rust's
//! shortest round-trip float formatting, so a save/load cycle reproduces
//! every bit, and rerunning a deterministic training run reproduces the
//! file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::optim::ParamSet;
use crate::numerics::tensor::Tensor;

const HEADER: &str = "cascadet checkpoint v1";

fn join_floats(values: &[f64]) -> String {
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&v.to_string());
    }
    out
}

/// Serialize parameters (values and momentum buffers) to a string.
pub fn to_string(params: &ParamSet) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(&format!("params {}\n", params.len()));
    for p in params.iter() {
        out.push_str(&format!("name {}\n", p.name));
        let dims: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        out.push_str(&format!("shape {}\n", dims.join(" ")));
        out.push_str(&format!("values {}\n", join_floats(p.value.data())));
        out.push_str(&format!("velocity {}\n", join_floats(&p.velocity)));
    }
    out
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, to_string(params))?;
    Ok(())
}

fn parse_floats(line: &str, tag: &str, expected: usize) -> Result<Vec<f64>> {
    let body = line
        .strip_prefix(tag)
        .and_then(|rest| rest.strip_prefix(' ').or(Some(rest).filter(|r| r.is_empty())))
        .ok_or_else(|| Error::Checkpoint(format!("expected `{tag}` line, got `{line}`")))?;
    let values: Vec<f64> = body
        .split_ascii_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("bad float `{tok}` in `{tag}` line")))
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "`{tag}` line has {} values, shape wants {expected}",
            values.len()
        )));
    }
    Ok(values)
}

/// Parse a checkpoint back into a fresh parameter set, in file order.
pub fn from_str(text: &str) -> Result<ParamSet> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty file".into()))?;
    if header != HEADER {
        return Err(Error::Checkpoint(format!(
            "unsupported header `{header}`, expected `{HEADER}`"
        )));
    }
    let count_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing params line".into()))?;
    let count: usize = count_line
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad params line `{count_line}`")))?;

    let mut params = ParamSet::new();
    for i in 0..count {
        let mut next = |what: &str| -> Result<&str> {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("truncated file: missing {what} for parameter {i}")))
        };
        let name = next("name")?
            .strip_prefix("name ")
            .ok_or_else(|| Error::Checkpoint(format!("expected `name` line for parameter {i}")))?
            .to_string();
        let shape_line = next("shape")?;
        let shape: Vec<usize> = shape_line
            .strip_prefix("shape")
            .ok_or_else(|| Error::Checkpoint(format!("expected `shape` line for `{name}`")))?
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad dimension `{tok}` for `{name}`")))
            })
            .collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let values = parse_floats(next("values")?, "values", len)?;
        let velocity = parse_floats(next("velocity")?, "velocity", len)?;
        let idx = params.add(name, Tensor::new(shape, values)?)?;
        params.get_mut(idx).velocity = velocity;
    }
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() {
            return Err(Error::Checkpoint(format!("trailing content `{extra}`")));
        }
    }
    Ok(params)
}

pub fn load(path: &Path) -> Result<ParamSet> {
    from_str(&fs::read_to_string(path)?)
}

/// Copy values and velocities from `loaded` into `target`, matching by
/// name. Both sets must contain exactly the same names and shapes; a
/// mismatch means the checkpoint belongs to a different configuration.
pub fn apply(target: &mut ParamSet, loaded: &ParamSet) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model wants {}",
            loaded.len(),
            target.len()
        )));
    }
    for lp in loaded.iter() {
        let idx = target.index_of(&lp.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter `{}` not in model", lp.name))
        })?;
        let tp = target.get_mut(idx);
        if tp.value.shape() != lp.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?} in checkpoint, model wants {:?}",
                lp.name,
                lp.value.shape(),
                tp.value.shape()
            )));
        }
        tp.value = lp.value.clone();
        tp.velocity = lp.velocity.clone();
    }
    Ok(())
}
