//! Checkpoints: parameters as f32 XTNS entries in sorted name order plus a
//! `__meta__` entry `[config hash, seed, step]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::xtns::{Container, XtnsData, XtnsEntry};

pub const META: &str = "__meta__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub seed: u64,
    pub step: usize,
}

pub fn checkpoint_container(p: &Pipeline, step: usize) -> Container {
    let mut c = Container::new();
    for name in p.params.sorted_names() {
        let t = p.params.get(name).expect("listed name");
        c.push(XtnsEntry::f32(name, t.shape(), t.data().iter().map(|&v| v as f32).collect()));
    }
    c.push(XtnsEntry::i64(
        META,
        &[3],
        vec![p.config.model_hash() as i64, p.seed as i64, step as i64],
    ));
    c
}

pub fn checkpoint_bytes(p: &Pipeline, step: usize) -> Result<Vec<u8>> {
    checkpoint_container(p, step).encode()
}

pub fn save_checkpoint(p: &Pipeline, step: usize, path: &Path) -> Result<()> {
    checkpoint_container(p, step).write(path)
}

fn read_meta(c: &Container) -> Result<CheckpointMeta> {
    match c.get(META).map(|e| &e.data) {
        Some(XtnsData::I64(v)) if v.len() == 3 => Ok(CheckpointMeta {
            config_hash: v[0] as u64,
            seed: v[1] as u64,
            step: v[2] as usize,
        }),
        _ => Err(Error::Format(format!("checkpoint has no valid `{META}` entry"))),
    }
}

/// Restores parameters from `c` after checking the config hash and that
/// every parameter is present with the right shape.
pub fn restore(p: &mut Pipeline, c: &Container) -> Result<CheckpointMeta> {
    let meta = read_meta(c)?;
    let expected = p.config.model_hash();
    if meta.config_hash != expected {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: meta.config_hash,
        });
    }
    let names: Vec<String> = p.params.sorted_names().into_iter().map(String::from).collect();
    for entry in &c.entries {
        if entry.name != META && !p.params.contains(&entry.name) {
            return Err(Error::Format(format!("checkpoint has unknown parameter `{}`", entry.name)));
        }
    }
    for name in names {
        let entry = c
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter `{name}`")))?;
        let t = p.params.get_mut(&name).expect("listed name");
        if entry.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the pipeline",
                entry.shape(),
                t.shape()
            )));
        }
        let XtnsData::F32(values) = &entry.data else {
            return Err(Error::Format(format!("parameter `{name}` is not f32")));
        };
        for (dst, &src) in t.data_mut().iter_mut().zip(values) {
            *dst = f64::from(src);
        }
    }
    Ok(meta)
}

pub fn load_checkpoint(p: &mut Pipeline, path: &Path) -> Result<CheckpointMeta> {
    restore(p, &Container::read(path)?)
}
