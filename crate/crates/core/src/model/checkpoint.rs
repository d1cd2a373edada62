//! Parameter checkpoints: a text manifest plus a little-endian f64 blob.
//!
//! Manifest grammar, one tensor per line after the header:
//!
//! ```text
//! # meshvit-manifest v1
//! <name> <d0>x<d1>... f64 <byte offset>
//! ```

use std::fs;
use std::path::Path;

use super::config::VitConfig;
use super::params::{param_specs, VitParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "# meshvit-manifest v1";
pub const MANIFEST_FILE: &str = "params.manifest";
pub const BLOB_FILE: &str = "params.bin";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Manifest text for `cfg`, derived from shapes alone.
pub fn manifest_for(cfg: &VitConfig) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    let mut offset = 0u64;
    for s in param_specs(cfg) {
        out.push_str(&format!("{} {} f64 {}\n", s.name, shape_str(&s.shape), offset));
        offset += s.numel() * 8;
    }
    out
}

pub fn write_checkpoint(params: &VitParams, cfg: &VitConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = manifest_for(cfg);
    let mut blob = Vec::with_capacity(params.numel() as usize * 8);
    let named = params.named();
    let specs = param_specs(cfg);
    if named.len() != specs.len() {
        return Err(Error::Contract("parameters do not match config".into()));
    }
    for ((name, t), s) in named.iter().zip(&specs) {
        if *name != s.name || t.shape() != s.shape.as_slice() {
            return Err(Error::Contract(format!("tensor {name} does not match config")));
        }
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn read_checkpoint(cfg: &VitConfig, dir: &Path) -> Result<VitParams> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    if manifest != manifest_for(cfg) {
        return Err(Error::Config("checkpoint manifest does not match config".into()));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut cursor = 0usize;
    let params = VitParams::build(cfg, |s| {
        let n = s.numel() as usize;
        let data = blob
            .get(cursor..cursor + n * 8)
            .map(|bytes| {
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            })
            .unwrap_or_default();
        cursor += n * 8;
        Tensor::new(&s.shape, data).unwrap_or_else(|_| Tensor::zeros(&[0]))
    });
    if cursor != blob.len() {
        return Err(Error::Config(format!("blob holds {} bytes, manifest {}", blob.len(), cursor)));
    }
    params
}
