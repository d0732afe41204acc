//! Checkpoints: a plain-text manifest (tensor names, shapes, dtype, byte
//! offsets, plus the architecture and training step) next to one
//! concatenated little-endian fp32 blob.

use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};

use super::{ArchConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub step: u64,
    pub arch: ArchConfig,
    pub seed: u64,
}

fn blob_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("manifest")
}

/// Write `<base>.manifest` and `<base>.bin`.
pub fn save_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    meta: &CheckpointMeta,
    base: &Path,
) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str("luminev-checkpoint v1\n");
    manifest.push_str(&format!("step {}\n", meta.step));
    manifest.push_str(&format!("seed {}\n", meta.seed));
    let widths: Vec<String> = meta.arch.widths.iter().map(|w| w.to_string()).collect();
    manifest.push_str(&format!("arch.widths {}\n", widths.join(",")));
    manifest.push_str(&format!("arch.heads {}\n", meta.arch.heads));
    manifest.push_str(&format!("arch.eca_kernel {}\n", meta.arch.eca_kernel));
    manifest.push_str(&format!("arch.ca_reduction {}\n", meta.arch.ca_reduction));
    manifest.push_str(&format!("arch.voxel_bins {}\n", meta.arch.voxel_bins));

    let mut blob = BufWriter::new(std::fs::File::create(blob_path(base))?);
    let mut offset = 0u64;
    for name in store.names() {
        let (data, shape) = store.get(&name).expect("listed name exists");
        let shape_s: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let bytes = 4 * data.len() as u64;
        manifest.push_str(&format!(
            "tensor {} {} f32 {} {}\n",
            name,
            shape_s.join(","),
            offset,
            bytes
        ));
        for v in &data {
            blob.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
        offset += bytes;
    }
    blob.flush()?;
    std::fs::write(manifest_path(base), manifest)?;
    Ok(())
}

/// Read a checkpoint pair back into a fresh store.
pub fn load_checkpoint<T: Scalar>(base: &Path) -> Result<(ParamStore<T>, CheckpointMeta)> {
    let text = std::fs::read_to_string(manifest_path(base))?;
    let blob = std::fs::read(blob_path(base))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Malformed("empty manifest".into()))?;
    if header != "luminev-checkpoint v1" {
        return Err(Error::Malformed(format!("unknown header: {header}")));
    }
    let mut step = 0u64;
    let mut seed = 0u64;
    let mut arch = ArchConfig::default();
    let mut store: Option<ParamStore<T>> = None;
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let bad = |what: &str| {
            Error::Malformed(format!("manifest line {}: {}", lineno + 1, what))
        };
        match key {
            "step" => {
                step = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad step"))?
            }
            "seed" => {
                seed = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad seed"))?
            }
            "arch.widths" => {
                arch.widths = parts
                    .next()
                    .ok_or_else(|| bad("missing widths"))?
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad("bad width")))
                    .collect::<Result<_>>()?
            }
            "arch.heads" => arch.heads = parse_field(parts.next(), lineno)?,
            "arch.eca_kernel" => arch.eca_kernel = parse_field(parts.next(), lineno)?,
            "arch.ca_reduction" => arch.ca_reduction = parse_field(parts.next(), lineno)?,
            "arch.voxel_bins" => arch.voxel_bins = parse_field(parts.next(), lineno)?,
            "tensor" => {
                let st = store.get_or_insert_with(|| ParamStore::new(seed));
                let name = parts.next().ok_or_else(|| bad("missing tensor name"))?;
                let shape: Vec<usize> = parts
                    .next()
                    .ok_or_else(|| bad("missing shape"))?
                    .split(',')
                    .map(|v| v.parse().map_err(|_| bad("bad shape entry")))
                    .collect::<Result<_>>()?;
                let dtype = parts.next().ok_or_else(|| bad("missing dtype"))?;
                if dtype != "f32" {
                    return Err(bad(&format!("unsupported dtype {dtype}")));
                }
                let off: usize = parse_field(parts.next(), lineno)?;
                let len: usize = parse_field(parts.next(), lineno)?;
                let n: usize = shape.iter().product();
                if len != 4 * n || off + len > blob.len() {
                    return Err(bad("tensor extent outside blob"));
                }
                let data: Vec<T> = blob[off..off + len]
                    .chunks_exact(4)
                    .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect();
                st.set(name, data, &shape);
            }
            other => return Err(bad(&format!("unknown key {other}"))),
        }
    }
    arch.validate()?;
    let store = store.unwrap_or_else(|| ParamStore::new(seed));
    Ok((store, CheckpointMeta { step, arch, seed }))
}

fn parse_field<N: std::str::FromStr>(v: Option<&str>, lineno: usize) -> Result<N> {
    v.and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Malformed(format!("manifest line {}: bad field", lineno + 1)))
}
