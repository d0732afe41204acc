//! Synthetic paired data: procedural clean patches, photometric
//! degradation, simulated events, plus portable image file I/O.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::events::{inject_misalignment, simulate_events, voxelize};
use crate::tensor::{Scalar, Tensor};

/// Degradation and event-simulation ranges for synthetic pairs.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub crop: usize,
    pub gamma: (f64, f64),
    pub gain: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub shot_scale: f64,
    pub contrast_threshold: f64,
    /// Maximum |dx|, |dy| event misalignment in pixels.
    pub max_shift: i32,
    pub jitter_sigma: f64,
    pub voxel_bins: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            crop: 64,
            gamma: (2.0, 5.0),
            gain: (0.05, 0.3),
            noise_sigma: (0.01, 0.05),
            shot_scale: 0.02,
            contrast_threshold: 0.2,
            max_shift: 2,
            jitter_sigma: 0.5,
            voxel_bins: 32,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 8 != 0 {
            return Err(Error::InvalidArgument(
                "crop must be positive and divisible by 8".into(),
            ));
        }
        if self.gamma.0 > self.gamma.1 || self.gain.0 > self.gain.1 {
            return Err(Error::InvalidArgument("degenerate parameter range".into()));
        }
        if self.contrast_threshold <= 0.0 || self.voxel_bins == 0 {
            return Err(Error::InvalidArgument(
                "contrast threshold and voxel bins must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Procedural clean patch: a smooth multi-frequency base, a few flat
/// geometric shapes for hard edges, and mild texture noise, all in [0, 1].
fn clean_patch(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let mut img = vec![0.0; 3 * size * size];
    // low-frequency cosine mixture shared across channels with per-channel tint
    let n_waves = 4;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0),  // cycles over the patch, x
                rng.gen_range(0.5..3.0),  // cycles, y
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..1.0),  // amplitude share
            )
        })
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.7..1.0)).collect();
    for i in 0..size {
        for j in 0..size {
            let (u, v) = (i as f64 / size as f64, j as f64 / size as f64);
            let mut base = 0.0;
            let mut norm = 0.0;
            for &(fx, fy, ph, amp) in &waves {
                base += amp
                    * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos();
                norm += amp;
            }
            let base = 0.5 + 0.5 * base / norm;
            for c in 0..3 {
                img[(c * size + i) * size + j] = base * tint[c];
            }
        }
    }
    // flat shapes: axis-aligned rectangles and discs
    for _ in 0..rng.gen_range(2..6) {
        let cy = rng.gen_range(0..size) as i64;
        let cx = rng.gen_range(0..size) as i64;
        let r = rng.gen_range(size / 10..size / 3) as i64;
        let level: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.9)).collect();
        let disc = rng.gen_bool(0.5);
        for i in 0..size as i64 {
            for j in 0..size as i64 {
                let inside = if disc {
                    (i - cy).pow(2) + (j - cx).pow(2) <= r * r
                } else {
                    (i - cy).abs() <= r && (j - cx).abs() <= r
                };
                if inside {
                    for c in 0..3 {
                        img[((c as usize) * size + i as usize) * size + j as usize] =
                            level[c as usize];
                    }
                }
            }
        }
    }
    // fine texture
    let tex = rng.gen_range(0.01..0.04);
    for v in &mut img {
        *v = (*v + rng.gen_range(-tex..tex)).clamp(0.0, 1.0);
    }
    img
}

/// Integer-shift with edge clamping, used to fake camera motion between
/// the two frames that drive the event simulator.
fn shift_plane(src: &[f64], size: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for i in 0..size as i64 {
        for j in 0..size as i64 {
            let si = (i - dy).clamp(0, size as i64 - 1) as usize;
            let sj = (j - dx).clamp(0, size as i64 - 1) as usize;
            out[(i as usize) * size + j as usize] = src[si * size + sj];
        }
    }
    out
}

/// One synthetic training example: degraded input, clean target, and the
/// voxelized (misaligned) event stream of a small motion around the target.
pub fn synth_pair<T: Scalar>(
    seed: u64,
    spec: &DatasetSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.crop;
    let y = clean_patch(&mut rng, size);

    // photometric degradation: gamma curve, gain, then additive and
    // signal-dependent noise
    let gamma = rng.gen_range(spec.gamma.0..=spec.gamma.1);
    let gain = rng.gen_range(spec.gain.0..=spec.gain.1);
    let sigma = rng.gen_range(spec.noise_sigma.0..=spec.noise_sigma.1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let x: Vec<f64> = y
        .iter()
        .map(|&v| {
            let signal = (gain * v.powf(gamma)).clamp(0.0, 1.0);
            let shot = spec.shot_scale * signal.sqrt() * normal.sample(&mut rng);
            (signal + sigma * normal.sample(&mut rng) + shot).clamp(0.0, 1.0)
        })
        .collect();

    // events from a +-1 px motion pair around the clean luminance
    let lum: Vec<f64> = (0..size * size)
        .map(|i| (y[i] + y[size * size + i] + y[2 * size * size + i]) / 3.0)
        .collect();
    let (my, mx) = (rng.gen_range(-1..=1i64), rng.gen_range(-1..=1i64));
    let f0 = shift_plane(&lum, size, -my, -mx);
    let f1 = shift_plane(&lum, size, my, mx);
    let stream = simulate_events(
        &Tensor::<f64>::from_vec(f0, &[size, size])?,
        &Tensor::<f64>::from_vec(f1, &[size, size])?,
        spec.contrast_threshold,
        0,
        10_000,
    )?;
    let dx = rng.gen_range(-spec.max_shift..=spec.max_shift);
    let dy = rng.gen_range(-spec.max_shift..=spec.max_shift);
    let stream = inject_misalignment(&stream, dx, dy, spec.jitter_sigma, &mut rng)?;
    let voxel = voxelize::<T>(&stream, spec.voxel_bins)?;

    let to_t = |v: Vec<f64>| -> Vec<T> { v.into_iter().map(T::cast).collect() };
    Ok((
        Tensor::from_vec(to_t(x), &[3, size, size])?,
        Tensor::from_vec(to_t(y), &[3, size, size])?,
        voxel.grid,
    ))
}

/// Flip the last axis (left-right) of a (..., H, W) tensor.
pub fn flip_horizontal<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape().to_vec();
    let w = shape[shape.len() - 1];
    let rows = t.numel() / w;
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..rows {
        for j in (0..w).rev() {
            out.push(t.data()[r * w + j]);
        }
    }
    Tensor::from_vec(out, &shape).expect("same shape")
}

/// Flip the second-to-last axis (top-bottom) of a (..., H, W) tensor.
pub fn flip_vertical<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let shape = t.shape().to_vec();
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let planes = t.numel() / (h * w);
    let mut out = Vec::with_capacity(t.numel());
    for p in 0..planes {
        for i in (0..h).rev() {
            let base = (p * h + i) * w;
            out.extend_from_slice(&t.data()[base..base + w]);
        }
    }
    Tensor::from_vec(out, &shape).expect("same shape")
}

/// Write a (3, H, W) tensor as binary PPM (P6) or a (H, W) tensor as PGM
/// (P5); `depth` selects 8- or 16-bit samples. Values clamped to [0, 1].
pub fn write_image<T: Scalar>(t: &Tensor<T>, path: &Path, depth: u8) -> Result<()> {
    let (channels, h, w) = match t.shape() {
        [3, h, w] => (3, *h, *w),
        [h, w] => (1, *h, *w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "expected (3, H, W) or (H, W), got {:?}",
                s
            )))
        }
    };
    let (magic, maxval) = match (channels, depth) {
        (3, 8) => ("P6", 255u32),
        (3, 16) => ("P6", 65535),
        (1, 8) => ("P5", 255),
        (1, 16) => ("P5", 65535),
        _ => return Err(Error::InvalidArgument("depth must be 8 or 16".into())),
    };
    let mut bytes = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for c in 0..channels {
                let v = t.data()[(c * h + i) * w + j].as_f64().clamp(0.0, 1.0);
                let q = (v * maxval as f64).round() as u32;
                if depth == 8 {
                    bytes.push(q as u8);
                } else {
                    bytes.extend_from_slice(&(q as u16).to_be_bytes());
                }
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PPM/PGM written by [`write_image`] (or any 8/16-bit
/// binary netpbm file) back to a [0, 1] tensor.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    let header_err = |m: &str| Error::Malformed(format!("{}: {}", path.display(), m));
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("truncated header".into()));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // single whitespace after the last header token
        Ok(t)
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(header_err(&format!("unsupported magic {m}"))),
    };
    let w: usize = token()?.parse().map_err(|_| header_err("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| header_err("bad height"))?;
    let maxval: u32 = token()?.parse().map_err(|_| header_err("bad maxval"))?;
    let depth = match maxval {
        255 => 8,
        65535 => 16,
        v => return Err(header_err(&format!("unsupported maxval {v}"))),
    };
    let n = channels * h * w;
    let body = &bytes[pos..];
    let need = if depth == 8 { n } else { 2 * n };
    if body.len() < need {
        return Err(header_err("pixel data shorter than header promises"));
    }
    let mut data = vec![T::zero(); n];
    for i in 0..h {
        for j in 0..w {
            for c in 0..channels {
                let k = (i * w + j) * channels + c;
                let v = if depth == 8 {
                    body[k] as f64 / 255.0
                } else {
                    u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as f64 / 65535.0
                };
                data[(c * h + i) * w + j] = T::cast(v);
            }
        }
    }
    let shape = if channels == 3 { vec![3, h, w] } else { vec![h, w] };
    Tensor::from_vec(data, &shape)
}

/// Raw fp32 dump with a plain-text sidecar declaring the shape.
pub fn write_raw_f32<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * t.numel());
    for v in t.data() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    std::fs::write(
        path.with_extension("meta"),
        format!("dtype f32\nshape {}\n", shape.join(",")),
    )?;
    Ok(())
}

pub fn read_raw_f32<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let meta = std::fs::read_to_string(path.with_extension("meta"))?;
    let mut shape: Option<Vec<usize>> = None;
    for line in meta.lines() {
        if let Some(rest) = line.strip_prefix("shape ") {
            shape = Some(
                rest.split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Malformed(format!("bad shape entry {v}")))
                    })
                    .collect::<Result<_>>()?,
            );
        }
    }
    let shape = shape.ok_or_else(|| Error::Malformed("sidecar missing shape".into()))?;
    let bytes = std::fs::read(path)?;
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::from_vec(data, &shape)
}
