//! Event streams: frame-pair simulation, temporal voxel encoding, controlled
//! spatial misalignment, and a packed binary file format.

use std::io::{BufWriter, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"EVT1";
const LOG_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// +1 or -1.
    pub polarity: i8,
}

/// Time-sorted events plus the sensor geometry and the recording span the
/// voxel encoder normalizes against.
#[derive(Clone, Debug)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub height: usize,
    pub width: usize,
    pub t_start: u64,
    pub t_end: u64,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        if self.t_end < self.t_start {
            return Err(Error::InvalidArgument("t_end < t_start".into()));
        }
        let mut prev = self.t_start;
        for (i, e) in self.events.iter().enumerate() {
            if e.polarity != 1 && e.polarity != -1 {
                return Err(Error::Malformed(format!(
                    "event {}: polarity {} not in {{-1, +1}}",
                    i, e.polarity
                )));
            }
            if (e.x as usize) >= self.width || (e.y as usize) >= self.height {
                return Err(Error::Malformed(format!(
                    "event {}: ({}, {}) outside {}x{} sensor",
                    i, e.x, e.y, self.width, self.height
                )));
            }
            if e.t < prev || e.t > self.t_end {
                return Err(Error::Malformed(format!(
                    "event {}: timestamp {} violates sortedness or span",
                    i, e.t
                )));
            }
            prev = e.t;
        }
        Ok(())
    }
}

/// Signed bilinear accumulation of a stream into B temporal bins.
pub struct EventVoxel<T: Scalar> {
    pub grid: Tensor<T>,
    pub bins: usize,
}

/// Threshold-crossing event simulator over a frame pair. Each pixel emits
/// floor(|dlog| / c) events where dlog is the log-intensity change, with
/// timestamps at the successive crossings of the contrast threshold.
pub fn simulate_events<T: Scalar>(
    frame0: &Tensor<T>,
    frame1: &Tensor<T>,
    contrast_threshold: f64,
    t0: u64,
    t1: u64,
) -> Result<EventStream> {
    if frame0.shape() != frame1.shape() {
        return Err(Error::ShapeMismatch(format!(
            "frame shapes {:?} vs {:?}",
            frame0.shape(),
            frame1.shape()
        )));
    }
    if contrast_threshold <= 0.0 {
        return Err(Error::InvalidArgument(
            "contrast threshold must be positive".into(),
        ));
    }
    if t1 <= t0 {
        return Err(Error::InvalidArgument("need t1 > t0".into()));
    }
    let rank = frame0.shape().len();
    if rank < 2 {
        return Err(Error::ShapeMismatch("frames must be at least 2-D".into()));
    }
    let h = frame0.shape()[rank - 2];
    let w = frame0.shape()[rank - 1];
    // luminance: average leading (channel) dims if present
    let chans = frame0.numel() / (h * w);
    let lum = |t: &Tensor<T>, i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for c in 0..chans {
            acc += t.data()[c * h * w + i * w + j].as_f64();
        }
        acc / chans as f64
    };
    let span = (t1 - t0) as f64;
    let mut events = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let dlog = (lum(frame1, i, j) + LOG_FLOOR).ln() - (lum(frame0, i, j) + LOG_FLOOR).ln();
            // tiny slack so an exact multiple of C is not lost to rounding
            let count = (dlog.abs() / contrast_threshold + 1e-9).floor() as u64;
            if count == 0 {
                continue;
            }
            let polarity = if dlog > 0.0 { 1 } else { -1 };
            for k in 1..=count {
                let frac = k as f64 * contrast_threshold / dlog.abs();
                events.push(Event {
                    t: t0 + (span * frac).round() as u64,
                    x: j as u16,
                    y: i as u16,
                    polarity,
                });
            }
        }
    }
    events.sort_by_key(|e| e.t);
    Ok(EventStream {
        events,
        height: h,
        width: w,
        t_start: t0,
        t_end: t1,
    })
}

/// Bilinear temporal binning: t* = (B-1)(t - ts)/(te - ts), each event adds
/// polarity * max(0, 1 - |b - t*|) to bin b. Mass is conserved for in-span
/// timestamps, and the encoding is linear in the stream for a pinned span.
pub fn voxelize<T: Scalar>(stream: &EventStream, bins: usize) -> Result<EventVoxel<T>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let (h, w) = (stream.height, stream.width);
    let span = stream.t_end.saturating_sub(stream.t_start);
    if span == 0 && stream.events.iter().any(|e| e.t != stream.t_start) {
        return Err(Error::InvalidArgument(
            "zero span with multiple distinct timestamps".into(),
        ));
    }
    let mut grid = vec![T::zero(); bins * h * w];
    for e in &stream.events {
        let tstar = if span == 0 || bins == 1 {
            0.0
        } else {
            (bins - 1) as f64 * (e.t - stream.t_start) as f64 / span as f64
        };
        let p = e.polarity as f64;
        let lo = tstar.floor() as usize;
        for b in [lo, lo + 1] {
            if b >= bins {
                continue;
            }
            let wgt = (1.0 - (b as f64 - tstar).abs()).max(0.0);
            if wgt > 0.0 {
                let idx = (b * h + e.y as usize) * w + e.x as usize;
                grid[idx] = grid[idx] + T::cast(p * wgt);
            }
        }
    }
    Ok(EventVoxel {
        grid: Tensor::from_vec(grid, &[bins, h, w])?,
        bins,
    })
}

/// Shift every event by (dx, dy) plus per-event rounded Gaussian jitter.
/// Events landing outside the sensor are dropped, as at a physical edge.
/// Timestamps are untouched, so the temporal structure survives intact.
pub fn inject_misalignment<R: Rng>(
    stream: &EventStream,
    dx: i32,
    dy: i32,
    jitter_sigma: f64,
    rng: &mut R,
) -> Result<EventStream> {
    if !jitter_sigma.is_finite() || jitter_sigma < 0.0 {
        return Err(Error::InvalidArgument("jitter sigma must be finite and >= 0".into()));
    }
    let normal = Normal::new(0.0, jitter_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jit = |rng: &mut R| -> i64 {
        if jitter_sigma == 0.0 {
            0
        } else {
            normal.sample(rng).round() as i64
        }
    };
    let events = stream
        .events
        .iter()
        .filter_map(|e| {
            let nx = e.x as i64 + dx as i64 + jit(rng);
            let ny = e.y as i64 + dy as i64 + jit(rng);
            if nx < 0 || ny < 0 || nx >= stream.width as i64 || ny >= stream.height as i64 {
                None
            } else {
                Some(Event {
                    t: e.t,
                    x: nx as u16,
                    y: ny as u16,
                    polarity: e.polarity,
                })
            }
        })
        .collect();
    Ok(EventStream {
        events,
        ..stream.clone()
    })
}

/// Packed little-endian format: 16-byte header ("EVT1", u16 H, u16 W,
/// u64 reserved) followed by fixed 14-byte records (u64 t, u16 x, u16 y,
/// i8 polarity, i8 pad). The format carries no span, so reading infers
/// [t_start, t_end] from the first/last record.
pub fn write_events(stream: &EventStream, path: &Path) -> Result<()> {
    stream.validate()?;
    let mut wtr = BufWriter::new(std::fs::File::create(path)?);
    wtr.write_all(MAGIC)?;
    wtr.write_u16::<LittleEndian>(stream.height as u16)?;
    wtr.write_u16::<LittleEndian>(stream.width as u16)?;
    wtr.write_u64::<LittleEndian>(0)?; // reserved
    for e in &stream.events {
        wtr.write_u64::<LittleEndian>(e.t)?;
        wtr.write_u16::<LittleEndian>(e.x)?;
        wtr.write_u16::<LittleEndian>(e.y)?;
        wtr.write_i8(e.polarity)?;
        wtr.write_i8(0)?;
    }
    wtr.flush()?;
    Ok(())
}

const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 14;

pub fn read_events(path: &Path) -> Result<EventStream> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Malformed(format!(
            "{}: {} bytes is shorter than the 16-byte header",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Malformed(format!(
            "bad magic {:?} in {}",
            &bytes[0..4],
            path.display()
        )));
    }
    let height = u16::from_le_bytes(bytes[4..6].try_into().unwrap()) as usize;
    let width = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() % RECORD_LEN != 0 {
        return Err(Error::Malformed(format!(
            "truncated record at byte {} ({} trailing bytes)",
            HEADER_LEN + (body.len() / RECORD_LEN) * RECORD_LEN,
            body.len() % RECORD_LEN
        )));
    }
    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let polarity = rec[12] as i8;
        if polarity != 1 && polarity != -1 {
            return Err(Error::Malformed(format!(
                "record at byte {}: polarity {} not in {{-1, +1}}",
                HEADER_LEN + i * RECORD_LEN,
                polarity
            )));
        }
        events.push(Event { t, x, y, polarity });
    }
    let t_start = events.first().map_or(0, |e| e.t);
    let t_end = events.last().map_or(0, |e| e.t);
    let stream = EventStream {
        events,
        height,
        width,
        t_start,
        t_end,
    };
    stream.validate()?;
    Ok(stream)
}
