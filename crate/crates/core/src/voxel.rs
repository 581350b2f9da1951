//! Two-channel event count frames.

use cmtc_tensor::kernels::{bilinear_forward, ResizeGeom};
use cmtc_tensor::{Scalar, Tensor};

use crate::error::{config, CmtcError, Result};
use crate::events::EventStream;

/// A clip of `T` frames shaped `T x 2 x H x W`; channel 0 counts positive
/// events, channel 1 negative ones, both clamp-normalized into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack<T> {
    pub frames: Tensor<T>,
    pub t_window: u64,
    pub source_id: String,
    pub person_id: u32,
    pub camera_id: u32,
}

impl<T: Scalar> FrameStack<T> {
    pub fn clip_len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VoxelConfig {
    pub clip_len: usize,
    /// Microseconds per frame.
    pub t_window: u64,
    /// Per-pixel count that maps to 1.0.
    pub clip_cap: u32,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            clip_len: 8,
            t_window: 50_000,
            clip_cap: 5,
        }
    }
}

impl VoxelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 2 {
            return Err(config(format!("clip length {} must be at least 2", self.clip_len)));
        }
        if self.t_window == 0 {
            return Err(config("t_window must be positive"));
        }
        if self.clip_cap == 0 {
            return Err(config("clip_cap must be positive"));
        }
        Ok(())
    }
}

/// Raw per-frame, per-polarity, per-pixel counts before clamping, laid out
/// `T x 2 x H x W`, plus the number of events that fell outside the clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelCounts {
    pub counts: Vec<u32>,
    pub dropped: usize,
}

/// Window origin: the first timestamp rounded down to a window boundary.
fn origin(stream: &EventStream, t_window: u64) -> u64 {
    stream.first_t().map_or(0, |t| t - t % t_window)
}

pub fn voxel_counts(stream: &EventStream, cfg: &VoxelConfig) -> Result<VoxelCounts> {
    cfg.validate()?;
    let (first, last) = match (stream.first_t(), stream.last_t()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(config("cannot voxelize an empty stream")),
    };
    let t0 = origin(stream, cfg.t_window);
    let needed = (cfg.clip_len as u64 - 1) * cfg.t_window;
    // A stream whose events all share one timestamp carries no duration to check.
    if last > first && last - t0 < needed {
        return Err(CmtcError::StreamTooShort {
            span_us: last - t0,
            clip_len: cfg.clip_len,
            t_window: cfg.t_window,
            needed_us: needed,
        });
    }
    let (w, h) = (stream.width as usize, stream.height as usize);
    let plane = h * w;
    let mut counts = vec![0u32; cfg.clip_len * 2 * plane];
    let mut dropped = 0;
    for r in stream.records() {
        let k = ((r.t - t0) / cfg.t_window) as usize;
        if k >= cfg.clip_len {
            dropped += 1;
            continue;
        }
        let ch = if r.p > 0 { 0 } else { 1 };
        counts[(k * 2 + ch) * plane + r.y as usize * w + r.x as usize] += 1;
    }
    Ok(VoxelCounts { counts, dropped })
}

pub fn voxelize<T: Scalar>(stream: &EventStream, cfg: &VoxelConfig) -> Result<FrameStack<T>> {
    let vc = voxel_counts(stream, cfg)?;
    let cap = cfg.clip_cap;
    let inv = 1.0 / cap as f64;
    let data = vc
        .counts
        .iter()
        .map(|&c| T::from_f64_lossy(c.min(cap) as f64 * inv))
        .collect();
    let frames = Tensor::new(
        vec![cfg.clip_len, 2, stream.height as usize, stream.width as usize],
        data,
    )?;
    Ok(FrameStack {
        frames,
        t_window: cfg.t_window,
        source_id: String::new(),
        person_id: 0,
        camera_id: 0,
    })
}

/// Bilinear (aligned-corner) resize of every frame and channel.
pub fn resize_frames<T: Scalar>(stack: &FrameStack<T>, out_h: usize, out_w: usize) -> Result<FrameStack<T>> {
    if (out_h, out_w) == (stack.height(), stack.width()) {
        return Ok(stack.clone());
    }
    let geom = ResizeGeom::new(stack.frames.shape(), out_h, out_w)?;
    let data = bilinear_forward(stack.frames.data(), &geom);
    let frames = Tensor::new(vec![stack.clip_len(), stack.frames.shape()[1], out_h, out_w], data)?;
    Ok(FrameStack {
        frames,
        ..stack.clone()
    })
}
