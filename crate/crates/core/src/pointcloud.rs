//! Radar frames, multi-frame fusion and tensorization into fixed-shape CNN inputs.
//!
//! A frame holds the points returned during one sampling period. Fusion gathers the
//! `2M + 1` frames centred on frame `k` (edge frames are replicated at recording
//! boundaries). Each constituent frame is canonicalized to a fixed number of points,
//! laid out row-major on a `G x G` grid with five feature channels, and the per-frame
//! grids are stacked along the channel axis.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Number of features carried by each radar point.
pub const POINT_FEATURES: usize = 5;

/// Default number of points per canonicalized frame.
pub const DEFAULT_N_FIXED: usize = 64;

/// Default grid side length (`DEFAULT_GRID * DEFAULT_GRID == DEFAULT_N_FIXED`).
pub const DEFAULT_GRID: usize = 8;

/// Standard deviations below this are replaced by one during standardization.
pub const MIN_STD: f64 = 1e-8;

/// A single radar return.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    /// Meters.
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radial velocity in meters per second.
    pub doppler: f64,
    /// Signal magnitude, dimensionless.
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, doppler: f64, intensity: f64) -> Result<Self> {
        let p = Point {
            x,
            y,
            z,
            doppler,
            intensity,
        };
        if !p.is_finite() {
            return Err(Error::invalid_input(format!("non-finite point {p:?}")));
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.features().iter().all(|v| v.is_finite())
    }

    /// Features in channel order: x, y, z, doppler, intensity.
    pub fn features(&self) -> [f64; POINT_FEATURES] {
        [self.x, self.y, self.z, self.doppler, self.intensity]
    }

    /// Descending intensity, then ascending `(x, y, z, doppler)`.
    fn canonical_cmp(&self, other: &Point) -> Ordering {
        other
            .intensity
            .total_cmp(&self.intensity)
            .then_with(|| self.x.total_cmp(&other.x))
            .then_with(|| self.y.total_cmp(&other.y))
            .then_with(|| self.z.total_cmp(&other.z))
            .then_with(|| self.doppler.total_cmp(&other.doppler))
    }
}

/// Points detected during one sampling period.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub index: usize,
    pub points: Vec<Point>,
}

impl Frame {
    pub fn new(index: usize, points: Vec<Point>) -> Self {
        Frame { index, points }
    }
}

/// The `2M + 1` frames surrounding a centre frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame {
    pub center_index: usize,
    pub half_width: usize,
    pub frames: Vec<Frame>,
}

impl FusedFrame {
    pub fn center(&self) -> &Frame {
        &self.frames[self.half_width]
    }
}

/// Fixed-shape network input stored height-major, then width, then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl InputGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        InputGrid {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.offset(row, col, channel)]
    }

    /// Copy of channels `start..end`.
    pub fn channel_slice(&self, start: usize, end: usize) -> InputGrid {
        let channels = end - start;
        let mut out = InputGrid::zeros(self.height, self.width, channels);
        for cell in 0..self.height * self.width {
            let src = &self.values[cell * self.channels + start..cell * self.channels + end];
            out.values[cell * channels..(cell + 1) * channels].copy_from_slice(src);
        }
        out
    }
}

/// Gathers the frames `k - M ..= k + M`, clamping out-of-range neighbours to the
/// nearest valid frame.
pub fn fuse_frames(recording: &[Frame], k: usize, half_width: usize) -> Result<FusedFrame> {
    if recording.is_empty() {
        return Err(Error::invalid_input("cannot fuse frames of an empty recording"));
    }
    if k >= recording.len() {
        return Err(Error::invalid_input(format!(
            "centre frame {k} out of range for recording of {} frames",
            recording.len()
        )));
    }
    let last = recording.len() - 1;
    let frames = (0..=2 * half_width)
        .map(|offset| {
            let idx = (k + offset).saturating_sub(half_width).min(last);
            recording[idx].clone()
        })
        .collect();
    Ok(FusedFrame {
        center_index: k,
        half_width,
        frames,
    })
}

/// Sorts, truncates and zero-pads a frame to exactly `n_fixed` points.
///
/// Padding points take part in the sort, so for the usual case of positive
/// intensities they land at the tail. This keeps the operation idempotent.
pub fn canonicalize_frame(frame: &Frame, n_fixed: usize) -> Vec<Point> {
    let mut points = frame.points.clone();
    if points.len() < n_fixed {
        points.resize(n_fixed, Point::default());
    }
    points.sort_by(Point::canonical_cmp);
    points.truncate(n_fixed);
    points
}

/// Tensorizes a fused frame into a `G x G x 5(2M+1)` grid.
pub fn to_grid(fused: &FusedFrame, n_fixed: usize, grid: usize) -> Result<InputGrid> {
    if grid == 0 || grid * grid != n_fixed {
        return Err(Error::invalid_config(format!(
            "grid {grid}x{grid} does not hold {n_fixed} points"
        )));
    }
    let channels = POINT_FEATURES * fused.frames.len();
    let mut out = InputGrid::zeros(grid, grid, channels);
    for (f, frame) in fused.frames.iter().enumerate() {
        for (p, point) in canonicalize_frame(frame, n_fixed).iter().enumerate() {
            let base = p * channels + f * POINT_FEATURES;
            out.values[base..base + POINT_FEATURES].copy_from_slice(&point.features());
        }
    }
    Ok(out)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over every cell of every grid; small deviations are clamped to one.
    pub fn from_grids<'a, I>(grids: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a InputGrid>,
    {
        let mut channels = None;
        let mut sum = Vec::new();
        let mut sum_sq = Vec::new();
        let mut count = 0usize;
        for g in grids {
            let c = *channels.get_or_insert_with(|| {
                sum = vec![0.0; g.channels];
                sum_sq = vec![0.0; g.channels];
                g.channels
            });
            if g.channels != c {
                return Err(Error::invalid_input(format!(
                    "mixed channel counts {c} and {}",
                    g.channels
                )));
            }
            for cell in g.values.chunks_exact(c) {
                for (ch, &v) in cell.iter().enumerate() {
                    sum[ch] += v;
                    sum_sq[ch] += v * v;
                }
            }
            count += g.height * g.width;
        }
        let Some(_) = channels else {
            return Err(Error::invalid_input("no grids to compute statistics from"));
        };
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                let s = var.sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Maps each value `v` of channel `c` to `(v - mean_c) / std_c`.
pub fn standardize(grid: &InputGrid, stats: &ChannelStats) -> Result<InputGrid> {
    if stats.mean.len() != grid.channels || stats.std.len() != grid.channels {
        return Err(Error::invalid_input(format!(
            "grid has {} channels but statistics cover {}",
            grid.channels,
            stats.mean.len()
        )));
    }
    let mut out = grid.clone();
    for cell in out.values.chunks_exact_mut(grid.channels) {
        for (ch, v) in cell.iter_mut().enumerate() {
            let std = if stats.std[ch] < MIN_STD { 1.0 } else { stats.std[ch] };
            *v = (*v - stats.mean[ch]) / std;
        }
    }
    Ok(out)
}
