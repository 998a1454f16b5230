//! Synthetic pose tasks: a 19-joint skeleton driven by sinusoidal joint angles and
//! observed by a radar-like point sampler at the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Recording, JOINTS, LABEL_DIM};
use crate::error::{Error, Result};
use crate::pointcloud::{Frame, Point};

/// Where sampled points are placed on the skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointPlacement {
    /// Uniformly along limb segments, weighted by segment length.
    #[default]
    Limbs,
    /// On the joints themselves, cycling through the skeleton.
    Joints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tasks: usize,
    pub frames_per_task: usize,
    pub points_per_frame: usize,
    /// Standard deviation of isotropic point noise in meters.
    pub noise_std: f64,
    pub seed: u64,
    pub placement: PointPlacement,
    pub sampling_period: f64,
    /// Largest per-task distance between the reflecting body surface and the skeleton,
    /// meters. Each task draws its own value, so it cannot be read off a single frame.
    pub body_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tasks: 6,
            frames_per_task: 600,
            points_per_frame: 24,
            noise_std: 0.03,
            seed: 0,
            placement: PointPlacement::Limbs,
            sampling_period: super::DEFAULT_SAMPLING_PERIOD,
            body_radius: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.frames_per_task == 0 || self.points_per_frame == 0 {
            return Err(Error::invalid_config(
                "synth n_tasks, frames_per_task and points_per_frame must be positive",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid_config("synth noise_std must be finite and non-negative"));
        }
        if !(self.body_radius >= 0.0 && self.body_radius.is_finite()) {
            return Err(Error::invalid_config("synth body_radius must be finite and non-negative"));
        }
        if !(self.sampling_period > 0.0 && self.sampling_period.is_finite()) {
            return Err(Error::invalid_config("synth sampling_period must be positive"));
        }
        Ok(())
    }
}

pub const JOINT_NAMES: [&str; JOINTS] = [
    "spine_base",
    "spine_mid",
    "neck",
    "head",
    "shoulder_left",
    "elbow_left",
    "wrist_left",
    "shoulder_right",
    "elbow_right",
    "wrist_right",
    "hip_left",
    "knee_left",
    "ankle_left",
    "foot_left",
    "hip_right",
    "knee_right",
    "ankle_right",
    "foot_right",
    "spine_shoulder",
];

/// Parent of every joint; the root is its own parent.
pub const PARENTS: [usize; JOINTS] = [0, 0, 18, 2, 18, 4, 5, 18, 7, 8, 0, 10, 11, 12, 0, 14, 15, 16, 1];

/// Joints ordered so that parents come before children.
const FK_ORDER: [usize; JOINTS] = [0, 1, 18, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17];

/// Rest-pose offset of each joint from its parent (x lateral, y depth, z up), meters.
const OFFSETS: [[f64; 3]; JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 0.25],
    [0.0, 0.0, 0.08],
    [0.0, 0.0, 0.15],
    [-0.18, 0.0, 0.0],
    [0.0, 0.0, -0.28],
    [0.0, 0.0, -0.25],
    [0.18, 0.0, 0.0],
    [0.0, 0.0, -0.28],
    [0.0, 0.0, -0.25],
    [-0.1, 0.0, -0.05],
    [0.0, 0.0, -0.42],
    [0.0, 0.0, -0.40],
    [0.0, -0.12, -0.05],
    [0.1, 0.0, -0.05],
    [0.0, 0.0, -0.42],
    [0.0, 0.0, -0.40],
    [0.0, -0.12, -0.05],
    [0.0, 0.0, 0.25],
];

const ROOT_HEIGHT: f64 = 0.95;

/// Largest joint-angle amplitude drawn for a task, radians.
pub const MAX_AMPLITUDE: f64 = 0.9;

/// Largest angular frequency drawn for a task, radians per second.
pub const MAX_OMEGA: f64 = 2.0 * std::f64::consts::PI * 0.6;

type Vec3 = [f64; 3];
type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// One task's motion: per-joint sinusoidal angles about the lateral and depth axes.
#[derive(Debug, Clone)]
pub struct Motion {
    omega: f64,
    amp: [[f64; 2]; JOINTS],
    phase: [[f64; 2]; JOINTS],
    origin: Vec3,
    scale: f64,
    sway: f64,
    radius: f64,
}

impl Motion {
    pub fn random(rng: &mut impl Rng, max_radius: f64) -> Self {
        let omega = rng.gen_range(0.4..=1.0) * MAX_OMEGA;
        let mut amp = [[0.0; 2]; JOINTS];
        let mut phase = [[0.0; 2]; JOINTS];
        for j in 0..JOINTS {
            // The spine moves little; limbs get the full range.
            let cap = match j {
                0 | 1 | 2 | 18 => 0.15,
                _ => MAX_AMPLITUDE,
            };
            for a in 0..2 {
                amp[j][a] = rng.gen_range(0.0..=cap);
                phase[j][a] = rng.gen_range(0.0..std::f64::consts::TAU);
            }
        }
        Motion {
            omega,
            amp,
            phase,
            origin: [rng.gen_range(-0.5..=0.5), rng.gen_range(2.0..=3.0), ROOT_HEIGHT],
            scale: rng.gen_range(0.9..=1.1),
            sway: rng.gen_range(0.0..=0.1),
            radius: rng.gen_range(0.0..=max_radius),
        }
    }

    /// Joint positions at time `t`.
    pub fn joints(&self, t: f64) -> [Vec3; JOINTS] {
        let mut pos = [[0.0; 3]; JOINTS];
        let mut rot = [[[0.0; 3]; 3]; JOINTS];
        for &j in &FK_ORDER {
            let local = matmul(
                &rot_x(self.amp[j][0] * (self.omega * t + self.phase[j][0]).sin()),
                &rot_y(self.amp[j][1] * (self.omega * t + self.phase[j][1]).sin()),
            );
            if j == 0 {
                let sway = self.sway * (self.omega * t).sin();
                pos[0] = [self.origin[0] + sway, self.origin[1], self.origin[2] * self.scale];
                rot[0] = local;
            } else {
                let p = PARENTS[j];
                let off = OFFSETS[j].map(|v| v * self.scale);
                let d = apply(&rot[p], &off);
                pos[j] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
                rot[j] = matmul(&rot[p], &local);
            }
        }
        pos
    }
}

/// Limb segments as (parent, child) joint pairs.
fn segments() -> Vec<(usize, usize)> {
    (1..JOINTS).map(|j| (PARENTS[j], j)).collect()
}

fn make_point(p: Vec3, prev: Vec3, period: f64) -> Point {
    let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-6);
    let v = [(p[0] - prev[0]) / period, (p[1] - prev[1]) / period, (p[2] - prev[2]) / period];
    let radial = (v[0] * p[0] + v[1] * p[1] + v[2] * p[2]) / range;
    Point {
        x: p[0],
        y: p[1],
        z: p[2],
        doppler: radial,
        intensity: 1.0 / range,
    }
}

/// Moves `p` by `r` along the line of sight toward the sensor at the origin.
fn toward_sensor(p: Vec3, r: f64) -> Vec3 {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r == 0.0 || n <= r {
        return p;
    }
    p.map(|v| v * (1.0 - r / n))
}

fn sample_frame(
    motion: &Motion,
    cfg: &SynthConfig,
    t: f64,
    rng: &mut ChaCha8Rng,
    noise: Option<&Normal<f64>>,
) -> (Vec<Point>, Vec<f64>) {
    let now = motion.joints(t);
    let before = motion.joints(t - cfg.sampling_period);
    let segs = segments();
    let lengths: Vec<f64> = segs.iter().map(|&(a, b)| dist(&now[a], &now[b])).collect();
    let total: f64 = lengths.iter().sum();

    let mut points = Vec::with_capacity(cfg.points_per_frame);
    for n in 0..cfg.points_per_frame {
        let (p, q) = match cfg.placement {
            PointPlacement::Joints => (now[n % JOINTS], before[n % JOINTS]),
            PointPlacement::Limbs => {
                let mut r = rng.gen_range(0.0..total);
                let mut s = segs.len() - 1;
                for (i, len) in lengths.iter().enumerate() {
                    if r < *len {
                        s = i;
                        break;
                    }
                    r -= len;
                }
                let (a, b) = segs[s];
                let u: f64 = rng.gen();
                let lerp = |x: &Vec3, y: &Vec3| [0, 1, 2].map(|i| x[i] + u * (y[i] - x[i]));
                (lerp(&now[a], &now[b]), lerp(&before[a], &before[b]))
            }
        };
        let (mut p, mut q) = (toward_sensor(p, motion.radius), toward_sensor(q, motion.radius));
        if let Some(normal) = noise {
            for i in 0..3 {
                let e = normal.sample(rng);
                p[i] += e;
                q[i] += e;
            }
        }
        points.push(make_point(p, q, cfg.sampling_period));
    }
    let label = now.iter().flat_map(|j| j.iter().copied()).collect::<Vec<f64>>();
    debug_assert_eq!(label.len(), LABEL_DIM);
    (points, label)
}

/// Motion parameters of task `task` under `seed`; independent of the other tasks.
pub fn task_motion(cfg: &SynthConfig, task: usize) -> Motion {
    let mut rng = task_rng(cfg.seed, task);
    Motion::random(&mut rng, cfg.body_radius)
}

fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    rng
}

/// Generates one recording per task. Task `i` uses subject and movement id `i`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let noise = if cfg.noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid_config(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cfg.n_tasks);
    for task in 0..cfg.n_tasks {
        let mut rng = task_rng(cfg.seed, task);
        let motion = Motion::random(&mut rng, cfg.body_radius);
        let mut frames = Vec::with_capacity(cfg.frames_per_task);
        let mut labels = Vec::with_capacity(cfg.frames_per_task);
        for i in 0..cfg.frames_per_task {
            let t = i as f64 * cfg.sampling_period;
            let (points, label) = sample_frame(&motion, cfg, t, &mut rng, noise.as_ref());
            frames.push(Frame::new(i, points));
            labels.push(label);
        }
        out.push(Recording {
            subject_id: task as u32,
            movement_id: task as u32,
            sampling_period: cfg.sampling_period,
            frames,
            labels,
            frame_ids: (0..cfg.frames_per_task as u64).collect(),
        });
    }
    Ok(out)
}
