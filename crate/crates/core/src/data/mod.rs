//! Recordings, dataset splits and tensorization into network batches.

mod io;
pub mod synth;

pub use io::{
    load_manifest, load_recording, read_manifest, write_manifest, write_recording, LoadReport, ManifestEntry,
    DEFAULT_SAMPLING_PERIOD, FRAMES_HEADER, MAX_DROP_FRACTION,
};
pub use synth::{synth_generate, PointPlacement, SynthConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::pointcloud::{fuse_frames, standardize, to_grid, ChannelStats, Frame, FusedFrame};

/// Joints per skeleton.
pub const JOINTS: usize = 19;

/// Values per label row (`JOINTS` x, y, z triples).
pub const LABEL_DIM: usize = 3 * JOINTS;

/// One subject performing one movement.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: u32,
    pub movement_id: u32,
    /// Seconds between frames.
    pub sampling_period: f64,
    pub frames: Vec<Frame>,
    /// Per-frame joint coordinates in meters, `j0_x, j0_y, j0_z, ...`.
    pub labels: Vec<Vec<f64>>,
    /// Source frame ids, parallel to `frames`.
    pub frame_ids: Vec<u64>,
}

impl Recording {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.labels.len() || self.frames.len() != self.frame_ids.len() {
            return Err(Error::invalid_input(format!(
                "recording has {} frames, {} labels and {} ids",
                self.frames.len(),
                self.labels.len(),
                self.frame_ids.len()
            )));
        }
        if !(self.sampling_period > 0.0) {
            return Err(Error::invalid_input("sampling period must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Contiguous 60/20/20 train/validation/test within every recording.
    #[default]
    PerMovement,
    /// Hold out one movement and one user.
    LeaveOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub held_movement: Option<u32>,
    pub held_user: Option<u32>,
    /// Chronologically first frames of the held-out pool used for fine-tuning.
    pub finetune_frames: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::PerMovement,
            held_movement: None,
            held_user: None,
            finetune_frames: 200,
        }
    }
}

impl SplitSpec {
    pub fn leave_out(held_movement: u32, held_user: u32) -> Self {
        SplitSpec {
            mode: SplitMode::LeaveOut,
            held_movement: Some(held_movement),
            held_user: Some(held_user),
            ..SplitSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SplitMode::LeaveOut && (self.held_movement.is_none() || self.held_user.is_none()) {
            return Err(Error::invalid_config("leave_out split needs held_movement and held_user"));
        }
        Ok(())
    }
}

/// A fused frame with the label of its centre frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    /// Index into the recording list the split was built from.
    pub recording: usize,
    pub frame_index: usize,
    pub fused: FusedFrame,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitResult {
    pub train: Vec<LabeledFrame>,
    pub validation: Vec<LabeledFrame>,
    /// Held-out frames used for fine-tuning (leave-out mode only).
    pub test_finetune: Vec<LabeledFrame>,
    /// Held-out frames used for evaluation; the test split in per-movement mode.
    pub test_eval: Vec<LabeledFrame>,
    /// Test portion of the retained recordings (leave-out mode only).
    pub original_test: Vec<LabeledFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test_finetune: usize,
    pub test_eval: usize,
    pub original_test: usize,
}

impl SplitResult {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            validation: self.validation.len(),
            test_finetune: self.test_finetune.len(),
            test_eval: self.test_eval.len(),
            original_test: self.original_test.len(),
        }
    }

    pub fn pools(&self) -> [(&'static str, &[LabeledFrame]); 5] {
        [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test_finetune", &self.test_finetune),
            ("test_eval", &self.test_eval),
            ("original_test", &self.original_test),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pool {
    Train,
    Validation,
    TestFinetune,
    TestEval,
    OriginalTest,
}

/// Train / validation / test boundaries of a contiguous 60/20/20 split of `n` frames.
pub fn split_602020(n: usize) -> (usize, usize) {
    (n * 3 / 5, n * 4 / 5)
}

/// Assigns frames of every recording to pools and fuses each frame within the
/// contiguous run of its pool, so fused inputs never reach across pool or recording
/// boundaries.
pub fn build_split(recordings: &[Recording], spec: &SplitSpec, half_width: usize) -> Result<SplitResult> {
    spec.validate()?;
    if recordings.is_empty() {
        return Err(Error::invalid_input("no recordings to split"));
    }
    for r in recordings {
        r.validate()?;
    }

    let mut assignment: Vec<Vec<Option<Pool>>> = Vec::with_capacity(recordings.len());
    match spec.mode {
        SplitMode::PerMovement => {
            for r in recordings {
                let (a, b) = split_602020(r.len());
                assignment.push(
                    (0..r.len())
                        .map(|i| {
                            Some(if i < a {
                                Pool::Train
                            } else if i < b {
                                Pool::Validation
                            } else {
                                Pool::TestEval
                            })
                        })
                        .collect(),
                );
            }
        }
        SplitMode::LeaveOut => {
            let movement = spec.held_movement.expect("validated");
            let user = spec.held_user.expect("validated");
            if !recordings.iter().any(|r| r.movement_id == movement) {
                return Err(Error::invalid_config(format!("held movement {movement} not in data")));
            }
            if !recordings.iter().any(|r| r.subject_id == user) {
                return Err(Error::invalid_config(format!("held user {user} not in data")));
            }
            if !recordings
                .iter()
                .any(|r| r.subject_id == user && r.movement_id == movement && !r.is_empty())
            {
                return Err(Error::invalid_config(format!(
                    "no frames of user {user} performing movement {movement}"
                )));
            }
            let mut held_seen = 0;
            for r in recordings {
                let in_movement = r.movement_id == movement;
                let in_user = r.subject_id == user;
                let row = if in_movement && in_user {
                    (0..r.len())
                        .map(|_| {
                            held_seen += 1;
                            Some(if held_seen <= spec.finetune_frames {
                                Pool::TestFinetune
                            } else {
                                Pool::TestEval
                            })
                        })
                        .collect()
                } else if in_movement || in_user {
                    vec![None; r.len()]
                } else {
                    let (a, b) = split_602020(r.len());
                    (0..r.len())
                        .map(|i| {
                            Some(if i < a {
                                Pool::Train
                            } else if i < b {
                                Pool::Validation
                            } else {
                                Pool::OriginalTest
                            })
                        })
                        .collect()
                };
                assignment.push(row);
            }
        }
    }

    let mut out = SplitResult::default();
    for (ri, (rec, pools)) in recordings.iter().zip(&assignment).enumerate() {
        let mut start = 0;
        while start < pools.len() {
            let mut end = start + 1;
            while end < pools.len() && pools[end] == pools[start] {
                end += 1;
            }
            if let Some(pool) = pools[start] {
                let run = &rec.frames[start..end];
                for k in start..end {
                    let mut fused = fuse_frames(run, k - start, half_width)?;
                    fused.center_index = k;
                    let item = LabeledFrame {
                        recording: ri,
                        frame_index: k,
                        fused,
                        label: rec.labels[k].clone(),
                    };
                    match pool {
                        Pool::Train => out.train.push(item),
                        Pool::Validation => out.validation.push(item),
                        Pool::TestFinetune => out.test_finetune.push(item),
                        Pool::TestEval => out.test_eval.push(item),
                        Pool::OriginalTest => out.original_test.push(item),
                    }
                }
            }
            start = end;
        }
    }
    Ok(out)
}

/// Raw (unstandardized) network inputs and targets for a pool.
pub fn tensorize(pool: &[LabeledFrame], n_fixed: usize, grid: usize) -> Result<Batch> {
    let inputs = pool
        .iter()
        .map(|f| to_grid(&f.fused, n_fixed, grid))
        .collect::<Result<Vec<_>>>()?;
    let targets = pool.iter().map(|f| f.label.clone()).collect();
    Ok(Batch { inputs, targets })
}

pub fn standardize_batch(batch: &Batch, stats: &ChannelStats) -> Result<Batch> {
    Ok(Batch {
        inputs: batch
            .inputs
            .iter()
            .map(|g| standardize(g, stats))
            .collect::<Result<Vec<_>>>()?,
        targets: batch.targets.clone(),
    })
}

/// Sample indices of `pool` grouped by recording, in first-appearance order.
pub fn group_by_recording(pool: &[LabeledFrame]) -> Vec<(usize, Vec<usize>)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, f) in pool.iter().enumerate() {
        groups
            .entry(f.recording)
            .or_insert_with(|| {
                order.push(f.recording);
                Vec::new()
            })
            .push(i);
    }
    order
        .into_iter()
        .map(|r| (r, groups.remove(&r).unwrap_or_default()))
        .collect()
}
