//! CSV interchange for recordings and the dataset manifest.
//!
//! * frames: `frame_id,point_idx,x,y,z,doppler,intensity`
//! * labels: `frame_id,j0_x,j0_y,j0_z,...,j18_z`
//! * manifest: `subject_id,movement_id,frames_path,labels_path`, paths relative to the manifest

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::Recording;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::pointcloud::{Frame, Point};

pub const FRAMES_HEADER: [&str; 7] = ["frame_id", "point_idx", "x", "y", "z", "doppler", "intensity"];

/// Largest share of point-cloud frames allowed to lack a label.
pub const MAX_DROP_FRACTION: f64 = 0.10;

/// Default radar sampling period in seconds.
pub const DEFAULT_SAMPLING_PERIOD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadReport {
    /// Frames with points but no label row.
    pub dropped_frames: usize,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn header(path: &Path, rdr: &mut csv::Reader<std::fs::File>) -> Result<Vec<String>> {
    let h = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, format!("unreadable header: {e}")))?;
    Ok(h.iter().map(str::to_string).collect())
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| parse_error(path, line, format!("missing column `{name}`")))?;
    raw.parse()
        .map_err(|_| parse_error(path, line, format!("column `{name}`: cannot parse {raw:?}")))
}

fn label_header(joints: usize) -> Vec<String> {
    std::iter::once("frame_id".to_string())
        .chain((0..joints).flat_map(|j| ["x", "y", "z"].map(|a| format!("j{j}_{a}"))))
        .collect()
}

/// Points grouped by frame id, each frame ordered by point index.
fn read_frames(path: &Path) -> Result<BTreeMap<u64, Vec<(u64, Point)>>> {
    let mut rdr = reader(path)?;
    let h = header(path, &mut rdr)?;
    if h != FRAMES_HEADER {
        return Err(parse_error(path, 1, format!("expected header {}", FRAMES_HEADER.join(","))));
    }
    let mut frames: BTreeMap<u64, Vec<(u64, Point)>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != FRAMES_HEADER.len() {
            return Err(parse_error(path, line, format!("expected 7 columns, found {}", row.len())));
        }
        let frame_id: u64 = field(path, line, &row, 0, "frame_id")?;
        let point_idx: u64 = field(path, line, &row, 1, "point_idx")?;
        let mut v = [0.0f64; 5];
        for (k, name) in FRAMES_HEADER[2..].iter().enumerate() {
            v[k] = field(path, line, &row, k + 2, name)?;
        }
        let point = Point::new(v[0], v[1], v[2], v[3], v[4])
            .map_err(|_| parse_error(path, line, "non-finite point value"))?;
        frames.entry(frame_id).or_default().push((point_idx, point));
    }
    for pts in frames.values_mut() {
        pts.sort_by_key(|(i, _)| *i);
    }
    Ok(frames)
}

fn read_labels(path: &Path) -> Result<BTreeMap<u64, Vec<f64>>> {
    let mut rdr = reader(path)?;
    let h = header(path, &mut rdr)?;
    let coords = h.len().saturating_sub(1);
    if coords == 0 || coords % 3 != 0 || h != label_header(coords / 3) {
        return Err(parse_error(path, 1, "expected header frame_id,j0_x,j0_y,j0_z,..."));
    }
    let mut labels = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != h.len() {
            return Err(parse_error(path, line, format!("expected {} columns, found {}", h.len(), row.len())));
        }
        let frame_id: u64 = field(path, line, &row, 0, "frame_id")?;
        let values = (1..h.len())
            .map(|i| {
                let v: f64 = field(path, line, &row, i, &h[i])?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_error(path, line, format!("non-finite `{}`", h[i])))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if labels.insert(frame_id, values).is_some() {
            return Err(parse_error(path, line, format!("duplicate frame_id {frame_id}")));
        }
    }
    Ok(labels)
}

/// Loads one recording; frames are the labeled frame ids in ascending order.
///
/// Labeled frames without points become empty frames. Point-cloud frames without a
/// label are dropped and counted; more than [`MAX_DROP_FRACTION`] of them is an error.
pub fn load_recording(frames_path: &Path, labels_path: &Path) -> Result<(Recording, LoadReport)> {
    let mut points = read_frames(frames_path)?;
    let labels = read_labels(labels_path)?;
    let point_frames = points.len();
    let dropped = points.keys().filter(|id| !labels.contains_key(id)).count();
    if point_frames > 0 && dropped as f64 > MAX_DROP_FRACTION * point_frames as f64 {
        return Err(Error::Alignment {
            path: labels_path.to_path_buf(),
            message: format!("{dropped} of {point_frames} frames have no label"),
        });
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} unlabeled frame(s)",
            frames_path.display()
        );
    }
    let mut frames = Vec::with_capacity(labels.len());
    let mut frame_ids = Vec::with_capacity(labels.len());
    let mut label_rows = Vec::with_capacity(labels.len());
    for (i, (id, label)) in labels.into_iter().enumerate() {
        let pts = points.remove(&id).unwrap_or_default();
        frames.push(Frame::new(i, pts.into_iter().map(|(_, p)| p).collect()));
        frame_ids.push(id);
        label_rows.push(label);
    }
    let recording = Recording {
        subject_id: 0,
        movement_id: 0,
        sampling_period: DEFAULT_SAMPLING_PERIOD,
        frames,
        labels: label_rows,
        frame_ids,
    };
    Ok((recording, LoadReport { dropped_frames: dropped }))
}

/// Serializes a recording to the two CSV files.
pub fn write_recording(rec: &Recording, frames_path: &Path, labels_path: &Path) -> Result<()> {
    let mut frames = FRAMES_HEADER.join(",");
    frames.push('\n');
    for (frame, id) in rec.frames.iter().zip(rec.frame_ids.iter()) {
        for (i, p) in frame.points.iter().enumerate() {
            let _ = writeln!(frames, "{id},{i},{},{},{},{},{}", p.x, p.y, p.z, p.doppler, p.intensity);
        }
    }
    let joints = rec.labels.first().map_or(super::JOINTS, |l| l.len() / 3);
    let mut labels = label_header(joints).join(",");
    labels.push('\n');
    for (label, id) in rec.labels.iter().zip(rec.frame_ids.iter()) {
        let _ = write!(labels, "{id}");
        for v in label {
            let _ = write!(labels, ",{v}");
        }
        labels.push('\n');
    }
    fsutil::write_atomic(frames_path, frames.as_bytes())?;
    fsutil::write_atomic(labels_path, labels.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: u32,
    pub movement_id: u32,
    pub frames_path: PathBuf,
    pub labels_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut rdr = reader(path)?;
    let h = header(path, &mut rdr)?;
    if h != ["subject_id", "movement_id", "frames_path", "labels_path"] {
        return Err(parse_error(path, 1, "expected header subject_id,movement_id,frames_path,labels_path"));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 4 {
            return Err(parse_error(path, line, format!("expected 4 columns, found {}", row.len())));
        }
        out.push(ManifestEntry {
            subject_id: field(path, line, &row, 0, "subject_id")?,
            movement_id: field(path, line, &row, 1, "movement_id")?,
            frames_path: base.join(&row[2]),
            labels_path: base.join(&row[3]),
        });
    }
    Ok(out)
}

/// Writes a manifest whose paths are stored as given (callers pass paths relative to it).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("subject_id,movement_id,frames_path,labels_path\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e.subject_id,
            e.movement_id,
            e.frames_path.display(),
            e.labels_path.display()
        );
    }
    fsutil::write_atomic(path, out.as_bytes())
}

/// Loads every recording listed in a manifest, in manifest order.
pub fn load_manifest(path: &Path) -> Result<(Vec<Recording>, LoadReport)> {
    let mut total = LoadReport::default();
    let mut recordings = Vec::new();
    for entry in read_manifest(path)? {
        let (mut rec, report) = load_recording(&entry.frames_path, &entry.labels_path)?;
        rec.subject_id = entry.subject_id;
        rec.movement_id = entry.movement_id;
        total.dropped_frames += report.dropped_frames;
        recordings.push(rec);
    }
    Ok((recordings, total))
}
