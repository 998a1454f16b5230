//! Checkpoint files: a `key: value` text header terminated by an empty line, followed by
//! the flat parameters as little-endian `f32` values in layout order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{CnnConfig, CnnParams};
use crate::error::{Error, Result};
use crate::fsutil;

const FORMAT: &str = "fuse-pose-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CnnParams,
    pub seed: u64,
}

/// Serializes a checkpoint. Parameters are narrowed to `f32`.
pub fn write_checkpoint(checkpoint: &Checkpoint) -> Vec<u8> {
    let c = checkpoint.params.config();
    let mut out = format!(
        "format: {FORMAT}\nversion: {VERSION}\ngrid_size: {}\nin_channels: {}\nconv1_out: {}\n\
         conv2_out: {}\nkernel: {}\nfc_hidden: {}\nout_dim: {}\nseed: {}\nparam_count: {}\n\n",
        c.grid_size,
        c.in_channels,
        c.conv1_out,
        c.conv2_out,
        c.kernel,
        c.fc_hidden,
        c.out_dim,
        checkpoint.seed,
        checkpoint.params.len()
    )
    .into_bytes();
    out.reserve(4 * checkpoint.params.len());
    for &v in checkpoint.params.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut header = BTreeMap::new();
    let mut pos = 0;
    let mut line_no = 0u64;
    loop {
        line_no += 1;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(line_no, "unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| parse_err(line_no, "header is not UTF-8".into()))?;
        pos += end + 1;
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(line_no, format!("expected `key: value`, got {line:?}")))?;
        header.insert(key.trim().to_string(), (line_no, value.trim().to_string()));
    }

    let field = |key: &str| -> Result<&(u64, String)> {
        header
            .get(key)
            .ok_or_else(|| parse_err(line_no, format!("missing header field `{key}`")))
    };
    let number = |key: &str| -> Result<u64> {
        let (line, value) = field(key)?;
        value
            .parse()
            .map_err(|_| parse_err(*line, format!("`{key}` is not an integer: {value:?}")))
    };
    let (fline, format) = field("format")?;
    if format != FORMAT {
        return Err(parse_err(*fline, format!("unknown format {format:?}")));
    }
    let version = number("version")?;
    if version != VERSION as u64 {
        return Err(parse_err(field("version")?.0, format!("unsupported version {version}")));
    }
    let dim = |key: &str| number(key).map(|v| v as usize);
    let config = CnnConfig {
        grid_size: dim("grid_size")?,
        in_channels: dim("in_channels")?,
        conv1_out: dim("conv1_out")?,
        conv2_out: dim("conv2_out")?,
        kernel: dim("kernel")?,
        fc_hidden: dim("fc_hidden")?,
        out_dim: dim("out_dim")?,
    };
    config.validate()?;
    let count = dim("param_count")?;
    if count != config.param_count() {
        return Err(parse_err(
            field("param_count")?.0,
            format!("param_count {count} disagrees with architecture ({})", config.param_count()),
        ));
    }
    let body = &bytes[pos..];
    if body.len() != 4 * count {
        return Err(parse_err(
            line_no,
            format!("expected {} parameter bytes, found {}", 4 * count, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Checkpoint {
        params: CnnParams::unflatten(config, values)?,
        seed: number("seed")?,
    })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &write_checkpoint(checkpoint))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fsutil::read(path)?;
    read_checkpoint(&bytes, &PathBuf::from(path))
}
