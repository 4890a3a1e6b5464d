//! Binary greymap (P5, maxval 255) mask files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, write_json, PipelineError};
use crate::attention::toy::DenoiseTrace;
use crate::attention::RegionMask;

pub const MAXVAL: u8 = 255;
pub const INDEX_FILE: &str = "masks.json";

pub fn encode_pgm(mask: &RegionMask) -> Vec<u8> {
    let (h, w) = mask.grid;
    let mut out = format!("P5\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.extend(mask.values.iter().map(|&v| if v { MAXVAL } else { 0 }));
    out
}

/// Parses a P5 mask. Pixels must be exactly 0 or maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<RegionMask, PipelineError> {
    let bad = |msg: &str| PipelineError::Pgm(msg.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap (expected P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(PipelineError::Pgm(format!("raster has {} bytes for {w}x{h}", raster.len())));
    }
    let values = raster
        .iter()
        .map(|&b| match b as usize {
            0 => Ok(false),
            v if v == maxval => Ok(true),
            v => Err(PipelineError::Pgm(format!("pixel value {v} is neither 0 nor {maxval}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    RegionMask::new((h, w), values).map_err(|e| PipelineError::Pgm(e.to_string()))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<RegionMask, PipelineError> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(io_err(path))?)
}

pub fn step_file_name(t: usize) -> String {
    format!("step_{t:03}.pgm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub t: usize,
    pub file: String,
    pub area: usize,
    pub planted_iou: f64,
}

/// Writes one PGM per recorded step plus the index; returns every file
/// written, index last.
pub fn export_masks(trace: &DenoiseTrace, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = dir.as_ref();
    if trace.masks.is_empty() {
        return Err(PipelineError::MissingArtifact(format!("trace for {} has no masks", dir.display())));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::with_capacity(trace.masks.len() + 1);
    let mut index = Vec::with_capacity(trace.masks.len());
    for snap in &trace.masks {
        let name = step_file_name(snap.t);
        let path = dir.join(&name);
        fs::write(&path, encode_pgm(&snap.mask)).map_err(io_err(&path))?;
        files.push(path);
        index.push(MaskIndexEntry { t: snap.t, file: name, area: snap.area, planted_iou: snap.planted_iou });
    }
    let index_path = dir.join(INDEX_FILE);
    write_json(&index_path, &index)?;
    files.push(index_path);
    Ok(files)
}
