//! On-disk formats for keypoint sets, ground truth, homographies and matches.
//!
//! KPDS is little-endian: magic `KPDS`, `u32` version (1), `u32` N, `u32` D,
//! `u32` W, `u32` H, `N×2` `f32` keypoints, then `N×D` `f32` descriptors.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{GroundTruth, Homography, KeypointSet, Point};
use crate::matcher::{Match, MatchSet};
use crate::matrix::Matrix;
use crate::weights::Reader;

pub const KPDS_MAGIC: &[u8; 4] = b"KPDS";
pub const KPDS_VERSION: u32 = 1;

fn dim(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit the KPDS header")))
}

/// Serializes a keypoint set; coordinates and descriptors are stored as `f32`.
pub fn encode_kpds(set: &KeypointSet) -> Result<Vec<u8>> {
    let (n, d) = (set.len(), set.descriptor_dim());
    let mut out = Vec::with_capacity(24 + 4 * n * (2 + d));
    out.extend_from_slice(KPDS_MAGIC);
    for v in [KPDS_VERSION, dim(n, "keypoint count")?, dim(d, "descriptor dim")?, set.width(), set.height()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in set.keypoints() {
        out.extend_from_slice(&(p.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.y as f32).to_le_bytes());
    }
    for &x in set.descriptors().as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_kpds(bytes: &[u8], path: &str) -> Result<KeypointSet> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "header")? != KPDS_MAGIC {
        return Err(r.error("bad magic, expected KPDS".into()));
    }
    let version = r.u32("header")?;
    if version != KPDS_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let n = r.u32("header")? as usize;
    let d = r.u32("header")? as usize;
    let w = r.u32("header")?;
    let h = r.u32("header")?;
    let coords = r.f32s(n.checked_mul(2).ok_or_else(|| r.error("keypoint count overflows".into()))?, "keypoints")?;
    let desc = r.f32s(n.checked_mul(d).ok_or_else(|| r.error("descriptor table overflows".into()))?, "descriptors")?;
    r.finish()?;
    if coords.iter().chain(&desc).any(|x| !x.is_finite()) {
        return Err(r.error("non-finite value".into()));
    }
    let keypoints = coords.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
    KeypointSet::new(keypoints, Matrix::from_vec(n, d, desc), w, h).map_err(|e| r.error(e.to_string()))
}

pub fn write_kpds(path: &Path, set: &KeypointSet) -> Result<()> {
    std::fs::write(path, encode_kpds(set)?)?;
    Ok(())
}

pub fn read_kpds(path: &Path) -> Result<KeypointSet> {
    decode_kpds(&std::fs::read(path)?, &path.display().to_string())
}

/// Ground truth as headerless `i,j` rows.
pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for &(i, j) in &gt.pairs {
        w.serialize((i, j))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path, n_source: usize, n_target: usize) -> Result<GroundTruth> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let pairs = r.deserialize::<(usize, usize)>().collect::<std::result::Result<Vec<_>, _>>()?;
    GroundTruth::from_pairs(pairs, n_source, n_target).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Three lines of three numbers, row-major.
pub fn format_homography(h: &Homography) -> String {
    h.entries()
        .chunks(3)
        .map(|row| format!("{} {} {}\n", row[0], row[1], row[2]))
        .collect()
}

pub fn parse_homography(text: &str, path: &str) -> Result<Homography> {
    let values = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::format(path, format!("`{t}` is not a number"))))
        .collect::<Result<Vec<f64>>>()?;
    let m: [f64; 9] = values
        .try_into()
        .map_err(|v: Vec<f64>| Error::format(path, format!("expected 9 numbers, found {}", v.len())))?;
    Homography::new(m).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_homography(path: &Path, h: &Homography) -> Result<()> {
    std::fs::write(path, format_homography(h))?;
    Ok(())
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    parse_homography(&std::fs::read_to_string(path)?, &path.display().to_string())
}

/// Match CSV with header `i,j,score,stage`.
pub fn write_matches_to(out: impl Write, m: &MatchSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if m.is_empty() {
        w.write_record(["i", "j", "score", "stage"])?;
    }
    for x in &m.matches {
        w.serialize(x)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matches(path: &Path, m: &MatchSet) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_matches_to(std::io::BufWriter::new(file), m)
}

pub fn read_matches(path: &Path) -> Result<MatchSet> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["i", "j", "score", "stage"] {
        return Err(Error::format(path.display().to_string(), "header must be i,j,score,stage"));
    }
    let matches = r.deserialize::<Match>().collect::<std::result::Result<Vec<_>, _>>()?;
    MatchSet::new(matches).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
