use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{DataError, LabeledVolume, PhaseVolume, WeakLabel};
use crate::priors::BoundingBox;

const VOLUME_MAGIC: &[u8; 8] = b"GSSDVOL1";
pub const MANIFEST_FILE: &str = "manifest.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Writes `GSSDVOL1`: magic, four little-endian u32 extents
/// (phases, depth, height, width), then f32 HU values in storage order.
pub fn write_volume(path: &Path, pv: &PhaseVolume) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    put(VOLUME_MAGIC)?;
    for d in [pv.phases(), pv.depth(), pv.height(), pv.width()] {
        put(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(pv.data().len() * 4);
    for v in pv.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put(&buf)?;
    w.flush().map_err(io_err(path))
}

/// Reads a `GSSDVOL1` file. The vendor bias is not part of the format.
pub fn read_volume(path: &Path, vendor_bias: f32) -> Result<PhaseVolume, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 24 || &bytes[..8] != VOLUME_MAGIC {
        return Err(format_err(path, "not a GSSDVOL1 volume"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (p, d, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let count = p
        .checked_mul(d)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| format_err(path, "extents overflow"))?;
    let body = &bytes[24..];
    if body.len() != count * 4 {
        return Err(format_err(path, format!("expected {} data bytes for {p}x{d}x{h}x{w}, found {}", count * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    PhaseVolume::new(p, d, h, w, data, vendor_bias).map_err(|e| format_err(path, e.to_string()))
}

/// One label per line: `phase z_start z_end x_min y_min x_max y_max class`.
pub fn write_labels(path: &Path, labels: &[WeakLabel]) -> Result<(), DataError> {
    let mut s = String::from("# phase z_start z_end x_min y_min x_max y_max class\n");
    for l in labels {
        let b = l.bbox;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            l.phase, l.z_start, l.z_end, b.x_min, b.y_min, b.x_max, b.y_max, l.class
        ));
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_labels(path: &Path) -> Result<Vec<WeakLabel>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| format_err(path, format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad coordinate"));
        let bbox = BoundingBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?).map_err(|e| bad(&e.to_string()))?;
        let label = WeakLabel { phase: int(f[0])?, z_start: int(f[1])?, z_end: int(f[2])?, bbox, class: int(f[7])? };
        if label.z_end < label.z_start {
            return Err(bad("z_end before z_start"));
        }
        out.push(label);
    }
    Ok(out)
}

/// A row of the dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub volume: String,
    pub labels: String,
    pub seed: u64,
    pub vendor_bias: f32,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let path = dir.join(MANIFEST_FILE);
    let mut s = String::from("volume,labels,seed,vendor_bias\n");
    for e in entries {
        s.push_str(&format!("{},{},{},{}\n", e.volume, e.labels, e.seed, e.vendor_bias));
    }
    fs::write(&path, s).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("volume,labels,seed,vendor_bias") {
        return Err(format_err(&path, "missing header volume,labels,seed,vendor_bias"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            let bad = || format_err(&path, format!("row {}: expected volume,labels,seed,vendor_bias", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                volume: f[0].to_string(),
                labels: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad())?,
                vendor_bias: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loads every volume listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledVolume>, DataError> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let vpath: PathBuf = dir.join(&e.volume);
            Ok(LabeledVolume {
                volume: read_volume(&vpath, e.vendor_bias)?,
                labels: read_labels(&dir.join(&e.labels))?,
                name: e.volume,
            })
        })
        .collect()
}
