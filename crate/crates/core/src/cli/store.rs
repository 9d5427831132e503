//! On-disk formats.
//!
//! Binary arrays: `CRIC`, format version (u32 LE), array count (u32 LE), then
//! per array its length (u64 LE) and the values as f64 LE. Metadata lives in
//! `key = value` sidecars. Floats are written in Rust's shortest round-trip
//! form, so a reloaded state is bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;

use crate::diagnostics::Series;
use crate::elliptic::PotentialState;
use crate::error::{Error, Result};
use crate::flow::{ConformalState, FlowMode, SeriesRecord, Snapshot};

pub const MAGIC: &[u8; 4] = b"CRIC";
pub const FORMAT_VERSION: u32 = 1;

pub const SERIES_COLUMNS: [&str; 7] = ["time", "min_u", "max_u", "min_R", "max_R", "total_curvature", "newton_iters"];

fn snapshot_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Snapshot {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_arrays(arrays: &[&[f64]]) -> Vec<u8> {
    let total: usize = arrays.iter().map(|a| 8 + 8 * a.len()).sum();
    let mut out = Vec::with_capacity(12 + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for x in *a {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_arrays(path: &Path, bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| snapshot_err(path, "truncated file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(snapshot_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(snapshot_err(
            path,
            format!("format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(len.checked_mul(8).ok_or_else(|| snapshot_err(path, "bad length"))?)?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if pos != bytes.len() {
        return Err(snapshot_err(path, "trailing bytes"));
    }
    Ok(arrays)
}

pub fn write_arrays(path: &Path, arrays: &[&[f64]]) -> Result<()> {
    fs::write(path, encode_arrays(arrays))?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<Vec<Vec<f64>>> {
    decode_arrays(path, &fs::read(path)?)
}

pub type Meta = BTreeMap<String, String>;

pub fn write_meta(path: &Path, meta: &Meta) -> Result<()> {
    let mut s = String::new();
    for (k, v) in meta {
        s.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = fs::read_to_string(path)?;
    let mut meta = Meta::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| snapshot_err(path, format!("line {}: expected key = value", i + 1)))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(meta)
}

fn get<T: std::str::FromStr>(path: &Path, meta: &Meta, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| snapshot_err(path, format!("missing key {key}")))?
        .parse()
        .map_err(|_| snapshot_err(path, format!("unparsable value for {key}")))
}

fn float_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_float_list(path: &Path, s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| snapshot_err(path, format!("bad number {x}"))))
        .collect()
}

pub fn snapshot_stem(index: usize) -> String {
    format!("snap_{index:05}")
}

/// Writes `<stem>.cric` and `<stem>.meta`.
pub fn save_snapshot(dir: &Path, index: usize, snap: &Snapshot) -> Result<()> {
    let stem = snapshot_stem(index);
    let s = &snap.state;
    let mut meta = Meta::new();
    meta.insert("mode".into(), s.mode.name().into());
    meta.insert("time".into(), s.time.to_string());
    meta.insert("step_count".into(), s.step_count.to_string());
    meta.insert("last_dt".into(), s.last_dt.to_string());
    meta.insert("next_dt".into(), s.next_dt.to_string());
    meta.insert("potential".into(), snap.potential.is_some().to_string());
    match &snap.potential {
        Some(p) => {
            meta.insert("potential_time".into(), p.time.to_string());
            meta.insert("grad_norm_max".into(), p.grad_norm_max.to_string());
            meta.insert("flux".into(), float_list(&p.flux));
            write_arrays(&dir.join(format!("{stem}.cric")), &[&s.u, &p.f, &p.f0, &p.h])?;
        }
        None => write_arrays(&dir.join(format!("{stem}.cric")), &[&s.u])?,
    }
    write_meta(&dir.join(format!("{stem}.meta")), &meta)
}

pub fn load_snapshot(dir: &Path, index: usize) -> Result<Snapshot> {
    let stem = snapshot_stem(index);
    let mpath = dir.join(format!("{stem}.meta"));
    let apath = dir.join(format!("{stem}.cric"));
    let meta = read_meta(&mpath)?;
    let mut arrays = read_arrays(&apath)?;
    let mode = match meta.get("mode").map(String::as_str) {
        Some("raw") => FlowMode::Raw,
        Some("rescaled") => FlowMode::Rescaled,
        _ => return Err(snapshot_err(&mpath, "unknown mode")),
    };
    let with_potential: bool = get(&mpath, &meta, "potential")?;
    let expected = if with_potential { 4 } else { 1 };
    if arrays.len() != expected {
        return Err(snapshot_err(&apath, format!("{} arrays, expected {expected}", arrays.len())));
    }
    let potential = if with_potential {
        let h = arrays.pop().unwrap();
        let f0 = arrays.pop().unwrap();
        let f = arrays.pop().unwrap();
        Some(PotentialState {
            time: get(&mpath, &meta, "potential_time")?,
            f,
            f0,
            h,
            grad_norm_max: get(&mpath, &meta, "grad_norm_max")?,
            flux: parse_float_list(&mpath, meta.get("flux").map_or("", String::as_str))?,
        })
    } else {
        None
    };
    let state = ConformalState {
        mode,
        time: get(&mpath, &meta, "time")?,
        u: arrays.pop().unwrap(),
        step_count: get(&mpath, &meta, "step_count")?,
        last_dt: get(&mpath, &meta, "last_dt")?,
        next_dt: get(&mpath, &meta, "next_dt")?,
    };
    Ok(Snapshot { state, potential })
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub checksum: u64,
    pub bytes: u64,
}

/// Index of an output directory: which files belong to it, their
/// checksums, and whether the run finished.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub complete: bool,
    pub snapshots: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "MANIFEST";

impl Manifest {
    /// Checksums every listed file as it is now on disk.
    pub fn collect(dir: &Path, files: &[String], snapshots: usize, complete: bool) -> Result<Self> {
        let mut entries = Vec::new();
        for f in files {
            let bytes = fs::read(dir.join(f))?;
            entries.push(ManifestEntry {
                file: f.clone(),
                checksum: fnv1a(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        Ok(Self {
            version: FORMAT_VERSION,
            complete,
            snapshots,
            entries,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = format!(
            "format_version = {}\ncomplete = {}\nsnapshots = {}\n",
            self.version, self.complete, self.snapshots
        );
        for e in &self.entries {
            s.push_str(&format!("{:016x} {} {}\n", e.checksum, e.bytes, e.file));
        }
        fs::write(dir.join(MANIFEST), s)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(snapshot_err(&path, "missing; the directory holds no finished write"))
            }
            r => r?,
        };
        let mut meta = Meta::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.trim().into(), v.trim().into());
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, ' ').collect();
            let bad = || snapshot_err(&path, format!("line {}: malformed entry", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                checksum: u64::from_str_radix(parts[0], 16).map_err(|_| bad())?,
                bytes: parts[1].parse().map_err(|_| bad())?,
                file: parts[2].to_string(),
            });
        }
        let version: u32 = get(&path, &meta, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(snapshot_err(
                &path,
                format!("format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(Self {
            version,
            complete: get(&path, &meta, "complete")?,
            snapshots: get(&path, &meta, "snapshots")?,
            entries,
        })
    }

    /// Recomputes every checksum; the first mismatch is an error.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            let path: PathBuf = dir.join(&e.file);
            let bytes = fs::read(&path)?;
            if bytes.len() as u64 != e.bytes || fnv1a(&bytes) != e.checksum {
                return Err(Error::Checksum { path });
            }
        }
        Ok(())
    }
}

/// Flow series as RFC-4180 CSV with a header row.
pub fn write_series(path: &Path, series: &[SeriesRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SERIES_COLUMNS)?;
    for r in series {
        w.write_record([
            r.time.to_string(),
            r.min_u.to_string(),
            r.max_u.to_string(),
            r.min_r.to_string(),
            r.max_r.to_string(),
            r.total_curvature.to_string(),
            r.newton_iters.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<Vec<SeriesRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != SERIES_COLUMNS {
        return Err(snapshot_err(path, "unexpected series header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| snapshot_err(path, format!("bad number {:?}", &rec[i])))
        };
        out.push(SeriesRecord {
            time: f(0)?,
            min_u: f(1)?,
            max_u: f(2)?,
            min_r: f(3)?,
            max_r: f(4)?,
            total_curvature: f(5)?,
            newton_iters: rec[6]
                .parse()
                .map_err(|_| snapshot_err(path, "bad iteration count"))?,
        });
    }
    Ok(out)
}

pub fn write_table(path: &Path, series: &Series) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&series.columns)?;
    for row in &series.rows {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
