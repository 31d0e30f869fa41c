//! On-disk datasets: a manifest of episode CSVs plus a windowing sidecar.
//!
//! ```text
//! <dir>/dataset.csv        file,tag,direction,seed,rows,truncated
//! <dir>/dataset.meta       format_version, H, dt
//! <dir>/episodes/ep_0000.csv
//! ```

use std::path::{Path, PathBuf};

use penn_mpc_core::dataset::{window_episodes, Sample};
use penn_mpc_core::sim::EpisodeLog;

use crate::error::{Error, Result};
use crate::logs::{quantize_episode, read_episode, write_episode};
use crate::numfmt::exact;

pub const MANIFEST: &str = "dataset.csv";
pub const META: &str = "dataset.meta";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_HEADER: [&str; 6] = ["file", "tag", "direction", "seed", "rows", "truncated"];

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEntry {
    /// Path relative to the dataset directory.
    pub file: String,
    pub tag: String,
    /// `ccw`, `cw`, or `-` for episodes not driven on the track.
    pub direction: String,
    pub seed: u64,
    pub rows: usize,
    pub truncated: bool,
}

/// Windowing metadata shared by every episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub history: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub entries: Vec<EpisodeEntry>,
    pub episodes: Vec<EpisodeLog>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta) -> Self {
        Dataset {
            meta,
            entries: Vec::new(),
            episodes: Vec::new(),
        }
    }

    /// Adds an episode at file precision, so the in-memory copy equals what a reload returns.
    pub fn push(&mut self, log: &EpisodeLog, direction: &str, seed: u64, truncated: bool) {
        let file = format!("episodes/ep_{:04}.csv", self.entries.len());
        self.entries.push(EpisodeEntry {
            file,
            tag: log.tag.clone(),
            direction: direction.to_string(),
            seed,
            rows: log.len(),
            truncated,
        });
        self.episodes.push(quantize_episode(log));
    }

    pub fn total_rows(&self) -> usize {
        self.episodes.iter().map(EpisodeLog::len).sum()
    }

    /// Windows every episode at the sidecar's `H`.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.samples_at(self.meta.history)
    }

    pub fn samples_at(&self, history: usize) -> Result<Vec<Sample>> {
        Ok(window_episodes(&self.episodes, history)?)
    }
}

/// Accepts either the dataset directory or its manifest file.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("episodes")).map_err(|e| Error::io(dir, e))?;
    for (entry, ep) in ds.entries.iter().zip(&ds.episodes) {
        write_episode(&dir.join(&entry.file), ep)?;
    }
    let meta = format!(
        "format_version={FORMAT_VERSION}\nH={}\ndt={}\n",
        ds.meta.history,
        exact(ds.meta.dt)
    );
    let meta_path = dir.join(META);
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let res = (|| {
        w.write_record(MANIFEST_HEADER)?;
        for e in &ds.entries {
            w.write_record([
                e.file.clone(),
                e.tag.clone(),
                e.direction.clone(),
                e.seed.to_string(),
                e.rows.to_string(),
                e.truncated.to_string(),
            ])?;
        }
        w.flush()?;
        Ok::<_, csv::Error>(())
    })();
    res.map_err(|e| Error::format(&path, e.to_string()))
}

fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut version, mut history, mut dt) = (None, None, None);
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, line_no, format!("expected `key=value`, got `{line}`")))?;
        let bad = || Error::parse(path, line_no, format!("invalid value for `{k}`: `{v}`"));
        match k {
            "format_version" => version = Some(v.parse::<u32>().map_err(|_| bad())?),
            "H" => history = Some(v.parse::<usize>().map_err(|_| bad())?),
            "dt" => dt = Some(v.parse::<f64>().map_err(|_| bad())?),
            _ => return Err(Error::parse(path, line_no, format!("unknown key `{k}`"))),
        }
    }
    match version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::format(path, format!("unsupported format_version {v}"))),
        None => return Err(Error::format(path, "missing format_version")),
    }
    let history = history.filter(|h| *h >= 1).ok_or_else(|| Error::format(path, "missing or zero `H`"))?;
    let dt = dt.filter(|d| *d > 0.0).ok_or_else(|| Error::format(path, "missing or non-positive `dt`"))?;
    Ok(DatasetMeta { history, dt })
}

fn parse_entry(path: &Path, line: u64, rec: &csv::StringRecord) -> Result<EpisodeEntry> {
    let bad = |col: &str| Error::parse(path, line, format!("invalid `{col}` value"));
    Ok(EpisodeEntry {
        file: rec[0].to_string(),
        tag: rec[1].to_string(),
        direction: rec[2].to_string(),
        seed: rec[3].parse().map_err(|_| bad("seed"))?,
        rows: rec[4].parse().map_err(|_| bad("rows"))?,
        truncated: rec[5].parse().map_err(|_| bad("truncated"))?,
    })
}

/// Loads a dataset from its directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = resolve_manifest(path);
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let meta = read_meta(&dir.join(META))?;
    let mut rd = csv::Reader::from_path(&manifest).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(&manifest, e),
        other => Error::format(&manifest, format!("{other:?}")),
    })?;
    let header = rd.headers().map_err(|e| Error::parse(&manifest, 1, e.to_string()))?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(Error::format(
            &manifest,
            format!(
                "schema mismatch: expected columns `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut ds = Dataset::new(meta);
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::parse(&manifest, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let entry = parse_entry(&manifest, line, &rec)?;
        let ep_path = dir.join(&entry.file);
        let ep = read_episode(&ep_path, meta.dt, &entry.tag)?;
        if ep.len() != entry.rows {
            return Err(Error::format(
                &ep_path,
                format!("manifest lists {} rows, file has {}", entry.rows, ep.len()),
            ));
        }
        ds.entries.push(entry);
        ds.episodes.push(ep);
    }
    Ok(ds)
}
