//! Episode and track CSV files.

use std::path::Path;

use penn_mpc_core::sim::{EpisodeLog, LogRow, Pose, Track};
use penn_mpc_core::{Action, StateTriple};

use crate::error::{Error, Result};
use crate::numfmt::{exact, sig9};

pub const EPISODE_HEADER: [&str; 9] = ["t", "vx", "vy", "r", "steer", "throttle", "x", "y", "yaw"];
pub const TRACK_HEADER: [&str; 5] = ["s", "x", "y", "curvature", "half_width"];

fn episode_fields(row: &LogRow) -> [f64; 9] {
    [
        row.t,
        row.state.vx,
        row.state.vy,
        row.state.r,
        row.action.steer,
        row.action.throttle,
        row.pose.x,
        row.pose.y,
        row.pose.yaw,
    ]
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut w = csv::WriterBuilder::new().from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV with exactly `header`, returning numeric rows and their line numbers.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(e) => Error::io(path, e),
            other => Error::format(path, format!("{other:?}")),
        })?;
    let found: Vec<String> = rd
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(Error::format(
            path,
            format!("schema mismatch: expected columns `{}`, found `{}`", header.join(","), found.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .zip(header)
            .map(|(f, name)| match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(path, line, format!("column `{name}`: `{f}` is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push((line, vals));
    }
    Ok(out)
}

/// Writes an episode with 9 significant digits per value.
pub fn write_episode(path: &Path, log: &EpisodeLog) -> Result<()> {
    write_rows(
        path,
        &EPISODE_HEADER,
        log.rows.iter().map(|r| episode_fields(r).iter().map(|&v| sig9(v)).collect()),
    )
}

/// Reads an episode sampled every `dt` seconds.
pub fn read_episode(path: &Path, dt: f64, tag: &str) -> Result<EpisodeLog> {
    let rows = read_rows(path, &EPISODE_HEADER)?;
    let mut log = EpisodeLog::new(dt, tag);
    let t0 = rows.first().map_or(0.0, |r| r.1[0]);
    for (i, (line, v)) in rows.into_iter().enumerate() {
        let expect = t0 + i as f64 * dt;
        if (v[0] - expect).abs() > 1e-6 * expect.abs().max(1.0) {
            return Err(Error::parse(
                path,
                line,
                format!("non-uniform timestep: t = {} where {} was expected", v[0], sig9(expect)),
            ));
        }
        log.rows.push(LogRow {
            t: v[0],
            state: StateTriple::new(v[1], v[2], v[3]),
            action: Action {
                steer: v[4],
                throttle: v[5],
            },
            pose: Pose {
                x: v[6],
                y: v[7],
                yaw: v[8],
            },
        });
    }
    Ok(log)
}

/// The log exactly as [`read_episode`] returns it after [`write_episode`].
pub fn quantize_episode(log: &EpisodeLog) -> EpisodeLog {
    let q = |v: f64| sig9(v).parse::<f64>().unwrap_or(v);
    EpisodeLog {
        rows: log
            .rows
            .iter()
            .map(|r| LogRow {
                t: q(r.t),
                state: StateTriple::new(q(r.state.vx), q(r.state.vy), q(r.state.r)),
                action: Action {
                    steer: q(r.action.steer),
                    throttle: q(r.action.throttle),
                },
                pose: Pose {
                    x: q(r.pose.x),
                    y: q(r.pose.y),
                    yaw: q(r.pose.yaw),
                },
            })
            .collect(),
        dt: log.dt,
        tag: log.tag.clone(),
    }
}

/// Writes a track at full precision.
pub fn write_track(path: &Path, track: &Track) -> Result<()> {
    write_rows(
        path,
        &TRACK_HEADER,
        track.points.iter().enumerate().map(|(i, p)| {
            [track.s[i], p[0], p[1], track.curvature[i], track.half_width]
                .iter()
                .map(|&v| exact(v))
                .collect()
        }),
    )
}

pub fn read_track(path: &Path) -> Result<Track> {
    let rows = read_rows(path, &TRACK_HEADER)?;
    let half_width = rows.first().map_or(0.0, |r| r.1[4]);
    if let Some((line, _)) = rows.iter().find(|r| r.1[4] != half_width) {
        return Err(Error::parse(path, *line, "half_width differs between rows"));
    }
    let points = rows.iter().map(|r| [r.1[1], r.1[2]]).collect();
    let curvature = rows.iter().map(|r| r.1[3]).collect();
    Track::from_points(points, curvature, half_width).map_err(|e| Error::format(path, e.to_string()))
}
