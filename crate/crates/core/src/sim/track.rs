//! Closed tracks built from straights and circular arcs, and the
//! projection of a pose onto the centerline.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use crate::error::{Error, Result};
use crate::sim::plant::Pose;
use crate::state::wrap_angle;

/// One piece of centerline geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Straight { length: f64 },
    /// Positive `angle` turns left.
    Arc { radius: f64, angle: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Straight { length } => length,
            Segment::Arc { radius, angle } => radius * angle.abs(),
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { radius, angle } => angle.signum() / radius,
        }
    }

    /// Pose after travelling `u` metres along the segment from `start`.
    fn advance(&self, start: Pose, u: f64) -> Pose {
        let k = self.curvature();
        if k == 0.0 {
            Pose {
                x: start.x + u * libm::cos(start.yaw),
                y: start.y + u * libm::sin(start.yaw),
                yaw: start.yaw,
            }
        } else {
            let yaw = start.yaw + k * u;
            Pose {
                x: start.x + (libm::sin(yaw) - libm::sin(start.yaw)) / k,
                y: start.y - (libm::cos(yaw) - libm::cos(start.yaw)) / k,
                yaw,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    pub segments: Vec<Segment>,
    pub half_width: f64,
    /// Resampling step along the centerline [m].
    pub resolution: f64,
}

/// Half width of the default desk track [m].
pub const DESK_HALF_WIDTH: f64 = 4.0;

/// Radius below which a curve counts as sharp.
pub const SHARP_RADIUS: f64 = 12.0;

impl TrackSpec {
    /// Desk-scale kart layout of about 250 m: two moderate curves (90°, r = 20 m)
    /// and four sharp curves (45°, r = 8 m). The layout is built from two
    /// identical halves, each turning by π, so it closes by construction.
    pub fn desk(half_width: f64) -> Self {
        let half = [
            Segment::Straight { length: 40.0 },
            Segment::Arc {
                radius: 20.0,
                angle: FRAC_PI_2,
            },
            Segment::Straight { length: 21.0 },
            Segment::Arc {
                radius: 8.0,
                angle: FRAC_PI_4,
            },
            Segment::Straight { length: 20.0 },
            Segment::Arc {
                radius: 8.0,
                angle: FRAC_PI_4,
            },
        ];
        let mut segments = half.to_vec();
        segments.extend_from_slice(&half);
        TrackSpec {
            segments,
            half_width,
            resolution: 0.5,
        }
    }

    /// Single full circle, counter-clockwise.
    pub fn circle(radius: f64, half_width: f64) -> Self {
        TrackSpec {
            segments: alloc::vec![Segment::Arc {
                radius,
                angle: 2.0 * PI,
            }],
            half_width,
            resolution: 0.5,
        }
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    pub fn curve_count(&self) -> (usize, usize) {
        let arcs = self.segments.iter().filter_map(|s| match *s {
            Segment::Arc { radius, .. } => Some(radius),
            _ => None,
        });
        arcs.fold((0, 0), |(moderate, sharp), r| {
            if r < SHARP_RADIUS {
                (moderate, sharp + 1)
            } else {
                (moderate + 1, sharp)
            }
        })
    }
}

/// Resampled closed centerline. `points[0] == points[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub points: Vec<[f64; 2]>,
    /// Arc length at each point (chord-accumulated), strictly increasing.
    pub s: Vec<f64>,
    pub curvature: Vec<f64>,
    pub half_width: f64,
    pub total_length: f64,
}

/// Curvilinear coordinates of a pose relative to a track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackFrame {
    pub s: f64,
    /// Signed lateral offset, left of the direction of travel positive.
    pub e_lat: f64,
    pub e_psi: f64,
    /// Index of the centerline segment `[index, index + 1]`.
    pub index: usize,
}

/// Builds and resamples a closed track; fails when the segments do not close.
pub fn build_track(spec: &TrackSpec) -> Result<Track> {
    if spec.segments.is_empty() {
        return Err(Error::Geometry("track has no segments".into()));
    }
    for seg in &spec.segments {
        let ok = match *seg {
            Segment::Straight { length } => length > 0.0,
            Segment::Arc { radius, angle } => radius > 0.0 && angle != 0.0,
        };
        if !ok {
            return Err(Error::Geometry(format!("degenerate segment {seg:?}")));
        }
    }
    if !(spec.half_width > 0.0 && spec.resolution > 0.0) {
        return Err(Error::Geometry("half width and resolution must be positive".into()));
    }
    let start = Pose::default();
    let mut starts = Vec::with_capacity(spec.segments.len());
    let mut pose = start;
    for seg in &spec.segments {
        starts.push(pose);
        pose = seg.advance(pose, seg.length());
    }
    let gap = libm::hypot(pose.x - start.x, pose.y - start.y);
    let heading_gap = wrap_angle(pose.yaw - start.yaw).abs();
    if gap > 1e-6 || heading_gap > 1e-9 {
        return Err(Error::Geometry(format!(
            "track does not close: end is {gap:.6} m and {heading_gap:.6} rad from the start"
        )));
    }

    let length = spec.length();
    let n = libm::ceil(length / spec.resolution) as usize;
    let step = length / n as f64;
    let mut points = Vec::with_capacity(n + 1);
    let mut curvature = Vec::with_capacity(n + 1);
    let mut seg_idx = 0;
    let mut seg_start = 0.0;
    for i in 0..n {
        let u = i as f64 * step;
        while seg_idx + 1 < spec.segments.len() && u >= seg_start + spec.segments[seg_idx].length() {
            seg_start += spec.segments[seg_idx].length();
            seg_idx += 1;
        }
        let seg = &spec.segments[seg_idx];
        let p = seg.advance(starts[seg_idx], u - seg_start);
        points.push([p.x, p.y]);
        curvature.push(seg.curvature());
    }
    points.push(points[0]);
    curvature.push(curvature[0]);
    Track::from_points(points, curvature, spec.half_width)
}

impl Track {
    /// Assembles a closed track from explicit points (last equal to first).
    pub fn from_points(points: Vec<[f64; 2]>, curvature: Vec<f64>, half_width: f64) -> Result<Self> {
        if points.len() < 4 || points.len() != curvature.len() {
            return Err(Error::Geometry("track needs at least 3 distinct points with curvature".into()));
        }
        let (first, last) = (points[0], points[points.len() - 1]);
        if libm::hypot(first[0] - last[0], first[1] - last[1]) > 1e-9 {
            return Err(Error::Geometry("track polyline is not closed".into()));
        }
        let mut s = Vec::with_capacity(points.len());
        s.push(0.0);
        for w in points.windows(2) {
            let ds = libm::hypot(w[1][0] - w[0][0], w[1][1] - w[0][1]);
            if !(ds > 0.0) {
                return Err(Error::Geometry("repeated track point".into()));
            }
            s.push(s[s.len() - 1] + ds);
        }
        let total_length = s[s.len() - 1];
        Ok(Track {
            points,
            s,
            curvature,
            half_width,
            total_length,
        })
    }

    /// Number of centerline segments.
    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    /// Same loop driven in the opposite direction.
    pub fn reversed(&self) -> Track {
        let points: Vec<[f64; 2]> = self.points.iter().rev().copied().collect();
        // curvature[i] describes the segment leaving point i
        let n = self.segments();
        let mut curvature: Vec<f64> = (0..n).map(|i| -self.curvature[n - 1 - i]).collect();
        curvature.push(curvature[0]);
        Track::from_points(points, curvature, self.half_width).expect("reversal preserves validity")
    }

    pub fn heading(&self, index: usize) -> f64 {
        let a = self.points[index];
        let b = self.points[index + 1];
        libm::atan2(b[1] - a[1], b[0] - a[0])
    }

    /// Segment index containing arc length `s` (wrapped into the loop).
    pub fn index_at(&self, s: f64) -> usize {
        let s = self.wrap_s(s);
        match self.s.binary_search_by(|v| v.partial_cmp(&s).expect("finite")) {
            Ok(i) => i.min(self.segments() - 1),
            Err(i) => i.saturating_sub(1).min(self.segments() - 1),
        }
    }

    pub fn wrap_s(&self, s: f64) -> f64 {
        let w = libm::fmod(s, self.total_length);
        if w < 0.0 {
            w + self.total_length
        } else {
            w
        }
    }

    /// Centerline point and heading at arc length `s`.
    pub fn pose_at(&self, s: f64) -> Pose {
        let s = self.wrap_s(s);
        let i = self.index_at(s);
        let a = self.points[i];
        let b = self.points[i + 1];
        let t = (s - self.s[i]) / (self.s[i + 1] - self.s[i]);
        Pose {
            x: a[0] + t * (b[0] - a[0]),
            y: a[1] + t * (b[1] - a[1]),
            yaw: self.heading(i),
        }
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.curvature[self.index_at(s)]
    }

    /// Projection onto segment `i`: `(distance², frame)`.
    fn project_segment(&self, pose: &Pose, i: usize) -> (f64, TrackFrame) {
        let a = self.points[i];
        let b = self.points[i + 1];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let (px, py) = (pose.x - a[0], pose.y - a[1]);
        let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
        let (qx, qy) = (a[0] + t * dx - pose.x, a[1] + t * dy - pose.y);
        let dist2 = qx * qx + qy * qy;
        let len = libm::sqrt(len2);
        let cross = (dx * py - dy * px) / len;
        let heading = libm::atan2(dy, dx);
        let frame = TrackFrame {
            s: self.wrap_s(self.s[i] + t * (self.s[i + 1] - self.s[i])),
            e_lat: if dist2 == 0.0 {
                0.0
            } else {
                libm::copysign(libm::sqrt(dist2), cross)
            },
            e_psi: wrap_angle(pose.yaw - heading),
            index: i,
        };
        (dist2, frame)
    }

    fn finish(&self, best: (f64, TrackFrame)) -> Result<TrackFrame> {
        let limit = 5.0 * self.half_width;
        let dist = libm::sqrt(best.0);
        if dist > limit {
            Err(Error::OffTrack { distance: dist, limit })
        } else {
            Ok(best.1)
        }
    }

    /// Nearest-point projection over the whole centerline.
    pub fn track_frame(&self, pose: &Pose) -> Result<TrackFrame> {
        let best = (0..self.segments())
            .map(|i| self.project_segment(pose, i))
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance"))
            .expect("track has segments");
        self.finish(best)
    }

    /// Projection restricted to `radius` segments around `hint`.
    pub fn track_frame_near(&self, pose: &Pose, hint: usize, radius: usize) -> Result<TrackFrame> {
        let n = self.segments();
        if 2 * radius + 1 >= n {
            return self.track_frame(pose);
        }
        let best = (0..=2 * radius)
            .map(|k| self.project_segment(pose, (hint + n + k - radius) % n))
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance"))
            .expect("non-empty window");
        self.finish(best)
    }
}
