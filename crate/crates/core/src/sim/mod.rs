//! Ground-truth vehicle plant, tracks and scripted drivers.

pub mod maneuver;
pub mod plant;
pub mod track;

pub use maneuver::{scripted_maneuver, scripted_maneuver_with, Direction, EpisodeLog, LogRow, ManeuverKind, ManeuverOutcome, PurePursuit};
pub use plant::{plant_step, tire_lateral_force, PlantParams, PlantState, Pose, TireParams};
pub use track::{build_track, Segment, Track, TrackFrame, TrackSpec, DESK_HALF_WIDTH, SHARP_RADIUS};
