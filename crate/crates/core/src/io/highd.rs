//! Drone-recording CSV ingestion.
//!
//! The input is the public two-file layout used by the highD family of
//! datasets: a `*_tracks.csv` with one row per vehicle per frame, and a
//! `*_recordingMeta.csv` with the frame rate and the lane-marking offsets.
//! Tracks are resampled onto a recording-wide grid at the model rate and cut
//! into fixed-length windows; lane geometry is rebuilt from the marking
//! offsets in the meta file.
//!
//! Coordinates are kept exactly as recorded (in particular the image-style
//! y-axis and the leftward travel direction of the upper carriageway); the
//! rest of the pipeline never assumes a particular frame. The only
//! conversion applied is bounding-box corner → body center.

use super::IoError;
use crate::geom::{Pose, Vec2};
use crate::scene::{
    rasterize_map, AgentState, BoundaryKind, LaneGeometry, Scene, SceneMap, Trajectory,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// Position residual allowed between recorded positions and the Euler
/// integral of recorded velocities (m). Real data at 5 Hz carries roughly
/// a·dt²/2 ≈ 0.1 m of residual under hard braking.
const RECORDED_TOLERANCE_M: f64 = 0.5;
/// Raster sampling for rebuilt maps (cells per meter); the standard
/// preprocessing scale.
const RASTER_PX_PER_M: f64 = 2.0;
/// Margin added around the observed track extent when sizing the raster (m).
const MAP_MARGIN_M: f64 = 20.0;

/// One row of a tracks file, column names mapped to snake_case.
///
/// `x`/`y` are the upper-left bounding-box corner as recorded; `width` is
/// the box extent along x (vehicle length for highway travel) and `height`
/// the extent along y (vehicle width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawTrackRow {
    pub frame: i64,
    pub id: i64,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub x_velocity: f64,
    pub y_velocity: f64,
    pub lane_id: i64,
}

impl RawTrackRow {
    /// Body-center position (corner plus half extents).
    pub fn center(&self) -> Vec2<f64> {
        Vec2::new(self.x + 0.5 * self.width, self.y + 0.5 * self.height)
    }
}

/// The subset of a recording-meta file the pipeline needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub recording_id: u64,
    /// Frames per second of the raw tracks.
    pub frame_rate: f64,
    /// Lane-marking y offsets of the upper carriageway, ascending (m).
    pub upper_lane_markings: Vec<f64>,
    /// Lane-marking y offsets of the lower carriageway, ascending (m).
    pub lower_lane_markings: Vec<f64>,
}

/// Resampling and windowing knobs for [`parse_highd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighdOptions {
    /// Model sample rate the tracks are resampled to.
    pub target_hz: f64,
    /// Steps of observed history per window.
    pub history_horizon: usize,
    /// Steps of future per window.
    pub future_horizon: usize,
    /// Window hop in resampled steps; `None` means one full window
    /// (non-overlapping).
    pub stride: Option<usize>,
    /// Windows with fewer fully-covering agents than this are dropped.
    pub min_agents: usize,
}

impl Default for HighdOptions {
    fn default() -> Self {
        Self {
            target_hz: 5.0,
            history_horizon: 10,
            future_horizon: 30,
            stride: None,
            min_agents: 2,
        }
    }
}

/// Read a tracks CSV and group rows per vehicle id (ascending), frames in
/// recording order. This is the pre-windowing stage: one entry per vehicle,
/// raw samples untouched.
pub fn read_raw_tracks(path: &Path) -> Result<Vec<(i64, Vec<RawTrackRow>)>, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;

    let headers = reader
        .headers()
        .map_err(|e| IoError::Schema(format!("unreadable header row: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize, IoError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::Schema(format!("tracks file is missing column '{name}'")))
    };
    let c_frame = col("frame")?;
    let c_id = col("id")?;
    let c_x = col("x")?;
    let c_y = col("y")?;
    let c_width = col("width")?;
    let c_height = col("height")?;
    let c_xv = col("xVelocity")?;
    let c_yv = col("yVelocity")?;
    let c_lane = col("laneId")?;

    let mut by_id: BTreeMap<i64, Vec<RawTrackRow>> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| IoError::Schema(format!("unreadable row: {e}")))?;
        let field = |c: usize, name: &str| -> Result<&str, IoError> {
            record.get(c).ok_or_else(|| {
                IoError::Schema(format!("data row {} has no '{name}' field", idx + 1))
            })
        };
        let int = |c: usize, name: &str| -> Result<i64, IoError> {
            let raw = field(c, name)?;
            raw.parse().map_err(|_| {
                IoError::Schema(format!("data row {}: '{raw}' is not an integer {name}", idx + 1))
            })
        };
        let num = |c: usize, name: &str| -> Result<f64, IoError> {
            let raw = field(c, name)?;
            let v: f64 = raw.parse().map_err(|_| {
                IoError::Schema(format!("data row {}: '{raw}' is not a number for {name}", idx + 1))
            })?;
            if !v.is_finite() {
                return Err(IoError::Schema(format!(
                    "data row {}: non-finite {name}",
                    idx + 1
                )));
            }
            Ok(v)
        };
        let row = RawTrackRow {
            frame: int(c_frame, "frame")?,
            id: int(c_id, "id")?,
            x: num(c_x, "x")?,
            y: num(c_y, "y")?,
            width: num(c_width, "width")?,
            height: num(c_height, "height")?,
            x_velocity: num(c_xv, "xVelocity")?,
            y_velocity: num(c_yv, "yVelocity")?,
            lane_id: int(c_lane, "laneId")?,
        };
        by_id.entry(row.id).or_default().push(row);
    }

    for (&id, rows) in &by_id {
        for pair in rows.windows(2) {
            if pair[1].frame != pair[0].frame + 1 {
                let reason = if pair[1].frame <= pair[0].frame {
                    format!(
                        "frames not strictly increasing ({} then {})",
                        pair[0].frame, pair[1].frame
                    )
                } else {
                    format!(
                        "frame gap between {} and {}",
                        pair[0].frame, pair[1].frame
                    )
                };
                return Err(IoError::CorruptTrack { id, reason });
            }
        }
        if let Some(bad) = rows.iter().find(|r| r.width <= 0.0 || r.height <= 0.0) {
            return Err(IoError::CorruptTrack {
                id,
                reason: format!("non-positive footprint at frame {}", bad.frame),
            });
        }
    }

    Ok(by_id.into_iter().collect())
}

/// Read the recording-meta CSV (frame rate, lane markings, recording id).
pub fn read_recording_meta(path: &Path) -> Result<RecordingMeta, IoError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| IoError::Schema(format!("unreadable header row: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize, IoError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::Schema(format!("meta file is missing column '{name}'")))
    };
    let c_id = col("id")?;
    let c_rate = col("frameRate")?;
    let c_upper = col("upperLaneMarkings")?;
    let c_lower = col("lowerLaneMarkings")?;

    let record = reader
        .records()
        .next()
        .ok_or_else(|| IoError::Schema("meta file has no data row".into()))?
        .map_err(|e| IoError::Schema(format!("unreadable row: {e}")))?;
    let field = |c: usize, name: &str| -> Result<&str, IoError> {
        record
            .get(c)
            .ok_or_else(|| IoError::Schema(format!("meta row has no '{name}' field", )))
    };

    let recording_id: u64 = field(c_id, "id")?
        .parse()
        .map_err(|_| IoError::Schema("meta 'id' is not an unsigned integer".into()))?;
    let frame_rate: f64 = field(c_rate, "frameRate")?
        .parse()
        .map_err(|_| IoError::Schema("meta 'frameRate' is not a number".into()))?;
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(IoError::Schema(format!(
            "frame rate must be positive, got {frame_rate}"
        )));
    }

    let markings = |c: usize, name: &str| -> Result<Vec<f64>, IoError> {
        let raw = field(c, name)?;
        let mut out = Vec::new();
        for part in raw.split(';').filter(|p| !p.trim().is_empty()) {
            let v: f64 = part.trim().parse().map_err(|_| {
                IoError::Schema(format!("{name}: '{part}' is not a number"))
            })?;
            out.push(v);
        }
        if out.windows(2).any(|p| p[1] <= p[0]) {
            return Err(IoError::Schema(format!("{name} must be ascending")));
        }
        Ok(out)
    };
    let upper_lane_markings = markings(c_upper, "upperLaneMarkings")?;
    let lower_lane_markings = markings(c_lower, "lowerLaneMarkings")?;
    if upper_lane_markings.len() < 2 && lower_lane_markings.len() < 2 {
        return Err(IoError::Schema(
            "need at least two lane markings on one carriageway".into(),
        ));
    }

    Ok(RecordingMeta {
        recording_id,
        frame_rate,
        upper_lane_markings,
        lower_lane_markings,
    })
}

/// Ingest one recording: read both files, resample every track onto a shared
/// grid at `opts.target_hz`, rebuild lane geometry from the marking offsets,
/// and window the result into scenes of `history + future` steps. Windows
/// keep only agents that cover them fully; the lowest id becomes the ego.
pub fn parse_highd(
    tracks_csv: &Path,
    recording_meta_csv: &Path,
    opts: &HighdOptions,
) -> Result<Vec<Scene<f64>>, IoError> {
    if !(opts.target_hz.is_finite() && opts.target_hz > 0.0) {
        return Err(IoError::InvalidConfig("target_hz must be positive"));
    }
    if opts.history_horizon == 0 || opts.future_horizon == 0 {
        return Err(IoError::InvalidConfig("horizons must be at least 1 step"));
    }
    if opts.min_agents == 0 {
        return Err(IoError::InvalidConfig("min_agents must be at least 1"));
    }

    let meta = read_recording_meta(recording_meta_csv)?;
    let tracks = read_raw_tracks(tracks_csv)?;
    if tracks.is_empty() {
        return Ok(Vec::new());
    }

    let resampled: Vec<ResampledTrack> = tracks
        .iter()
        .filter_map(|(id, rows)| resample_track(*id, rows, meta.frame_rate, opts.target_hz))
        .collect();
    if resampled.is_empty() {
        return Ok(Vec::new());
    }

    let map = Arc::new(build_recording_map(&meta, &tracks)?);

    let window = opts.history_horizon + opts.future_horizon;
    let stride = opts.stride.unwrap_or(window).max(1);
    let g_min = resampled.iter().map(|t| t.grid_start).min().unwrap();
    let g_max = resampled
        .iter()
        .map(|t| t.grid_start + t.states.len())
        .max()
        .unwrap();

    let mut scenes = Vec::new();
    let mut start = g_min;
    while start + window <= g_max {
        let mut agents = Vec::new();
        for track in &resampled {
            if track.grid_start <= start
                && track.grid_start + track.states.len() >= start + window
            {
                let lo = start - track.grid_start;
                let states = track.states[lo..lo + window].to_vec();
                agents.push(Trajectory::new(
                    track.id,
                    opts.target_hz,
                    start as f64 / opts.target_hz,
                    states,
                    RECORDED_TOLERANCE_M,
                )?);
            }
        }
        if agents.len() >= opts.min_agents {
            let ego_id = agents.iter().map(|t| t.agent_id).min().unwrap();
            scenes.push(Scene::new(
                agents,
                Arc::clone(&map),
                ego_id,
                opts.history_horizon,
                opts.future_horizon,
            )?);
        }
        start += stride;
    }
    Ok(scenes)
}

struct ResampledTrack {
    id: i64,
    /// Index of the first sample on the recording-wide grid
    /// (grid point `g` sits at `g / target_hz` seconds).
    grid_start: usize,
    states: Vec<AgentState<f64>>,
}

/// Resample one track onto the recording-wide grid. When the frame rate is
/// an integer multiple of the target this is pure decimation (exact copies);
/// otherwise position and velocity are interpolated linearly between the
/// bracketing frames. Returns `None` for tracks too short to hit the grid.
fn resample_track(
    id: i64,
    rows: &[RawTrackRow],
    frame_rate: f64,
    target_hz: f64,
) -> Option<ResampledTrack> {
    let first = rows.first()?;
    let last = rows.last()?;
    let step = frame_rate / target_hz;
    let decimate = (step - step.round()).abs() < 1e-9 && step.round() >= 1.0;

    let state_from = |row: &RawTrackRow| {
        let center = row.center();
        let vel = Vec2::new(row.x_velocity, row.y_velocity);
        let heading = if vel.norm() > 1e-6 { vel.angle() } else { 0.0 };
        // Box extents: x extent is the vehicle length in this data layout.
        AgentState::new(id, center, vel, heading, row.width, row.height)
            .expect("raw rows are pre-validated")
    };

    let mut states = Vec::new();
    let grid_start;
    if decimate {
        let step = step.round() as i64;
        let mut g = (first.frame + step - 1).div_euclid(step); // ceil(first/step)
        grid_start = usize::try_from(g).ok()?;
        while g * step <= last.frame {
            let idx = usize::try_from(g * step - first.frame).ok()?;
            states.push(state_from(&rows[idx]));
            g += 1;
        }
    } else {
        let t0 = first.frame as f64 / frame_rate;
        let t1 = last.frame as f64 / frame_rate;
        let mut g = (t0 * target_hz - 1e-9).ceil().max(0.0) as usize;
        grid_start = g;
        loop {
            let t = g as f64 / target_hz;
            if t > t1 + 1e-9 {
                break;
            }
            let fi = ((t * frame_rate) - first.frame as f64).clamp(0.0, rows.len() as f64 - 1.0);
            let lo = fi.floor() as usize;
            let hi = (lo + 1).min(rows.len() - 1);
            let w = fi - lo as f64;
            let a = &rows[lo];
            let b = &rows[hi];
            let lerp = |x: f64, y: f64| x + (y - x) * w;
            let blended = RawTrackRow {
                frame: a.frame,
                id,
                x: lerp(a.x, b.x),
                y: lerp(a.y, b.y),
                width: lerp(a.width, b.width),
                height: lerp(a.height, b.height),
                x_velocity: lerp(a.x_velocity, b.x_velocity),
                y_velocity: lerp(a.y_velocity, b.y_velocity),
                lane_id: a.lane_id,
            };
            states.push(state_from(&blended));
            g += 1;
        }
    }

    if states.is_empty() {
        return None;
    }
    Some(ResampledTrack {
        id,
        grid_start,
        states,
    })
}

/// Rebuild lane geometry from the marking offsets and rasterize it over the
/// observed track extent. Lanes run the full x span; each pair of adjacent
/// markings bounds one lane.
fn build_recording_map(
    meta: &RecordingMeta,
    tracks: &[(i64, Vec<RawTrackRow>)],
) -> Result<SceneMap<f64>, IoError> {
    let xs = tracks
        .iter()
        .flat_map(|(_, rows)| rows.iter())
        .map(|r| r.center().x);
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
    }
    let x_lo = x_min - MAP_MARGIN_M;
    let x_hi = x_max + MAP_MARGIN_M;

    let mut lanes = Vec::new();
    let mut lane_id = 1;
    for markings in [&meta.upper_lane_markings, &meta.lower_lane_markings] {
        for pair in markings.windows(2) {
            let (top, bottom) = (pair[0], pair[1]);
            let line = |y: f64| vec![Vec2::new(x_lo, y), Vec2::new(x_hi, y)];
            lanes.push(LaneGeometry {
                lane_id,
                centerline: line(0.5 * (top + bottom)),
                left_boundary: line(top),
                right_boundary: line(bottom),
                boundary_kind: BoundaryKind::Dashed,
            });
            lane_id += 1;
        }
    }

    let y_all: Vec<f64> = meta
        .upper_lane_markings
        .iter()
        .chain(&meta.lower_lane_markings)
        .copied()
        .collect();
    let y_min = y_all.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y_all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let center = Vec2::new(0.5 * (x_lo + x_hi), 0.5 * (y_min + y_max));
    // Whole-meter extents keep cell counts integral at 2 px/m.
    let grid = rasterize_map(
        &lanes,
        Pose::new(center, 0.0),
        (x_hi - x_lo).ceil(),
        (y_max - y_min + 2.0 * MAP_MARGIN_M).ceil(),
        RASTER_PX_PER_M,
    )?;
    Ok(SceneMap {
        map_id: meta.recording_id,
        lanes,
        grid,
    })
}

fn csv_open_error(path: &Path, e: csv::Error) -> IoError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IoError::File {
            path: path.to_path_buf(),
            source,
        },
        other => IoError::Schema(format!("{other:?}")),
    }
}
