//! License-free synthetic corpus.
//!
//! Scenes are composed on two fixed road layouts — a straight multi-lane
//! carriageway and a gently curved arc — from three maneuver templates:
//! constant-acceleration car-following, sigmoid lane changes, and braking
//! pulses with a delayed follower reaction. The templates are deliberately
//! conservative (generous headways, mild decelerations) so the corpus is a
//! safe baseline: elevated-risk scenes are supposed to come out of the
//! adversarial pipeline, not out of the training data.
//!
//! Trajectories are realized by integrating the velocity program exactly
//! (positions are the running Euler sum of the stored velocities), so the
//! kinematic-consistency residual is zero to floating-point precision.

use super::IoError;
use crate::geom::Vec2;
use crate::scene::{
    rasterize_map, AgentState, BoundaryKind, LaneGeometry, Scene, SceneMap, Trajectory,
};
use crate::Poser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Lane width of both synthetic layouts (m).
pub const LANE_WIDTH_M: f64 = 3.5;
/// Usable road length along the travel direction (m).
const ROAD_LENGTH_M: f64 = 500.0;
/// Centerline radius of the curved layout (m).
const CURVE_RADIUS_M: f64 = 400.0;
/// Half the angular extent of the curved layout (rad).
const HALF_SPAN_RAD: f64 = ROAD_LENGTH_M / (2.0 * CURVE_RADIUS_M);
/// Raster sampling of the synthetic maps (cells per meter).
const RASTER_PX_PER_M: f64 = 2.0;
/// Points per lane polyline.
const POLYLINE_POINTS: usize = 33;
/// Residual bound passed to trajectory validation (m). Positions are the
/// exact integral of the stored velocities, so anything above fp noise
/// would be a generator bug.
const SYNTH_TOLERANCE_M: f64 = 1e-6;

/// Fractions of scenes per maneuver template; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverMix {
    pub follow: f64,
    pub lane_change: f64,
    pub brake: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self {
            follow: 0.5,
            lane_change: 0.3,
            brake: 0.2,
        }
    }
}

impl ManeuverMix {
    pub fn validate(&self) -> Result<(), IoError> {
        let parts = [self.follow, self.lane_change, self.brake];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(IoError::InvalidConfig(
                "maneuver mix fractions must be non-negative",
            ));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(IoError::InvalidConfig("maneuver mix must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub num_scenes: usize,
    /// Lanes per layout, all in the same travel direction.
    pub lanes: usize,
    /// Ego cruise speeds are drawn uniformly from this range (m/s).
    pub speed_range: (f64, f64),
    pub mix: ManeuverMix,
    /// Std-dev of the per-step longitudinal acceleration jitter (m/s²).
    pub accel_noise_std: f64,
    /// Std-dev of the lane-change amplitude jitter, as a fraction of a lane
    /// width.
    pub lateral_noise_std: f64,
    /// Fraction of scenes placed on the curved layout.
    pub curved_fraction: f64,
    pub history_horizon: usize,
    pub future_horizon: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            num_scenes: 100,
            lanes: 3,
            speed_range: (12.0, 28.0),
            mix: ManeuverMix::default(),
            accel_noise_std: 0.15,
            lateral_noise_std: 0.05,
            curved_fraction: 0.3,
            history_horizon: 10,
            future_horizon: 30,
            sample_rate_hz: 5.0,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.num_scenes == 0 {
            return Err(IoError::InvalidConfig("num_scenes must be at least 1"));
        }
        if self.lanes == 0 || self.lanes > 6 {
            return Err(IoError::InvalidConfig("lanes must be between 1 and 6"));
        }
        let (lo, hi) = self.speed_range;
        if !(lo.is_finite() && hi.is_finite() && 1.0 <= lo && lo <= hi && hi <= 40.0) {
            return Err(IoError::InvalidConfig(
                "speed_range must satisfy 1 ≤ low ≤ high ≤ 40 m/s",
            ));
        }
        self.mix.validate()?;
        if !(self.accel_noise_std.is_finite() && self.accel_noise_std >= 0.0) {
            return Err(IoError::InvalidConfig("accel_noise_std must be ≥ 0"));
        }
        if !(self.lateral_noise_std.is_finite() && self.lateral_noise_std >= 0.0) {
            return Err(IoError::InvalidConfig("lateral_noise_std must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.curved_fraction) {
            return Err(IoError::InvalidConfig("curved_fraction must be in [0, 1]"));
        }
        if self.history_horizon == 0 || self.future_horizon == 0 {
            return Err(IoError::InvalidConfig("horizons must be at least 1 step"));
        }
        if !(self.sample_rate_hz.is_finite()
            && self.sample_rate_hz > 0.0
            && self.sample_rate_hz <= 50.0)
        {
            return Err(IoError::InvalidConfig("sample_rate_hz must be in (0, 50]"));
        }
        Ok(())
    }
}

/// Generate a corpus with a fresh generator seeded from `config.seed`.
/// Deterministic: the same config always yields the same scenes.
pub fn generate_synthetic_corpus(
    config: &SyntheticCorpusConfig,
) -> Result<Vec<Scene<f64>>, IoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    generate_synthetic_corpus_with(config, &mut rng)
}

/// Same as [`generate_synthetic_corpus`] but drawing from a caller-supplied
/// generator, for callers that thread one RNG through a larger pipeline.
pub fn generate_synthetic_corpus_with(
    config: &SyntheticCorpusConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Scene<f64>>, IoError> {
    config.validate()?;
    let straight = Arc::new(build_map(RoadKind::Straight, config.lanes)?);
    let curved = Arc::new(build_map(RoadKind::Curved, config.lanes)?);
    let mut scenes = Vec::with_capacity(config.num_scenes);
    for _ in 0..config.num_scenes {
        let kind = if rng.gen::<f64>() < config.curved_fraction {
            RoadKind::Curved
        } else {
            RoadKind::Straight
        };
        let map = match kind {
            RoadKind::Straight => &straight,
            RoadKind::Curved => &curved,
        };
        let maneuver = draw_maneuver(rng, &config.mix, config.lanes);
        scenes.push(compose_scene(config, kind, Arc::clone(map), maneuver, rng)?);
    }
    Ok(scenes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RoadKind {
    Straight,
    Curved,
}

#[derive(Debug, Clone, Copy)]
enum Maneuver {
    Follow,
    LaneChange,
    Brake,
}

fn draw_maneuver(rng: &mut impl Rng, mix: &ManeuverMix, lanes: usize) -> Maneuver {
    let u: f64 = rng.gen();
    if u < mix.follow {
        Maneuver::Follow
    } else if u < mix.follow + mix.lane_change {
        // A lane change needs a lane to change into.
        if lanes >= 2 {
            Maneuver::LaneChange
        } else {
            Maneuver::Follow
        }
    } else {
        Maneuver::Brake
    }
}

/// Lane-center lateral offsets, symmetric around the road axis, left
/// positive.
fn lane_centers(lanes: usize) -> Vec<f64> {
    (0..lanes)
        .map(|j| (j as f64 - (lanes as f64 - 1.0) / 2.0) * LANE_WIDTH_M)
        .collect()
}

/// Arc-length frame of one lane: maps (distance along lane, leftward
/// offset) to world coordinates. The curved layout bends left around a
/// center above the road, so "left" coincides with "toward smaller radius"
/// and the two layouts share sign conventions.
#[derive(Debug, Clone, Copy)]
struct LaneFrame {
    kind: RoadKind,
    /// Lateral offset of the lane center from the road axis (m).
    y0: f64,
}

impl LaneFrame {
    fn radius(&self) -> f64 {
        CURVE_RADIUS_M - self.y0
    }

    fn span(&self) -> f64 {
        match self.kind {
            RoadKind::Straight => ROAD_LENGTH_M,
            RoadKind::Curved => 2.0 * HALF_SPAN_RAD * self.radius(),
        }
    }

    fn theta(&self, s: f64) -> f64 {
        -HALF_SPAN_RAD + s / self.radius()
    }

    fn point(&self, s: f64, d: f64) -> Vec2<f64> {
        match self.kind {
            RoadKind::Straight => Vec2::new(s - 0.5 * ROAD_LENGTH_M, self.y0 + d),
            RoadKind::Curved => {
                let r = self.radius() - d;
                let th = self.theta(s);
                Vec2::new(r * th.sin(), CURVE_RADIUS_M - r * th.cos())
            }
        }
    }

    fn tangent(&self, s: f64) -> Vec2<f64> {
        match self.kind {
            RoadKind::Straight => Vec2::new(1.0, 0.0),
            RoadKind::Curved => {
                let th = self.theta(s);
                Vec2::new(th.cos(), th.sin())
            }
        }
    }

    fn left(&self, s: f64) -> Vec2<f64> {
        match self.kind {
            RoadKind::Straight => Vec2::new(0.0, 1.0),
            RoadKind::Curved => {
                let th = self.theta(s);
                Vec2::new(-th.sin(), th.cos())
            }
        }
    }
}

fn lane_geometry(kind: RoadKind, lane_id: i64, y0: f64) -> LaneGeometry<f64> {
    let frame = LaneFrame { kind, y0 };
    let line = |d: f64| -> Vec<Vec2<f64>> {
        (0..POLYLINE_POINTS)
            .map(|k| frame.point(frame.span() * k as f64 / (POLYLINE_POINTS - 1) as f64, d))
            .collect()
    };
    LaneGeometry {
        lane_id,
        centerline: line(0.0),
        left_boundary: line(0.5 * LANE_WIDTH_M),
        right_boundary: line(-0.5 * LANE_WIDTH_M),
        boundary_kind: BoundaryKind::Dashed,
    }
}

fn build_map(kind: RoadKind, lanes: usize) -> Result<SceneMap<f64>, IoError> {
    let geometry: Vec<LaneGeometry<f64>> = lane_centers(lanes)
        .into_iter()
        .enumerate()
        .map(|(j, y0)| lane_geometry(kind, j as i64 + 1, y0))
        .collect();
    let (map_id, origin, extent_l, extent_w) = match kind {
        RoadKind::Straight => (
            1,
            Vec2::zero(),
            ROAD_LENGTH_M + 20.0,
            lanes as f64 * LANE_WIDTH_M + 16.0,
        ),
        RoadKind::Curved => (2, Vec2::new(0.0, 37.0), 500.0, 110.0),
    };
    let grid = rasterize_map(
        &geometry,
        Poser::new(origin, 0.0),
        extent_l,
        extent_w,
        RASTER_PX_PER_M,
    )?;
    Ok(SceneMap {
        map_id,
        lanes: geometry,
        grid,
    })
}

/// Velocity program for one agent, before realization into states.
struct Plan {
    id: i64,
    lane: usize,
    s0: f64,
    d0: f64,
    v_long: Vec<f64>,
    d_rate: Vec<f64>,
    dims: (f64, f64),
}

fn draw_dims(rng: &mut impl Rng) -> (f64, f64) {
    (rng.gen_range(4.2..=5.0), rng.gen_range(1.8..=2.05))
}

fn noise_vec(rng: &mut impl Rng, std: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

fn speed_profile(
    v0: f64,
    mut accel: impl FnMut(usize) -> f64,
    steps: usize,
    dt: f64,
    floor: f64,
    ceil: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps);
    let mut cur = v0.clamp(floor, ceil);
    for k in 0..steps {
        out.push(cur);
        cur = (cur + accel(k) * dt).clamp(floor, ceil);
    }
    out
}

fn compose_scene(
    cfg: &SyntheticCorpusConfig,
    kind: RoadKind,
    map: Arc<SceneMap<f64>>,
    maneuver: Maneuver,
    rng: &mut impl Rng,
) -> Result<Scene<f64>, IoError> {
    let steps = cfg.history_horizon + cfg.future_horizon;
    let dt = 1.0 / cfg.sample_rate_hz;
    let (lo, hi) = cfg.speed_range;
    let lanes = cfg.lanes;
    let ego_lane = rng.gen_range(0..lanes);
    let still = vec![0.0; steps];
    let mut plans: Vec<Plan> = Vec::new();

    match maneuver {
        Maneuver::Follow => {
            let v0 = rng.gen_range(lo..=hi);
            let a0 = rng.gen_range(-0.3..=0.3);
            let jit_e = noise_vec(rng, cfg.accel_noise_std, steps);
            let v_ego = speed_profile(v0, |k| a0 + jit_e[k], steps, dt, 0.5, hi * 1.3);

            let v0_l = (v0 * rng.gen_range(0.97..=1.08)).clamp(lo * 0.8, hi * 1.15);
            let a_l = rng.gen_range(-0.3..=0.3);
            let jit_l = noise_vec(rng, cfg.accel_noise_std, steps);
            let v_lead = speed_profile(v0_l, |k| a_l + jit_l[k], steps, dt, 0.5, hi * 1.15);

            let s0 = rng.gen_range(40.0..=120.0);
            let gap0 = v0 * rng.gen_range(2.6..=3.2) + 6.0;
            plans.push(Plan {
                id: 1,
                lane: ego_lane,
                s0,
                d0: 0.0,
                v_long: v_ego,
                d_rate: still.clone(),
                dims: draw_dims(rng),
            });
            plans.push(Plan {
                id: 2,
                lane: ego_lane,
                s0: s0 + gap0,
                d0: 0.0,
                v_long: v_lead,
                d_rate: still.clone(),
                dims: draw_dims(rng),
            });

            if lanes >= 2 && rng.gen_bool(0.5) {
                let side = if ego_lane + 1 < lanes {
                    ego_lane + 1
                } else {
                    ego_lane - 1
                };
                let v0_a = rng.gen_range(lo..=hi);
                let jit_a = noise_vec(rng, cfg.accel_noise_std, steps);
                let v_amb = speed_profile(v0_a, |k| jit_a[k], steps, dt, 0.5, hi * 1.3);
                let offset = rng.gen_range(-35.0..=35.0);
                plans.push(Plan {
                    id: 3,
                    lane: side,
                    s0: s0 + offset,
                    d0: 0.0,
                    v_long: v_amb,
                    d_rate: still.clone(),
                    dims: draw_dims(rng),
                });
            }
        }
        Maneuver::LaneChange => {
            let v0 = rng.gen_range(lo..=hi);
            let jit_e = noise_vec(rng, cfg.accel_noise_std, steps);
            let v_ego = speed_profile(v0, |k| jit_e[k], steps, dt, 0.5, hi * 1.3);

            let dir: f64 = if ego_lane == 0 {
                1.0
            } else if ego_lane == lanes - 1 {
                -1.0
            } else if rng.gen_bool(0.5) {
                1.0
            } else {
                -1.0
            };
            let amp_jit: f64 = rng.sample(StandardNormal);
            let amp = (1.0 + amp_jit * cfg.lateral_noise_std).clamp(0.8, 1.2);
            let delta = dir * LANE_WIDTH_M * amp;
            let tau = rng.gen_range(0.55..=0.9);
            let t_mid = steps as f64 * dt * rng.gen_range(0.45..=0.6);
            let d_rate: Vec<f64> = (0..steps)
                .map(|k| {
                    let x = (k as f64 * dt - t_mid) / tau;
                    let sig = 1.0 / (1.0 + (-x).exp());
                    delta * sig * (1.0 - sig) / tau
                })
                .collect();

            let s0 = rng.gen_range(45.0..=110.0);
            plans.push(Plan {
                id: 1,
                lane: ego_lane,
                s0,
                d0: 0.0,
                v_long: v_ego,
                d_rate,
                dims: draw_dims(rng),
            });

            // A slower vehicle ahead in the starting lane motivates the
            // change; a mildly closing follower sits in the target lane.
            let gap0 = v0 * rng.gen_range(2.2..=2.8) + 6.0;
            let v0_l = v0 * rng.gen_range(0.90..=0.97);
            let jit_l = noise_vec(rng, cfg.accel_noise_std, steps);
            let v_lead = speed_profile(v0_l, |k| jit_l[k], steps, dt, 0.5, hi * 1.15);
            plans.push(Plan {
                id: 2,
                lane: ego_lane,
                s0: s0 + gap0,
                d0: 0.0,
                v_long: v_lead,
                d_rate: still.clone(),
                dims: draw_dims(rng),
            });

            let target = (ego_lane as i64 + dir as i64) as usize;
            let v0_r = v0 * rng.gen_range(0.95..=1.03);
            let jit_r = noise_vec(rng, cfg.accel_noise_std, steps);
            let v_rear = speed_profile(v0_r, |k| jit_r[k], steps, dt, 0.5, hi * 1.3);
            let rear_gap = rng.gen_range(26.0..=40.0);
            plans.push(Plan {
                id: 3,
                lane: target,
                s0: s0 - rear_gap,
                d0: 0.0,
                v_long: v_rear,
                d_rate: still.clone(),
                dims: draw_dims(rng),
            });
        }
        Maneuver::Brake => {
            let v0_l = rng.gen_range(lo..=hi).max(12.0);
            let t_start = rng.gen_range(1.0..=2.0);
            let a_b = rng.gen_range(-3.0..=-2.0);
            let dur = rng.gen_range(1.5..=2.5);
            let jit_l = noise_vec(rng, cfg.accel_noise_std, steps);
            let v_lead = speed_profile(
                v0_l,
                |k| {
                    let t = k as f64 * dt;
                    let base = if t >= t_start && t < t_start + dur {
                        a_b
                    } else {
                        0.0
                    };
                    base + jit_l[k]
                },
                steps,
                dt,
                3.0,
                hi * 1.15,
            );

            let v0_e = v0_l * rng.gen_range(0.98..=1.04);
            let gap0 = v0_e * rng.gen_range(2.6..=3.2) + 6.0;
            let jit_e = noise_vec(rng, cfg.accel_noise_std, steps);
            // Delayed reaction, then brake 20 % harder than the leader
            // until matched — the classic perception-reaction follower.
            let t_react = t_start + 0.6;
            let mut v_ego = Vec::with_capacity(steps);
            let mut cur = v0_e;
            for k in 0..steps {
                v_ego.push(cur);
                let t = k as f64 * dt;
                let a = if t >= t_react && cur > v_lead[k] {
                    1.2 * a_b
                } else {
                    jit_e[k]
                };
                cur = (cur + a * dt).clamp(2.5, hi * 1.3);
            }

            let s0 = rng.gen_range(80.0..=150.0);
            plans.push(Plan {
                id: 1,
                lane: ego_lane,
                s0,
                d0: 0.0,
                v_long: v_ego,
                d_rate: still.clone(),
                dims: draw_dims(rng),
            });
            plans.push(Plan {
                id: 2,
                lane: ego_lane,
                s0: s0 + gap0,
                d0: 0.0,
                v_long: v_lead,
                d_rate: still.clone(),
                dims: draw_dims(rng),
            });
        }
    }

    let centers = lane_centers(lanes);
    let agents = plans
        .iter()
        .map(|p| realize(p, kind, &centers, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Scene::new(
        agents,
        map,
        1,
        cfg.history_horizon,
        cfg.future_horizon,
    )
    .map_err(Into::into)
}

/// Turn a velocity program into states. Headings follow the velocity;
/// positions are the exact Euler sum of the stored velocities, which is
/// precisely the invariant trajectory validation checks.
fn realize(
    plan: &Plan,
    kind: RoadKind,
    centers: &[f64],
    cfg: &SyntheticCorpusConfig,
) -> Result<Trajectory<f64>, IoError> {
    let frame = LaneFrame {
        kind,
        y0: centers[plan.lane],
    };
    let dt = 1.0 / cfg.sample_rate_hz;
    let mut s = plan.s0;
    let mut pos = frame.point(plan.s0, plan.d0);
    let mut states = Vec::with_capacity(plan.v_long.len());
    for k in 0..plan.v_long.len() {
        let v = plan.v_long[k];
        // Tangent at the step midpoint keeps the integrated path glued to
        // the arc; plain forward Euler drifts outward almost a meter per
        // window at highway speed.
        let s_mid = s + 0.5 * v * dt;
        let vel = frame.tangent(s_mid) * v + frame.left(s_mid) * plan.d_rate[k];
        let heading = if vel.norm() > 1e-9 {
            vel.angle()
        } else {
            frame.tangent(s_mid).angle()
        };
        states.push(AgentState::new(
            plan.id,
            pos,
            vel,
            heading,
            plan.dims.0,
            plan.dims.1,
        )?);
        pos = pos + vel * dt;
        s += v * dt;
    }
    Trajectory::new(plan.id, cfg.sample_rate_hz, 0.0, states, SYNTH_TOLERANCE_M)
        .map_err(Into::into)
}
