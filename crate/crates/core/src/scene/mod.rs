//! Canonical scene representation: agent states, trajectories, lane
//! geometry, rasterized maps, and the interaction graph built from them.

mod graph;
mod raster;

pub use graph::{
    build_scene_graph, relative_kinematics, GraphEdge, RelativeState, SceneGraph,
    NODE_FEATURES_PER_STEP,
};
pub use raster::{rasterize_map, BitRaster, MapGrid};

use crate::geom::{wrap_angle, Obb, Vec2};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Default maximum ‖Δposition − velocity·Δt‖ per step before a trajectory is
/// rejected as kinematically inconsistent.
pub const KINEMATIC_TOLERANCE_M: f64 = 0.5;

/// Default interaction radius for graph edges, meters.
pub const NEIGHBOR_RADIUS_M: f64 = 50.0;

/// Lookahead used for the conflict flag on graph edges, seconds.
pub const CONFLICT_LOOKAHEAD_S: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("agent {agent_id} has no state at step {step}")]
    MissingObservation { agent_id: i64, step: usize },
    #[error("timestamp spacing at index {index} is {dt} s, expected {expected} s")]
    NonUniformSampling { index: usize, dt: f64, expected: f64 },
    #[error(
        "agent {agent_id} step {step}: position residual {residual:.3} m exceeds kinematic tolerance {tolerance} m"
    )]
    KinematicViolation {
        agent_id: i64,
        step: usize,
        residual: f64,
        tolerance: f64,
    },
    #[error("agent {agent_id} footprint must be positive, got length {length} width {width}")]
    BadFootprint {
        agent_id: i64,
        length: f64,
        width: f64,
    },
    #[error("trajectory for agent {0} is empty")]
    EmptyTrajectory(i64),
    #[error("state agent_id {found} inside trajectory of agent {expected}")]
    ForeignState { expected: i64, found: i64 },
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error("ego agent {0} not present in scene")]
    MissingEgo(i64),
    #[error("agent {0} does not share the scene timestamps")]
    MismatchedTimestamps(i64),
    #[error("duplicate agent id {0} in scene")]
    DuplicateAgent(i64),
    #[error("scene needs history_horizon ≥ 1 and trajectories at least that long")]
    ShortHistory,
    #[error("lane list is empty")]
    NoLanes,
    #[error("lane {0} has a polyline with fewer than 2 points")]
    DegenerateLane(i64),
    #[error("raster of {rows}x{cols} cells does not match extent {extent_l}x{extent_w} m at {resolution} px/m")]
    BadRasterDims {
        rows: usize,
        cols: usize,
        extent_l: f64,
        extent_w: f64,
        resolution: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Kinematic state of one agent at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState<F> {
    pub agent_id: i64,
    pub position: Vec2<F>,
    pub velocity: Vec2<F>,
    /// Radians in (−π, π].
    pub heading: F,
    pub length: F,
    pub width: F,
}

impl<F: Scalar> AgentState<F> {
    /// Build a state with the heading normalized and the footprint checked.
    pub fn new(
        agent_id: i64,
        position: Vec2<F>,
        velocity: Vec2<F>,
        heading: F,
        length: F,
        width: F,
    ) -> Result<Self, SceneError> {
        if length <= F::zero() || width <= F::zero() {
            return Err(SceneError::BadFootprint {
                agent_id,
                length: length.as_f64(),
                width: width.as_f64(),
            });
        }
        if !position.is_finite() || !velocity.is_finite() || !heading.is_finite() {
            return Err(SceneError::NonFinite("agent state"));
        }
        Ok(Self {
            agent_id,
            position,
            velocity,
            heading: wrap_angle(heading),
            length,
            width,
        })
    }

    pub fn speed(&self) -> F {
        self.velocity.norm()
    }

    pub fn footprint(&self) -> Obb<F> {
        Obb::new(self.position, self.heading, self.length, self.width)
    }

    /// Center of the front bumper.
    pub fn front_bumper(&self) -> Vec2<F> {
        let half = F::cast(0.5);
        self.position + Vec2::new(self.heading.cos(), self.heading.sin()) * (self.length * half)
    }

    /// Center of the rear bumper.
    pub fn rear_bumper(&self) -> Vec2<F> {
        let half = F::cast(0.5);
        self.position - Vec2::new(self.heading.cos(), self.heading.sin()) * (self.length * half)
    }
}

/// Uniformly sampled state sequence for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<F> {
    pub agent_id: i64,
    /// Samples per second.
    pub sample_rate: F,
    /// Timestamp of `states[0]`, seconds.
    pub start_time: F,
    pub states: Vec<AgentState<F>>,
}

impl<F: Scalar> Trajectory<F> {
    /// Build and validate: footprints positive, headings normalized by the
    /// caller, positions consistent with velocities within `tolerance`.
    pub fn new(
        agent_id: i64,
        sample_rate: F,
        start_time: F,
        states: Vec<AgentState<F>>,
        tolerance: F,
    ) -> Result<Self, SceneError> {
        if sample_rate <= F::zero() {
            return Err(SceneError::BadSampleRate(sample_rate.as_f64()));
        }
        if states.is_empty() {
            return Err(SceneError::EmptyTrajectory(agent_id));
        }
        for s in &states {
            if s.agent_id != agent_id {
                return Err(SceneError::ForeignState {
                    expected: agent_id,
                    found: s.agent_id,
                });
            }
            if s.length <= F::zero() || s.width <= F::zero() {
                return Err(SceneError::BadFootprint {
                    agent_id,
                    length: s.length.as_f64(),
                    width: s.width.as_f64(),
                });
            }
        }
        let traj = Self {
            agent_id,
            sample_rate,
            start_time,
            states,
        };
        traj.check_kinematics(tolerance)?;
        Ok(traj)
    }

    /// Validate explicit timestamps (uniform within 1e-9 s) and delegate to
    /// [`Trajectory::new`].
    pub fn from_samples(
        agent_id: i64,
        samples: &[(F, AgentState<F>)],
        tolerance: F,
    ) -> Result<Self, SceneError> {
        if samples.len() < 2 {
            return Err(SceneError::EmptyTrajectory(agent_id));
        }
        let dt = samples[1].0 - samples[0].0;
        if dt <= F::zero() {
            return Err(SceneError::NonUniformSampling {
                index: 1,
                dt: dt.as_f64(),
                expected: dt.as_f64(),
            });
        }
        for i in 1..samples.len() {
            let step = samples[i].0 - samples[i - 1].0;
            if (step - dt).abs().as_f64() > 1e-9 {
                return Err(SceneError::NonUniformSampling {
                    index: i,
                    dt: step.as_f64(),
                    expected: dt.as_f64(),
                });
            }
        }
        Self::new(
            agent_id,
            dt.recip(),
            samples[0].0,
            samples.iter().map(|(_, s)| *s).collect(),
            tolerance,
        )
    }

    /// Assemble without the kinematic-consistency check. Intended for
    /// synthesized futures, where velocities are forward differences by
    /// construction but the stitch onto observed history (and deliberately
    /// adversarial motion) may exceed the recorded-data tolerance.
    pub fn from_states_unchecked(
        agent_id: i64,
        sample_rate: F,
        start_time: F,
        states: Vec<AgentState<F>>,
    ) -> Self {
        debug_assert!(!states.is_empty());
        Self {
            agent_id,
            sample_rate,
            start_time,
            states,
        }
    }

    fn check_kinematics(&self, tolerance: F) -> Result<(), SceneError> {
        let dt = self.dt();
        for k in 0..self.states.len().saturating_sub(1) {
            let predicted = self.states[k].position + self.states[k].velocity * dt;
            let residual = predicted.distance(self.states[k + 1].position);
            if residual > tolerance {
                return Err(SceneError::KinematicViolation {
                    agent_id: self.agent_id,
                    step: k,
                    residual: residual.as_f64(),
                    tolerance: tolerance.as_f64(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Seconds between samples.
    pub fn dt(&self) -> F {
        self.sample_rate.recip()
    }

    pub fn timestamp(&self, step: usize) -> F {
        self.start_time + F::from_usize(step).unwrap() * self.dt()
    }

    pub fn state(&self, step: usize) -> Result<&AgentState<F>, SceneError> {
        self.states.get(step).ok_or(SceneError::MissingObservation {
            agent_id: self.agent_id,
            step,
        })
    }
}

/// Kind of a painted lane boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    Solid,
    Dashed,
    RoadEdge,
}

/// One lane: centerline plus left/right boundary polylines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry<F> {
    pub lane_id: i64,
    pub centerline: Vec<Vec2<F>>,
    pub left_boundary: Vec<Vec2<F>>,
    pub right_boundary: Vec<Vec2<F>>,
    pub boundary_kind: BoundaryKind,
}

impl<F: Scalar> LaneGeometry<F> {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.centerline.len() < 2
            || self.left_boundary.len() < 2
            || self.right_boundary.len() < 2
        {
            return Err(SceneError::DegenerateLane(self.lane_id));
        }
        Ok(())
    }

    /// Closed polygon: left boundary forward, right boundary reversed.
    pub fn polygon(&self) -> Vec<Vec2<F>> {
        let mut poly = self.left_boundary.clone();
        poly.extend(self.right_boundary.iter().rev().copied());
        poly
    }
}

/// Static context shared by one or many scenes: lanes plus their raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMap<F> {
    /// Stable identifier used to deduplicate maps inside corpus files.
    pub map_id: u64,
    pub lanes: Vec<LaneGeometry<F>>,
    pub grid: MapGrid<F>,
}

/// A windowed multi-agent episode: shared-timestamp trajectories, the map,
/// and the history/future split point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene<F> {
    pub agents: Vec<Trajectory<F>>,
    pub map: Arc<SceneMap<F>>,
    pub ego_id: i64,
    /// Steps of observed history at the start of every trajectory.
    pub history_horizon: usize,
    /// Steps of future after the history (may be absent on inference scenes).
    pub future_horizon: usize,
}

impl<F: Scalar> Scene<F> {
    pub fn new(
        agents: Vec<Trajectory<F>>,
        map: Arc<SceneMap<F>>,
        ego_id: i64,
        history_horizon: usize,
        future_horizon: usize,
    ) -> Result<Self, SceneError> {
        if history_horizon == 0 {
            return Err(SceneError::ShortHistory);
        }
        let ego = agents
            .iter()
            .find(|t| t.agent_id == ego_id)
            .ok_or(SceneError::MissingEgo(ego_id))?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &agents {
            if !seen.insert(t.agent_id) {
                return Err(SceneError::DuplicateAgent(t.agent_id));
            }
            let same_clock = (t.start_time - ego.start_time).abs().as_f64() < 1e-9
                && (t.sample_rate - ego.sample_rate).abs().as_f64() < 1e-9
                && t.len() == ego.len();
            if !same_clock {
                return Err(SceneError::MismatchedTimestamps(t.agent_id));
            }
            if t.len() < history_horizon {
                return Err(SceneError::ShortHistory);
            }
        }
        Ok(Self {
            agents,
            map,
            ego_id,
            history_horizon,
            future_horizon,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn ego_index(&self) -> usize {
        self.agents
            .iter()
            .position(|t| t.agent_id == self.ego_id)
            .expect("validated at construction")
    }

    pub fn ego(&self) -> &Trajectory<F> {
        &self.agents[self.ego_index()]
    }

    pub fn agent(&self, agent_id: i64) -> Option<&Trajectory<F>> {
        self.agents.iter().find(|t| t.agent_id == agent_id)
    }

    /// Index of the last observed (history) step.
    pub fn last_history_step(&self) -> usize {
        self.history_horizon - 1
    }

    /// True when every trajectory carries the full future window.
    pub fn has_future(&self) -> bool {
        self.future_horizon > 0
            && self
                .agents
                .iter()
                .all(|t| t.len() >= self.history_horizon + self.future_horizon)
    }

    /// Ground-truth future positions for one agent, if present.
    pub fn future_positions(&self, idx: usize) -> Option<Vec<Vec2<F>>> {
        let t = &self.agents[idx];
        let end = self.history_horizon + self.future_horizon;
        if t.len() < end {
            return None;
        }
        Some(
            t.states[self.history_horizon..end]
                .iter()
                .map(|s| s.position)
                .collect(),
        )
    }

    pub fn dt(&self) -> F {
        self.agents[0].dt()
    }
}
