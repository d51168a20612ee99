//! Potential-field risk anchoring and surrogate safety indicators.
//!
//! A scalar field over the drivable plane combines Gaussian repulsion around
//! other agents, a hard barrier outside the drivable area, and a quadratic
//! pull toward the point implied by the maneuver directive. Its minimum — the
//! risk anchor p* — marks where a risky interaction is most likely to be
//! staged. The anchor is extended into a full target vector
//! (p*, d_lat*, TTC*, κ*) by a per-maneuver interpolation table, and the
//! indicator functions (TTC / THW / TLC and friends) measure how close a
//! scene actually gets to such targets.

use crate::controller::{ManeuverDirective, ManeuverSide, ManeuverType};
use crate::geom::{point_segment_distance, three_point_curvature, Vec2};
use crate::scalar::Scalar;
use crate::scene::{relative_kinematics, AgentState, LaneGeometry, Scene, Trajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Potential added outside the drivable area.
pub const BOUNDARY_BARRIER: f64 = 1e6;

/// Gradient-refinement step count after the grid search.
const REFINE_STEPS: usize = 20;

/// Ego speed below which THW is reported as unbounded (m/s).
pub const THW_SPEED_DEADBAND: f64 = 0.1;
/// Lateral speed below which TLC is reported as unbounded (m/s).
pub const TLC_SPEED_DEADBAND: f64 = 0.05;

/// TTC everyone agrees is already a crash course (s); strength 1 maps here.
pub const CRITICAL_TTC_S: f64 = 0.3;
/// Lateral gap at strength 1 (m).
pub const CRITICAL_D_LAT_M: f64 = 0.1;
/// Lateral gap at strength 0 (m): adjacent-lane center separation.
pub const SAFE_D_LAT_M: f64 = 3.5;
/// Generic safe TTC anchor (s), the low-risk band edge.
pub const SAFE_TTC_S: f64 = 5.0;
/// Cut-in specific safe TTC anchor (s); cut-ins live below one second.
pub const CUT_IN_TTC_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RiskFieldError {
    #[error("no drivable cell to anchor a risk point on")]
    NoFeasibleAnchor,
    #[error("agent {0} not present in the scene")]
    MissingAgent(i64),
}

/// A duration that may be infinite (no event on the current course).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeToEvent<F> {
    Finite(F),
    /// Serialized as JSON null / an empty CSV cell.
    Unbounded,
}

impl<F: Scalar> TimeToEvent<F> {
    pub fn finite(self) -> Option<F> {
        match self {
            TimeToEvent::Finite(v) => Some(v),
            TimeToEvent::Unbounded => None,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, TimeToEvent::Unbounded)
    }

    /// `self ≤ threshold`, with Unbounded above every threshold.
    pub fn at_most(self, threshold: F) -> bool {
        match self {
            TimeToEvent::Finite(v) => v <= threshold,
            TimeToEvent::Unbounded => false,
        }
    }

    /// `self ≥ threshold`, with Unbounded above every threshold.
    pub fn at_least(self, threshold: F) -> bool {
        match self {
            TimeToEvent::Finite(v) => v >= threshold,
            TimeToEvent::Unbounded => true,
        }
    }
}

/// Surrogate safety indicators for one ego/other pair at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSet<F> {
    pub ttc: TimeToEvent<F>,
    pub thw: TimeToEvent<F>,
    pub tlc: TimeToEvent<F>,
    /// Footprint-to-footprint clearance, clamped at 0 on overlap.
    pub min_distance: F,
    /// Center-lateral distance minus half-widths; negative means overlap.
    pub lateral_gap: F,
}

impl<F: Scalar> IndicatorSet<F> {
    /// Concrete copy for serialization and narration.
    pub fn to_f64(&self) -> IndicatorSet<f64> {
        let t = |v: TimeToEvent<F>| match v {
            TimeToEvent::Finite(x) => TimeToEvent::Finite(x.as_f64()),
            TimeToEvent::Unbounded => TimeToEvent::Unbounded,
        };
        IndicatorSet {
            ttc: t(self.ttc),
            thw: t(self.thw),
            tlc: t(self.tlc),
            min_distance: self.min_distance.as_f64(),
            lateral_gap: self.lateral_gap.as_f64(),
        }
    }
}

/// Safety margin below which a time-to-collision is considered urgent (s).
pub const T_SAFE_S: f64 = 2.0;

/// Where and how hard the optimizer should push.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskTarget<F> {
    pub p_star: Vec2<F>,
    pub d_lat_star: F,
    pub ttc_star: TimeToEvent<F>,
    pub kappa_star: F,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialFieldConfig<F> {
    pub w_rep: F,
    pub w_attr: F,
    /// Gaussian kernel scale around obstacles (m).
    pub kernel_scale: F,
    /// Attractor stiffness (1/m²).
    pub stiffness: F,
    /// Grid-search stride (m).
    pub grid_resolution: F,
}

impl<F: Scalar> Default for PotentialFieldConfig<F> {
    fn default() -> Self {
        Self {
            w_rep: F::one(),
            w_attr: F::one(),
            kernel_scale: F::cast(3.0),
            stiffness: F::cast(0.05),
            grid_resolution: F::one(),
        }
    }
}

impl<F: Scalar> PotentialFieldConfig<F> {
    pub fn validate(&self) -> Result<(), RiskFieldError> {
        // Weights must be strictly positive for the field to be well posed;
        // a zero stride would never advance the scan.
        assert!(
            self.w_rep > F::zero()
                && self.w_attr > F::zero()
                && self.kernel_scale > F::zero()
                && self.stiffness > F::zero()
                && self.grid_resolution > F::zero(),
            "potential field weights must be strictly positive"
        );
        Ok(())
    }
}

/// The world point a directive pulls toward, relative to the ego's pose at
/// the last observed step.
pub fn intent_point<F: Scalar>(scene: &Scene<F>, intent: &ManeuverDirective) -> Vec2<F> {
    let t = scene.last_history_step();
    let ego = scene.ego().state(t).expect("scene validated");
    let u = Vec2::new(ego.heading.cos(), ego.heading.sin());
    let left = u.perp();
    let speed = ego.speed();
    // A speed-scaled look-ahead keeps the anchor in the interaction zone.
    let ahead = (speed * F::cast(1.5)).max(F::cast(5.0)).min(F::cast(30.0));
    let lane_offset = F::cast(SAFE_D_LAT_M);
    let lateral = match intent.side {
        ManeuverSide::Left => left * lane_offset,
        ManeuverSide::Right => left * -lane_offset,
        ManeuverSide::Front | ManeuverSide::Rear => Vec2::zero(),
    };
    let longitudinal = match (intent.kind, intent.side) {
        (ManeuverType::SuddenBrake, ManeuverSide::Rear) => u * -ahead,
        (ManeuverType::HeadOn, _) => u * (ahead + ahead),
        _ => u * ahead,
    };
    ego.position + longitudinal + lateral
}

/// Total potential at a point: weighted repulsion (Gaussian bumps around
/// other agents plus the off-road barrier) and quadratic attraction toward
/// the intent point.
pub fn potential_at<F: Scalar>(
    p: Vec2<F>,
    scene: &Scene<F>,
    intent: &ManeuverDirective,
    config: &PotentialFieldConfig<F>,
) -> F {
    let target = intent_point(scene, intent);
    let mut u_rep = repulsion(p, scene, config);
    if !scene.map.grid.is_drivable(p) {
        u_rep += F::cast(BOUNDARY_BARRIER);
    }
    let d = p - target;
    let u_attr = F::cast(0.5) * config.stiffness * d.dot(d);
    config.w_rep * u_rep + config.w_attr * u_attr
}

fn repulsion<F: Scalar>(p: Vec2<F>, scene: &Scene<F>, config: &PotentialFieldConfig<F>) -> F {
    let t = scene.last_history_step();
    let two_s2 = F::cast(2.0) * config.kernel_scale * config.kernel_scale;
    let mut acc = F::zero();
    for (idx, tr) in scene.agents.iter().enumerate() {
        if idx == scene.ego_index() {
            continue;
        }
        let obs = tr.state(t).expect("scene validated").position;
        let d = p - obs;
        acc += (-d.dot(d) / two_s2).exp();
    }
    acc
}

/// Gradient of the smooth part of the field (barrier excluded; the search
/// never steps off the drivable area).
fn potential_gradient<F: Scalar>(
    p: Vec2<F>,
    scene: &Scene<F>,
    target: Vec2<F>,
    config: &PotentialFieldConfig<F>,
) -> Vec2<F> {
    let t = scene.last_history_step();
    let s2 = config.kernel_scale * config.kernel_scale;
    let two_s2 = F::cast(2.0) * s2;
    let mut g = Vec2::zero();
    for (idx, tr) in scene.agents.iter().enumerate() {
        if idx == scene.ego_index() {
            continue;
        }
        let obs = tr.state(t).expect("scene validated").position;
        let d = p - obs;
        let bump = (-d.dot(d) / two_s2).exp();
        g = g + d * (-bump / s2) * config.w_rep;
    }
    g + (p - target) * (config.stiffness * config.w_attr)
}

/// Minimize the field: coarse scan over drivable cells at the configured
/// stride, then gradient refinement with backtracking. The refined value
/// never exceeds the grid minimum.
pub fn find_risk_anchor<F: Scalar>(
    scene: &Scene<F>,
    intent: &ManeuverDirective,
    config: &PotentialFieldConfig<F>,
) -> Result<Vec2<F>, RiskFieldError> {
    config.validate()?;
    let grid = &scene.map.grid;
    let (rows, cols) = grid.shape();
    let stride = ((config.grid_resolution * grid.resolution).as_f64().round() as usize).max(1);
    let mut best: Option<(F, Vec2<F>)> = None;
    let mut row = 0;
    while row < rows {
        let mut col = 0;
        while col < cols {
            if grid.drivable_area.get(row, col) {
                let p = grid.cell_center(row, col);
                let u = potential_at(p, scene, intent, config);
                if best.map_or(true, |(b, _)| u < b) {
                    best = Some((u, p));
                }
            }
            col += stride;
        }
        row += stride;
    }
    let (mut best_u, mut best_p) = best.ok_or(RiskFieldError::NoFeasibleAnchor)?;

    let target = intent_point(scene, intent);
    let mut step = config.grid_resolution;
    for _ in 0..REFINE_STEPS {
        let g = potential_gradient(best_p, scene, target, config);
        let gn = g.norm();
        if gn < F::cast(1e-12) {
            break;
        }
        let dir = g / gn;
        let mut accepted = false;
        let mut s = step;
        for _ in 0..8 {
            let cand = best_p - dir * s;
            if grid.is_drivable(cand) {
                let u = potential_at(cand, scene, intent, config);
                if u < best_u {
                    best_u = u;
                    best_p = cand;
                    accepted = true;
                    break;
                }
            }
            s *= F::cast(0.5);
        }
        if accepted {
            step = s * F::cast(2.0);
        } else {
            step *= F::cast(0.5);
        }
    }
    Ok(best_p)
}

/// Direction of the polyline segment nearest to `p`.
fn nearest_segment_direction<F: Scalar>(polyline: &[Vec2<F>], p: Vec2<F>) -> Vec2<F> {
    let mut best = F::infinity();
    let mut dir = Vec2::new(F::one(), F::zero());
    for w in polyline.windows(2) {
        let d = point_segment_distance(p, w[0], w[1]);
        if d < best {
            best = d;
            dir = (w[1] - w[0]).normalized();
        }
    }
    dir
}

fn min_polyline_distance<F: Scalar>(p: Vec2<F>, polyline: &[Vec2<F>]) -> F {
    polyline
        .windows(2)
        .map(|w| point_segment_distance(p, w[0], w[1]))
        .fold(F::infinity(), F::min)
}

fn state_at<'a, F: Scalar>(
    scene: &'a Scene<F>,
    agent_id: i64,
    step: usize,
) -> Result<&'a AgentState<F>, RiskFieldError> {
    let tr: &Trajectory<F> = scene
        .agents
        .iter()
        .find(|t| t.agent_id == agent_id)
        .ok_or(RiskFieldError::MissingAgent(agent_id))?;
    tr.state(step).map_err(|_| RiskFieldError::MissingAgent(agent_id))
}

/// Surrogate safety indicators between ego and one other agent at the last
/// observed step.
///
/// * TTC: line-of-sight footprint gap over closing speed (closing only).
/// * THW: longitudinal bumper gap over ego speed, for a vehicle ahead and an
///   ego above the speed deadband; otherwise unbounded.
/// * TLC: distance to the nearest lane boundary over |lateral velocity|
///   w.r.t. the lane direction, above its deadband.
pub fn compute_indicators<F: Scalar>(
    scene: &Scene<F>,
    ego_id: i64,
    other_id: i64,
    lane: &LaneGeometry<F>,
) -> Result<IndicatorSet<F>, RiskFieldError> {
    let step = scene.last_history_step();
    let ego = *state_at(scene, ego_id, step)?;
    let other = *state_at(scene, other_id, step)?;
    Ok(indicators_for_states(&ego, &other, lane))
}

/// The same indicators from bare states (used when scoring decoded futures
/// step by step).
pub fn indicators_for_states<F: Scalar>(
    ego: &AgentState<F>,
    other: &AgentState<F>,
    lane: &LaneGeometry<F>,
) -> IndicatorSet<F> {
    let rel = relative_kinematics(ego, other);
    let ttc = if rel.closing_speed > F::zero() {
        TimeToEvent::Finite(rel.gap.max(F::zero()) / rel.closing_speed)
    } else {
        TimeToEvent::Unbounded
    };

    let u = Vec2::new(ego.heading.cos(), ego.heading.sin());
    let half = F::cast(0.5);
    let d_long = (other.position - ego.position).dot(u) - half * (ego.length + other.length);
    let speed = ego.speed();
    let thw = if speed > F::cast(THW_SPEED_DEADBAND) && d_long > F::zero() {
        TimeToEvent::Finite(d_long / speed)
    } else {
        TimeToEvent::Unbounded
    };

    let lane_dir = nearest_segment_direction(&lane.centerline, ego.position);
    let v_lat = ego.velocity.dot(lane_dir.perp());
    let tlc = if v_lat.abs() > F::cast(TLC_SPEED_DEADBAND) {
        let d_left = min_polyline_distance(ego.position, &lane.left_boundary);
        let d_right = min_polyline_distance(ego.position, &lane.right_boundary);
        TimeToEvent::Finite(d_left.min(d_right) / v_lat.abs())
    } else {
        TimeToEvent::Unbounded
    };

    let d_lat = (other.position - ego.position).dot(u.perp()).abs();
    let lateral_gap = d_lat - half * (ego.width + other.width);

    IndicatorSet {
        ttc,
        thw,
        tlc,
        min_distance: rel.gap.max(F::zero()),
        lateral_gap,
    }
}

/// Path curvature at `step` from the three surrounding trajectory points
/// (the last admissible triple near the ends). Straight lines give 0.
pub fn path_curvature<F: Scalar>(tr: &Trajectory<F>, step: usize) -> F {
    if tr.len() < 3 {
        return F::zero();
    }
    let mid = step.clamp(1, tr.len() - 2);
    three_point_curvature(
        tr.states[mid - 1].position,
        tr.states[mid].position,
        tr.states[mid + 1].position,
    )
}

/// Per-maneuver (safe, critical) interpolation anchors; the target is
/// `safe − strength·(safe − critical)`, so strength 0 sits at the safe end
/// and strength 1 at the critical one. Cut-ins use their own sub-second safe
/// anchor; the remaining aggressive maneuvers start from the low-risk band
/// edge.
fn ttc_anchors(kind: ManeuverType) -> Option<(f64, f64)> {
    match kind {
        ManeuverType::CutIn => Some((CUT_IN_TTC_S, CRITICAL_TTC_S)),
        ManeuverType::SuddenBrake
        | ManeuverType::UnsafeMerge
        | ManeuverType::DangerousLaneChange
        | ManeuverType::HeadOn => Some((SAFE_TTC_S, CRITICAL_TTC_S)),
        ManeuverType::None => None,
    }
}

/// Curvature demanded at strength 1, per maneuver (1/m). Longitudinal
/// maneuvers keep a straight path.
fn critical_curvature(kind: ManeuverType) -> f64 {
    match kind {
        ManeuverType::CutIn => 0.05,
        ManeuverType::DangerousLaneChange => 0.08,
        ManeuverType::UnsafeMerge => 0.04,
        ManeuverType::HeadOn => 0.02,
        ManeuverType::SuddenBrake | ManeuverType::None => 0.0,
    }
}

fn interpolate<F: Scalar>(safe: f64, critical: f64, strength: f64) -> F {
    F::cast(safe - strength * (safe - critical))
}

/// Extend the risk anchor into the full target vector (p*, d_lat*, TTC*, κ*).
pub fn build_target_vector<F: Scalar>(
    scene: &Scene<F>,
    intent: &ManeuverDirective,
    config: &PotentialFieldConfig<F>,
) -> Result<RiskTarget<F>, RiskFieldError> {
    let p_star = find_risk_anchor(scene, intent, config)?;
    if intent.kind == ManeuverType::None {
        // Identity targets: keep the scene as it is.
        let t = scene.last_history_step();
        let ego = scene.ego().state(t).expect("scene validated");
        let gap = nearest_lateral_gap(scene, ego).unwrap_or(F::cast(SAFE_D_LAT_M));
        return Ok(RiskTarget {
            p_star,
            d_lat_star: gap.max(F::zero()),
            ttc_star: TimeToEvent::Unbounded,
            kappa_star: path_curvature(scene.ego(), t),
        });
    }
    let (safe_ttc, crit_ttc) = ttc_anchors(intent.kind).expect("aggressive maneuver");
    Ok(RiskTarget {
        p_star,
        d_lat_star: interpolate(SAFE_D_LAT_M, CRITICAL_D_LAT_M, intent.strength),
        ttc_star: TimeToEvent::Finite(interpolate(safe_ttc, crit_ttc, intent.strength)),
        kappa_star: interpolate(0.0, critical_curvature(intent.kind), intent.strength),
    })
}

fn nearest_lateral_gap<F: Scalar>(scene: &Scene<F>, ego: &AgentState<F>) -> Option<F> {
    let t = scene.last_history_step();
    let u = Vec2::new(ego.heading.cos(), ego.heading.sin());
    let half = F::cast(0.5);
    scene
        .agents
        .iter()
        .enumerate()
        .filter(|(idx, _)| *idx != scene.ego_index())
        .map(|(_, tr)| {
            let s = tr.state(t).expect("scene validated");
            let d_lat = (s.position - ego.position).dot(u.perp()).abs();
            d_lat - half * (ego.width + s.width)
        })
        .fold(None, |acc: Option<F>, g| {
            Some(acc.map_or(g, |a| a.min(g)))
        })
}
