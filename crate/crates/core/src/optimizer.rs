//! Latent-space adversarial refinement of decoded futures.
//!
//! Starting near the conditional prior mean, take plain gradient steps on a
//! weighted attack loss through the frozen decoder, with backtracking
//! acceptance so every recorded iterate strictly improves. The loss splits
//! into trajectory plausibility (jerk, thresholded yaw reward), map
//! compliance (drivable-area distance ramp), and interaction pressure
//! (bumper-point distance, side-impact distance, TTC shortfall, lateral
//! alignment). Externally registered behavior priors blend in through the
//! `w_new` weight without touching the base terms.

use crate::controller::LossWeightVector;
use crate::diff::{DiffError, NodeId, Tape};
use crate::geom::{Pose, Vec2};
use crate::motion_prior::{DecodingContext, MotionPriorModel, PriorError};
use crate::risk_field::{TimeToEvent, T_SAFE_S};
use crate::scalar::Scalar;
use crate::scene::{relative_kinematics, AgentState, MapGrid, Scene, SceneError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

/// Width of the quadratic region of the off-road penalty: inside the first
/// meter past the drivable boundary the penalty grows quadratically, beyond
/// it linearly (a one-sided Huber ramp).
pub const OFFROAD_RAMP_M: f64 = 1.0;

/// Displacements shorter than this (meters per step) fall back to the last
/// known heading instead of a displacement-derived direction.
const DIRECTION_FLOOR_M: f64 = 1e-3;

/// Closing speeds below this (m/s) leave the per-step TTC penalty inactive.
const CLOSING_FLOOR_MPS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("no behavior prior registered under {0:?}")]
    UnknownLossTerm(String),
    #[error("optimization aborted at iteration {iteration}: {reason}")]
    OptimizationAborted { iteration: usize, reason: String },
    #[error("scene has no agent to attack besides the ego")]
    NoVictim,
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Shape parameters of the individual loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "F: Deserialize<'de> + Scalar"))]
pub struct LossTermParams<F> {
    /// TTC below which the shortfall penalty engages, seconds.
    pub t_safe: F,
    /// Yaw-rate magnitude where the aggressiveness reward activates, rad/s.
    pub omega_thresh: F,
    /// Softening constant inside reciprocal rewards.
    pub epsilon: F,
    /// Stiffness of the lateral-alignment penalty.
    pub k_lateral: F,
}

impl<F: Scalar> Default for LossTermParams<F> {
    fn default() -> Self {
        Self {
            t_safe: F::cast(T_SAFE_S),
            omega_thresh: F::cast(0.3),
            epsilon: F::cast(1e-3),
            k_lateral: F::one(),
        }
    }
}

impl<F: Scalar> LossTermParams<F> {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.t_safe > F::zero()) || !self.t_safe.is_finite() {
            return Err(OptimizerError::InvalidConfig(format!(
                "t_safe must be positive, got {:?}",
                self.t_safe.as_f64()
            )));
        }
        if !(self.omega_thresh >= F::zero()) {
            return Err(OptimizerError::InvalidConfig(
                "omega_thresh must be non-negative".into(),
            ));
        }
        if !(self.epsilon > F::zero()) {
            return Err(OptimizerError::InvalidConfig(
                "epsilon must be strictly positive".into(),
            ));
        }
        if !(self.k_lateral >= F::zero()) {
            return Err(OptimizerError::InvalidConfig(
                "k_lateral must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Gradient-descent schedule for the latent search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "F: Deserialize<'de> + Scalar"))]
pub struct OptimizerConfig<F> {
    pub learning_rate: F,
    pub max_iterations: usize,
    /// Relative loss-decrease threshold that counts as converged.
    pub tolerance: F,
    /// Step shrink factor during backtracking, strictly inside (0, 1).
    pub backtrack_factor: F,
    pub max_backtracks: usize,
    /// Standard deviation of the Gaussian jitter around the prior mean used
    /// as the starting iterate; zero starts exactly at the mean.
    pub init_jitter: F,
    pub seed: u64,
}

impl<F: Scalar> Default for OptimizerConfig<F> {
    fn default() -> Self {
        Self {
            learning_rate: F::cast(0.1),
            max_iterations: 60,
            tolerance: F::cast(1e-6),
            backtrack_factor: F::cast(0.5),
            max_backtracks: 20,
            init_jitter: F::cast(0.05),
            seed: 0,
        }
    }
}

impl<F: Scalar> OptimizerConfig<F> {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.learning_rate > F::zero()) || !self.learning_rate.is_finite() {
            return Err(OptimizerError::InvalidConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(OptimizerError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.tolerance >= F::zero()) {
            return Err(OptimizerError::InvalidConfig(
                "tolerance must be non-negative".into(),
            ));
        }
        if !(self.backtrack_factor > F::zero() && self.backtrack_factor < F::one()) {
            return Err(OptimizerError::InvalidConfig(
                "backtrack_factor must lie strictly inside (0, 1)".into(),
            ));
        }
        if !(self.init_jitter >= F::zero()) {
            return Err(OptimizerError::InvalidConfig(
                "init_jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted values of every loss term at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<F> {
    /// Mean squared third difference of the ego's decoded positions, m².
    pub jerk: F,
    /// Mean thresholded yaw-rate reward (large while the motion stays calm).
    pub yaw: F,
    /// Mean off-road Huber ramp over the ego's decoded positions.
    pub drivable: F,
    /// Closest approach of the ego front bumper to the victim rear bumper, m.
    pub collision_point: F,
    /// Closest approach of the ego front bumper to the victim footprint, m.
    pub side_impact: F,
    /// Mean squared TTC shortfall below `t_safe`, s².
    pub ttc: F,
    /// Mean squared lateral misalignment between ego and victim, m².
    pub lateral: F,
    /// Value of the injected behavior prior; zero when none is active.
    pub prior: F,
}

impl<F: Scalar> LossTerms<F> {
    /// Recombine the terms exactly as the tape does: trajectory and
    /// interaction groups fold left to right from zero, then the three
    /// alpha-weighted groups and the prior fold the same way.
    pub fn weighted_total(&self, w: &LossWeightVector) -> F {
        let yaw_w = self.yaw * F::cast(w.w_yaw);
        let traj = (F::zero() + self.jerk) + yaw_w;
        let traj_w = traj * F::cast(w.alpha1);
        let geom_w = self.drivable * F::cast(w.alpha2);
        let inter = (((F::zero() + self.collision_point * F::cast(w.w_collision_point))
            + self.side_impact * F::cast(w.w_side_impact))
            + self.ttc * F::cast(w.w_ttc))
            + self.lateral * F::cast(w.w_lateral);
        let inter_w = inter * F::cast(w.alpha3);
        let base = ((F::zero() + traj_w) + geom_w) + inter_w;
        if F::cast(w.w_new) == F::zero() {
            base
        } else {
            base + self.prior * F::cast(w.w_new)
        }
    }
}

/// One accepted iterate of the latent search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord<F> {
    pub z: Vec<F>,
    pub total: F,
    pub terms: LossTerms<F>,
}

/// Outcome of [`AdversarialOptimizer::optimize`].
#[derive(Debug, Clone)]
pub struct OptimizationResult<F> {
    pub z_initial: Vec<F>,
    pub z_final: Vec<F>,
    /// Strictly improving iterates, starting with the initial one.
    pub history: Vec<IterateRecord<F>>,
    /// The scene materialized from the final latent.
    pub scenario: Scene<F>,
    pub weights: LossWeightVector,
    pub converged: bool,
}

// ---------------------------------------------------------------------------
// state-level geometry helpers

fn heading_dir<F: Scalar>(s: &AgentState<F>) -> Vec2<F> {
    Vec2::new(s.heading.cos(), s.heading.sin())
}

/// World position of the front bumper center.
pub fn front_bumper<F: Scalar>(s: &AgentState<F>) -> Vec2<F> {
    s.position + heading_dir(s) * (s.length * F::cast(0.5))
}

/// World position of the rear bumper center.
pub fn rear_bumper<F: Scalar>(s: &AgentState<F>) -> Vec2<F> {
    s.position - heading_dir(s) * (s.length * F::cast(0.5))
}

/// Gap the rear-end style losses close: ego front bumper to victim rear
/// bumper.
pub fn collision_point_distance<F: Scalar>(ego: &AgentState<F>, victim: &AgentState<F>) -> F {
    (front_bumper(ego) - rear_bumper(victim)).norm()
}

/// Ego front bumper to the closest corner of the victim's footprint.
pub fn side_impact_distance<F: Scalar>(ego: &AgentState<F>, victim: &AgentState<F>) -> F {
    let f = front_bumper(ego);
    victim
        .footprint()
        .corners()
        .iter()
        .map(|&c| (f - c).norm())
        .fold(F::infinity(), F::min)
}

/// Quadratic shortfall below the safety time; zero for open-ended TTC.
pub fn ttc_shortfall<F: Scalar>(ttc: TimeToEvent<F>, t_safe: F) -> F {
    match ttc {
        TimeToEvent::Finite(t) => {
            let d = (t_safe - t).max(F::zero());
            d * d
        }
        TimeToEvent::Unbounded => F::zero(),
    }
}

/// The attack target: the non-ego agent with the smallest finite
/// line-of-sight TTC at the last observed step; when nobody is closing,
/// the nearest agent by footprint gap.
pub fn select_victim<F: Scalar>(scene: &Scene<F>) -> Result<i64, OptimizerError> {
    let t = scene.last_history_step();
    let ego = *scene.ego().state(t)?;
    let mut best_ttc: Option<(F, i64)> = None;
    let mut best_gap: Option<(F, i64)> = None;
    for tr in &scene.agents {
        if tr.agent_id == scene.ego_id {
            continue;
        }
        let rel = relative_kinematics(&ego, tr.state(t)?);
        if rel.closing_speed > F::zero() {
            let ttc = rel.gap.max(F::zero()) / rel.closing_speed;
            if best_ttc.is_none_or(|(b, _)| ttc < b) {
                best_ttc = Some((ttc, tr.agent_id));
            }
        }
        if best_gap.is_none_or(|(b, _)| rel.gap < b) {
            best_gap = Some((rel.gap, tr.agent_id));
        }
    }
    best_ttc
        .or(best_gap)
        .map(|(_, id)| id)
        .ok_or(OptimizerError::NoVictim)
}

// ---------------------------------------------------------------------------
// drivable-area distance field

/// Exact Euclidean distance (meters) to the nearest drivable cell center,
/// zero on drivable cells, sampled bilinearly so it is differentiable
/// almost everywhere.
#[derive(Debug, Clone)]
pub struct DrivableDistanceField<F> {
    rows: usize,
    cols: usize,
    origin: Pose<F>,
    extent: (F, F),
    /// Cells per meter.
    resolution: F,
    dist: Vec<F>,
}

/// One pass of the lower-envelope-of-parabolas squared distance transform.
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n];
    let mut zb = vec![0.0f64; n + 1];
    let mut k = 0usize;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    for q in 1..n {
        let qq = (q * q) as f64;
        loop {
            let p = v[k];
            let s = (f[q] + qq - f[p] - (p * p) as f64) / (2.0 * (q as f64 - p as f64));
            if s <= zb[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zb[k] = s;
                zb[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while zb[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
}

impl<F: Scalar> DrivableDistanceField<F> {
    pub fn from_grid(grid: &MapGrid<F>) -> Self {
        let (rows, cols) = grid.shape();
        assert!(rows >= 2 && cols >= 2, "degenerate raster {rows}x{cols}");
        // stand-in for "no drivable cell in this slice"; large enough to
        // dominate any in-grid squared offset, small enough to stay finite
        const FAR: f64 = 1e12;
        let mut col_pass = vec![0.0f64; rows * cols];
        let side = rows.max(cols);
        let mut f = vec![0.0f64; side];
        let mut d = vec![0.0f64; side];
        for c in 0..cols {
            for r in 0..rows {
                f[r] = if grid.drivable_area.get(r, c) { 0.0 } else { FAR };
            }
            edt_1d(&f[..rows], &mut d[..rows]);
            for r in 0..rows {
                col_pass[r * cols + c] = d[r];
            }
        }
        let mut dist = vec![F::zero(); rows * cols];
        for r in 0..rows {
            f[..cols].copy_from_slice(&col_pass[r * cols..(r + 1) * cols]);
            edt_1d(&f[..cols], &mut d[..cols]);
            for c in 0..cols {
                dist[r * cols + c] = F::cast(d[c].min(FAR).sqrt()) / grid.resolution;
            }
        }
        Self {
            rows,
            cols,
            origin: grid.origin_pose,
            extent: grid.extent,
            resolution: grid.resolution,
            dist,
        }
    }

    /// Meters to the nearest drivable cell center at a raw cell.
    pub fn at_cell(&self, row: usize, col: usize) -> F {
        self.dist[row * self.cols + col]
    }

    /// Base cell and clamped fractional offsets for bilinear interpolation
    /// around a world point.
    fn bilinear_base(&self, p: Vec2<F>) -> (usize, usize, F, F) {
        let local = self.origin.world_to_local(p);
        let half = F::cast(0.5);
        let u = (local.x + self.extent.0 * half) * self.resolution - half;
        let v = (local.y + self.extent.1 * half) * self.resolution - half;
        let c0 = (u.as_f64().floor().max(0.0) as usize).min(self.cols - 2);
        let r0 = (v.as_f64().floor().max(0.0) as usize).min(self.rows - 2);
        let fx = (u - F::from_usize(c0).unwrap()).max(F::zero()).min(F::one());
        let fy = (v - F::from_usize(r0).unwrap()).max(F::zero()).min(F::one());
        (r0, c0, fx, fy)
    }

    /// Bilinear distance sample; clamps to the nearest edge cell outside the
    /// raster.
    pub fn sample(&self, p: Vec2<F>) -> F {
        let (r0, c0, fx, fy) = self.bilinear_base(p);
        let d00 = self.at_cell(r0, c0);
        let d01 = self.at_cell(r0, c0 + 1);
        let d10 = self.at_cell(r0 + 1, c0);
        let d11 = self.at_cell(r0 + 1, c0 + 1);
        let a = d00 + (d01 - d00) * fx;
        let b = d10 + (d11 - d10) * fx;
        a + (b - a) * fy
    }

    /// Tape twin of [`sample`](Self::sample): same fold, with the cell
    /// selection frozen at the current point values.
    pub fn sample_on_tape(&self, tape: &mut Tape<F>, x: NodeId, y: NodeId) -> NodeId {
        let p = Vec2::new(tape.val(x), tape.val(y));
        let (r0, c0, _, _) = self.bilinear_base(p);
        let half = F::cast(0.5);
        let (cos_h, sin_h) = (self.origin.heading.cos(), self.origin.heading.sin());
        let dx = tape.shift(x, -self.origin.position.x);
        let dy = tape.shift(y, -self.origin.position.y);
        // local = R(-heading) * (p - origin)
        let lx = {
            let a = tape.scale(dx, cos_h);
            let b = tape.scale(dy, sin_h);
            tape.add(a, b)
        };
        let ly = {
            let a = tape.scale(dy, cos_h);
            let b = tape.scale(dx, sin_h);
            tape.sub(a, b)
        };
        let u = {
            let s = tape.scale(lx, self.resolution);
            tape.shift(s, self.extent.0 * half * self.resolution - half)
        };
        let v = {
            let s = tape.scale(ly, self.resolution);
            tape.shift(s, self.extent.1 * half * self.resolution - half)
        };
        let zero = tape.constant(F::zero());
        let one = tape.constant(F::one());
        let fx = {
            let f = tape.shift(u, -F::from_usize(c0).unwrap());
            let f = tape.max(f, zero);
            tape.min(f, one)
        };
        let fy = {
            let f = tape.shift(v, -F::from_usize(r0).unwrap());
            let f = tape.max(f, zero);
            tape.min(f, one)
        };
        let d00 = self.at_cell(r0, c0);
        let d01 = self.at_cell(r0, c0 + 1);
        let d10 = self.at_cell(r0 + 1, c0);
        let d11 = self.at_cell(r0 + 1, c0 + 1);
        let a = {
            let t = tape.scale(fx, d01 - d00);
            tape.shift(t, d00)
        };
        let b = {
            let t = tape.scale(fx, d11 - d10);
            tape.shift(t, d10)
        };
        let span = tape.sub(b, a);
        let rise = tape.mul(span, fy);
        tape.add(a, rise)
    }
}

// ---------------------------------------------------------------------------
// behavior priors

/// Differentiable view of the ego's decoded future handed to behavior
/// priors: world positions, forward-difference velocities, and per-step
/// yaw rates.
pub struct TrajectoryNodes<F> {
    pub positions: Vec<(NodeId, NodeId)>,
    pub velocities: Vec<(NodeId, NodeId)>,
    pub yaw_rates: Vec<NodeId>,
    pub dt: F,
}

/// An extra loss term injected at optimization time and scaled by `w_new`.
pub trait BehaviorPriorTerm<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn build(&self, tape: &mut Tape<F>, ego: &TrajectoryNodes<F>) -> Result<NodeId, DiffError>;
}

/// Reward for sustained yaw activity: reciprocal of the mean squared yaw
/// rate. Unlike the thresholded base yaw term, its gradient is non-zero
/// from the first iterate, so it steadily steers the ego toward swerving.
pub struct AggressiveYawPrior;

impl<F: Scalar> BehaviorPriorTerm<F> for AggressiveYawPrior {
    fn name(&self) -> &str {
        "aggressive_yaw"
    }

    fn build(&self, tape: &mut Tape<F>, ego: &TrajectoryNodes<F>) -> Result<NodeId, DiffError> {
        if ego.yaw_rates.is_empty() {
            return Ok(tape.constant(F::zero()));
        }
        let sq: Vec<NodeId> = ego.yaw_rates.iter().map(|&w| tape.square(w)).collect();
        let sum = tape.sum_set(&sq);
        let mean = tape.scale(sum, F::from_usize(sq.len()).unwrap().recip());
        Ok(tape.reciprocal_with_epsilon(mean, F::cast(1e-3)))
    }
}

// ---------------------------------------------------------------------------
// the optimizer

/// Everything fixed across iterates for one scene under attack.
struct AttackContext<F> {
    ctx: DecodingContext<F>,
    field: DrivableDistanceField<F>,
    ego: usize,
    victim: usize,
    /// Unit lateral direction of the lane nearest the ego.
    lane_normal: Vec2<F>,
    dt: F,
}

pub struct AdversarialOptimizer<F: Scalar> {
    pub params: LossTermParams<F>,
    pub weights: LossWeightVector,
    registry: BTreeMap<String, Arc<dyn BehaviorPriorTerm<F>>>,
    active_prior: Option<String>,
}

impl<F: Scalar> AdversarialOptimizer<F> {
    pub fn new(params: LossTermParams<F>, weights: LossWeightVector) -> Self {
        let mut opt = Self {
            params,
            weights,
            registry: BTreeMap::new(),
            active_prior: None,
        };
        opt.register_prior(Arc::new(AggressiveYawPrior));
        opt
    }

    /// Make a prior available under its name without activating it.
    pub fn register_prior(&mut self, term: Arc<dyn BehaviorPriorTerm<F>>) {
        self.registry.insert(term.name().to_string(), term);
    }

    /// Activate a registered prior; its term is scaled by `weights.w_new`.
    pub fn add_behavior_prior(&mut self, name: &str) -> Result<(), OptimizerError> {
        if !self.registry.contains_key(name) {
            return Err(OptimizerError::UnknownLossTerm(name.to_string()));
        }
        self.active_prior = Some(name.to_string());
        Ok(())
    }

    pub fn clear_behavior_prior(&mut self) {
        self.active_prior = None;
    }

    fn prepare(
        &self,
        model: &MotionPriorModel<F>,
        scene: &Scene<F>,
    ) -> Result<AttackContext<F>, OptimizerError> {
        let victim_id = select_victim(scene)?;
        let ctx = model.conditioning(scene)?;
        let victim = ctx
            .agent_ids
            .iter()
            .position(|&id| id == victim_id)
            .expect("victim picked from the same scene");
        let ego = ctx.ego_index;
        let ego_pos = ctx.last_states[ego].position;
        let lane_normal = scene
            .map
            .lanes
            .iter()
            .min_by(|a, b| {
                let da = Self::lane_midpoint_dist(a, ego_pos);
                let db = Self::lane_midpoint_dist(b, ego_pos);
                da.partial_cmp(&db).expect("finite lane distances")
            })
            .and_then(|lane| {
                let a = *lane.centerline.first()?;
                let b = *lane.centerline.last()?;
                let d = b - a;
                let n = d.norm();
                (n > F::zero()).then(|| (d / n).perp())
            })
            .unwrap_or_else(|| heading_dir(&ctx.last_states[ego]).perp());
        Ok(AttackContext {
            field: DrivableDistanceField::from_grid(&scene.map.grid),
            dt: ctx.dt,
            ctx,
            ego,
            victim,
            lane_normal,
        })
    }

    fn lane_midpoint_dist(lane: &crate::scene::LaneGeometry<F>, p: Vec2<F>) -> F {
        let mid = lane.centerline[lane.centerline.len() / 2];
        (mid - p).norm()
    }

    /// Build the full loss graph at `z` and read off the term values.
    fn build_loss(
        &self,
        tape: &mut Tape<F>,
        model: &MotionPriorModel<F>,
        attack: &AttackContext<F>,
        z: &[NodeId],
    ) -> Result<(NodeId, LossTerms<F>), OptimizerError> {
        let decoded = model.decode_on_tape(tape, z, &attack.ctx)?;
        let dt = attack.dt;
        let ego0 = attack.ctx.last_states[attack.ego];
        let vic0 = attack.ctx.last_states[attack.victim];
        let ego_pts = &decoded[attack.ego];
        let vic_pts = &decoded[attack.victim];
        let steps = ego_pts.len();

        let ego_disp = displacement_chain(tape, ego_pts, ego0.position);
        let vic_disp = displacement_chain(tape, vic_pts, vic0.position);
        let ego_dirs = unit_directions(tape, &ego_disp, heading_dir(&ego0))?;
        let vic_dirs = unit_directions(tape, &vic_disp, heading_dir(&vic0))?;
        let ego_vel = forward_velocities(tape, &ego_disp, dt);
        let vic_vel = forward_velocities(tape, &vic_disp, dt);
        let yaw_rates = yaw_rate_chain(tape, &ego_disp, ego0.heading, dt);

        // trajectory terms (ego only)
        let jerk = jerk_term(tape, ego_pts, steps);
        let yaw = yaw_reward_term(tape, &yaw_rates, &self.params);

        // map-compliance term (ego only)
        let drivable = {
            let mut pens = Vec::with_capacity(steps);
            for &(x, y) in ego_pts {
                let s = attack.field.sample_on_tape(tape, x, y);
                let one = tape.constant(F::cast(OFFROAD_RAMP_M));
                let h = tape.min(s, one);
                let hs = tape.mul(h, s);
                let h2 = tape.square(h);
                let half_h2 = tape.scale(h2, F::cast(0.5));
                pens.push(tape.sub(hs, half_h2));
            }
            let sum = tape.sum_set(&pens);
            tape.scale(sum, F::from_usize(steps).unwrap().recip())
        };

        // interaction terms
        let half = F::cast(0.5);
        let ego_half_len = ego0.length * half;
        let vic_half_len = vic0.length * half;
        let vic_half_wid = vic0.width * half;

        let mut fronts = Vec::with_capacity(steps);
        for k in 0..steps {
            let (x, y) = ego_pts[k];
            let (ux, uy) = ego_dirs[k];
            let ox = tape.scale(ux, ego_half_len);
            let oy = tape.scale(uy, ego_half_len);
            fronts.push((tape.add(x, ox), tape.add(y, oy)));
        }

        let collision_point = {
            let mut dists = Vec::with_capacity(steps);
            for k in 0..steps {
                let (x, y) = vic_pts[k];
                let (ux, uy) = vic_dirs[k];
                let ox = tape.scale(ux, vic_half_len);
                let oy = tape.scale(uy, vic_half_len);
                let rx = tape.sub(x, ox);
                let ry = tape.sub(y, oy);
                let ddx = tape.sub(fronts[k].0, rx);
                let ddy = tape.sub(fronts[k].1, ry);
                dists.push(tape.euclidean_norm(&[ddx, ddy])?);
            }
            tape.min_over_set(&dists)?
        };

        let side_impact = {
            let mut dists = Vec::with_capacity(4 * steps);
            for k in 0..steps {
                let (x, y) = vic_pts[k];
                let (ux, uy) = vic_dirs[k];
                for (sl, sw) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let a = vic_half_len * F::cast(sl);
                    let b = vic_half_wid * F::cast(sw);
                    // corner = p + a*dir + b*perp(dir), perp = (-uy, ux)
                    let ax = tape.scale(ux, a);
                    let bx = tape.scale(uy, -b);
                    let cx0 = tape.add(x, ax);
                    let cx = tape.add(cx0, bx);
                    let ay = tape.scale(uy, a);
                    let by = tape.scale(ux, b);
                    let cy0 = tape.add(y, ay);
                    let cy = tape.add(cy0, by);
                    let ddx = tape.sub(fronts[k].0, cx);
                    let ddy = tape.sub(fronts[k].1, cy);
                    dists.push(tape.euclidean_norm(&[ddx, ddy])?);
                }
            }
            tape.min_over_set(&dists)?
        };

        let ttc = {
            let csum = (ego0.length + vic0.length) * half;
            let t_safe = self.params.t_safe;
            let mut pens = Vec::with_capacity(steps);
            for k in 0..steps {
                let dx = tape.sub(vic_pts[k].0, ego_pts[k].0);
                let dy = tape.sub(vic_pts[k].1, ego_pts[k].1);
                let dist = tape.euclidean_norm(&[dx, dy])?;
                let dvx = tape.sub(vic_vel[k].0, ego_vel[k].0);
                let dvy = tape.sub(vic_vel[k].1, ego_vel[k].1);
                let a = tape.mul(dx, dvx);
                let b = tape.mul(dy, dvy);
                let rad = tape.add(a, b);
                let dist_v = tape.val(dist).as_f64();
                if dist_v <= DIRECTION_FLOOR_M {
                    // coincident centers: treat as immediate contact
                    pens.push(tape.constant(t_safe * t_safe));
                    continue;
                }
                let closing = {
                    let q = tape.div(rad, dist)?;
                    tape.neg(q)
                };
                let gap = tape.shift(dist, -csum);
                if tape.val(closing).as_f64() <= CLOSING_FLOOR_MPS {
                    pens.push(tape.constant(F::zero()));
                } else if tape.val(gap) <= F::zero() {
                    pens.push(tape.constant(t_safe * t_safe));
                } else {
                    let t = tape.div(gap, closing)?;
                    let neg_t = tape.neg(t);
                    let short = tape.shift(neg_t, t_safe);
                    let r = tape.relu(short);
                    pens.push(tape.square(r));
                }
            }
            let sum = tape.sum_set(&pens);
            tape.scale(sum, F::from_usize(steps).unwrap().recip())
        };

        let lateral = {
            let n = attack.lane_normal;
            let wsum = (ego0.width + vic0.width) * half;
            let mut pens = Vec::with_capacity(steps);
            for k in 0..steps {
                let dx = tape.sub(vic_pts[k].0, ego_pts[k].0);
                let dy = tape.sub(vic_pts[k].1, ego_pts[k].1);
                let sx = tape.scale(dx, n.x);
                let sy = tape.scale(dy, n.y);
                let signed = tape.add(sx, sy);
                let mag = tape.abs(signed);
                let gap = tape.shift(mag, -wsum);
                pens.push(tape.square(gap));
            }
            let sum = tape.sum_set(&pens);
            let mean = tape.scale(sum, F::from_usize(steps).unwrap().recip());
            tape.scale(mean, self.params.k_lateral)
        };

        // optional injected prior
        let w_new = F::cast(self.weights.w_new);
        let prior_node = match (&self.active_prior, w_new != F::zero()) {
            (Some(name), true) => {
                let term = self.registry.get(name).expect("active prior is registered");
                let ego_nodes = TrajectoryNodes {
                    positions: ego_pts.clone(),
                    velocities: ego_vel,
                    yaw_rates,
                    dt,
                };
                Some(term.build(tape, &ego_nodes)?)
            }
            _ => None,
        };

        // weighted combination, grouped exactly like LossTerms::weighted_total
        let w = &self.weights;
        let yaw_w = tape.scale(yaw, F::cast(w.w_yaw));
        let traj = tape.sum_set(&[jerk, yaw_w]);
        let traj_w = tape.scale(traj, F::cast(w.alpha1));
        let geom_w = tape.scale(drivable, F::cast(w.alpha2));
        let cp_w = tape.scale(collision_point, F::cast(w.w_collision_point));
        let si_w = tape.scale(side_impact, F::cast(w.w_side_impact));
        let ttc_w = tape.scale(ttc, F::cast(w.w_ttc));
        let lat_w = tape.scale(lateral, F::cast(w.w_lateral));
        let inter = tape.sum_set(&[cp_w, si_w, ttc_w, lat_w]);
        let inter_w = tape.scale(inter, F::cast(w.alpha3));
        let mut parts = vec![traj_w, geom_w, inter_w];
        if let Some(p) = prior_node {
            parts.push(tape.scale(p, w_new));
        }
        let total = tape.sum_set(&parts);

        let terms = LossTerms {
            jerk: tape.val(jerk),
            yaw: tape.val(yaw),
            drivable: tape.val(drivable),
            collision_point: tape.val(collision_point),
            side_impact: tape.val(side_impact),
            ttc: tape.val(ttc),
            lateral: tape.val(lateral),
            prior: prior_node.map_or(F::zero(), |p| tape.val(p)),
        };
        Ok((total, terms))
    }

    fn eval(
        &self,
        model: &MotionPriorModel<F>,
        attack: &AttackContext<F>,
        z: &[F],
        with_grad: bool,
    ) -> Result<(F, LossTerms<F>, Option<Vec<F>>), OptimizerError> {
        let mut tape = Tape::new();
        let nodes: Vec<NodeId> = z.iter().map(|&v| tape.input(v)).collect();
        let (total, terms) = self.build_loss(&mut tape, model, attack, &nodes)?;
        let value = tape.val(total);
        let grad = if with_grad {
            let g = tape.backward(total);
            Some(nodes.iter().map(|&id| g.wrt(id)).collect())
        } else {
            None
        };
        Ok((value, terms, grad))
    }

    /// Loss value and per-term breakdown at an arbitrary latent, without
    /// running the search.
    pub fn evaluate(
        &self,
        model: &MotionPriorModel<F>,
        scene: &Scene<F>,
        z: &[F],
    ) -> Result<(F, LossTerms<F>), OptimizerError> {
        let attack = self.prepare(model, scene)?;
        let (total, terms, _) = self.eval(model, &attack, z, false)?;
        Ok((total, terms))
    }

    /// Gradient descent on the latent with backtracking acceptance: a step
    /// is kept only if it strictly lowers the loss, halving (by
    /// `backtrack_factor`) otherwise. Stops early once the relative
    /// improvement drops below `tolerance` or no step of any tried length
    /// improves.
    pub fn optimize(
        &self,
        model: &MotionPriorModel<F>,
        scene: &Scene<F>,
        cfg: &OptimizerConfig<F>,
    ) -> Result<OptimizationResult<F>, OptimizerError> {
        cfg.validate()?;
        self.params.validate()?;
        self.weights
            .validate()
            .map_err(|e| OptimizerError::InvalidConfig(e.to_string()))?;
        let attack = self.prepare(model, scene)?;
        let prior = model.prior(&attack.ctx.c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut z: Vec<F> = prior
            .mean
            .iter()
            .map(|&m| {
                let e: f64 = rng.sample(StandardNormal);
                m + cfg.init_jitter * F::cast(e)
            })
            .collect();
        let z_initial = z.clone();

        let (mut total, mut terms, mut grad) = self.eval(model, &attack, &z, true)?;
        if !total.is_finite() {
            return Err(OptimizerError::OptimizationAborted {
                iteration: 0,
                reason: format!("loss is {:?} at the initial iterate", total.as_f64()),
            });
        }
        let mut history = vec![IterateRecord {
            z: z.clone(),
            total,
            terms,
        }];
        let mut converged = false;

        for iteration in 1..=cfg.max_iterations {
            let g = grad.take().expect("gradient from the accepted iterate");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimizerError::OptimizationAborted {
                    iteration,
                    reason: "non-finite gradient".into(),
                });
            }
            let mut step = cfg.learning_rate;
            let mut accepted = false;
            let mut saw_finite_trial = false;
            for _ in 0..=cfg.max_backtracks {
                let z_try: Vec<F> = z
                    .iter()
                    .zip(&g)
                    .map(|(&zi, &gi)| zi - step * gi)
                    .collect();
                let (t_try, terms_try, g_try) = self.eval(model, &attack, &z_try, true)?;
                if t_try.is_finite() {
                    saw_finite_trial = true;
                    if t_try < total {
                        let delta = total - t_try;
                        z = z_try;
                        total = t_try;
                        terms = terms_try;
                        grad = g_try;
                        history.push(IterateRecord {
                            z: z.clone(),
                            total,
                            terms,
                        });
                        accepted = true;
                        if delta <= cfg.tolerance * total.abs().max(F::one()) {
                            converged = true;
                        }
                        break;
                    }
                }
                step = step * cfg.backtrack_factor;
            }
            if !accepted {
                if !saw_finite_trial {
                    return Err(OptimizerError::OptimizationAborted {
                        iteration,
                        reason: "loss non-finite along the whole backtracking ladder".into(),
                    });
                }
                // no step length improves: stationary for this engine
                converged = true;
                break;
            }
            if converged {
                break;
            }
        }

        let decoded = model.decode(&z, &attack.ctx)?;
        let scenario = model.materialize_scene(scene, &decoded)?;
        Ok(OptimizationResult {
            z_initial,
            z_final: z,
            history,
            scenario,
            weights: self.weights.clone(),
            converged,
        })
    }
}

/// Decode at the conditional prior mean plus Gaussian noise and rebuild the
/// scene; `noise_scale` zero reproduces the baseline decode exactly.
pub fn perturb_baseline<F: Scalar>(
    model: &MotionPriorModel<F>,
    scene: &Scene<F>,
    noise_scale: F,
    rng: &mut impl Rng,
) -> Result<(Vec<F>, Scene<F>), PriorError> {
    let ctx = model.conditioning(scene)?;
    let prior = model.prior(&ctx.c)?;
    let z: Vec<F> = prior
        .mean
        .iter()
        .map(|&m| {
            let e: f64 = rng.sample(StandardNormal);
            m + noise_scale * F::cast(e)
        })
        .collect();
    let decoded = model.decode(&z, &ctx)?;
    let scenario = model.materialize_scene(scene, &decoded)?;
    Ok((z, scenario))
}

// ---------------------------------------------------------------------------
// tape-side trajectory derivations

/// Per-step displacement nodes, seeded with the constant pre-future position.
fn displacement_chain<F: Scalar>(
    tape: &mut Tape<F>,
    pts: &[(NodeId, NodeId)],
    p0: Vec2<F>,
) -> Vec<(NodeId, NodeId)> {
    let mut out = Vec::with_capacity(pts.len());
    let mut prev: Option<(NodeId, NodeId)> = None;
    for &(x, y) in pts {
        let d = match prev {
            None => (tape.shift(x, -p0.x), tape.shift(y, -p0.y)),
            Some((px, py)) => (tape.sub(x, px), tape.sub(y, py)),
        };
        out.push(d);
        prev = Some((x, y));
    }
    out
}

/// Unit direction per step; constant fallback where the displacement is too
/// short to orient reliably.
fn unit_directions<F: Scalar>(
    tape: &mut Tape<F>,
    disps: &[(NodeId, NodeId)],
    fallback: Vec2<F>,
) -> Result<Vec<(NodeId, NodeId)>, DiffError> {
    let mut out = Vec::with_capacity(disps.len());
    let mut last = fallback;
    for &(dx, dy) in disps {
        let n = tape.euclidean_norm(&[dx, dy])?;
        if tape.val(n).as_f64() > DIRECTION_FLOOR_M {
            let ux = tape.div(dx, n)?;
            let uy = tape.div(dy, n)?;
            last = Vec2::new(tape.val(ux), tape.val(uy));
            out.push((ux, uy));
        } else {
            out.push((tape.constant(last.x), tape.constant(last.y)));
        }
    }
    Ok(out)
}

/// Velocity at step k as the forward difference toward k+1 (the last step
/// reuses its own incoming difference), matching how decoded scenes are
/// materialized.
fn forward_velocities<F: Scalar>(
    tape: &mut Tape<F>,
    disps: &[(NodeId, NodeId)],
    dt: F,
) -> Vec<(NodeId, NodeId)> {
    let inv = dt.recip();
    let n = disps.len();
    (0..n)
        .map(|k| {
            let (dx, dy) = disps[(k + 1).min(n - 1)];
            (tape.scale(dx, inv), tape.scale(dy, inv))
        })
        .collect()
}

/// Yaw rate between consecutive motion directions, unwrapped with a
/// constant 2-pi correction chosen at the current values.
fn yaw_rate_chain<F: Scalar>(
    tape: &mut Tape<F>,
    disps: &[(NodeId, NodeId)],
    heading0: F,
    dt: F,
) -> Vec<NodeId> {
    let tau = F::cast(std::f64::consts::TAU);
    let mut thetas = Vec::with_capacity(disps.len());
    let mut last = heading0;
    for &(dx, dy) in disps {
        let nx = tape.val(dx);
        let ny = tape.val(dy);
        if nx.hypot(ny).as_f64() > DIRECTION_FLOOR_M {
            let th = tape.atan2(dy, dx);
            last = tape.val(th);
            thetas.push(th);
        } else {
            thetas.push(tape.constant(last));
        }
    }
    let mut out = Vec::with_capacity(thetas.len().saturating_sub(1));
    for w in thetas.windows(2) {
        let raw = tape.sub(w[1], w[0]);
        let turns = (tape.val(raw) / tau).as_f64().round();
        let wrapped = tape.shift(raw, -tau * F::cast(turns));
        out.push(tape.scale(wrapped, dt.recip()));
    }
    out
}

/// Mean squared third difference of the positions, in meters per step cubed.
fn jerk_term<F: Scalar>(tape: &mut Tape<F>, pts: &[(NodeId, NodeId)], steps: usize) -> NodeId {
    if steps < 4 {
        return tape.constant(F::zero());
    }
    let three = F::cast(3.0);
    let mut sq = Vec::with_capacity(2 * (steps - 3));
    for k in 0..steps - 3 {
        for axis in 0..2 {
            let pick = |p: &(NodeId, NodeId)| if axis == 0 { p.0 } else { p.1 };
            let a = tape.sub(pick(&pts[k + 3]), pick(&pts[k]));
            let b = tape.sub(pick(&pts[k + 1]), pick(&pts[k + 2]));
            let b3 = tape.scale(b, three);
            let j = tape.add(a, b3);
            sq.push(tape.square(j));
        }
    }
    let sum = tape.sum_set(&sq);
    tape.scale(sum, F::from_usize(steps - 3).unwrap().recip())
}

/// Mean reciprocal reward over the thresholded yaw rates: flat while every
/// step stays calm, sharply decreasing once any step turns harder than
/// `omega_thresh`.
fn yaw_reward_term<F: Scalar>(
    tape: &mut Tape<F>,
    yaw_rates: &[NodeId],
    params: &LossTermParams<F>,
) -> NodeId {
    if yaw_rates.is_empty() {
        return tape.constant(F::zero());
    }
    let mut terms = Vec::with_capacity(yaw_rates.len());
    for &w in yaw_rates {
        let a = tape.abs(w);
        let over = tape.shift(a, -params.omega_thresh);
        let r = tape.relu(over);
        terms.push(tape.reciprocal_with_epsilon(r, params.epsilon));
    }
    let sum = tape.sum_set(&terms);
    tape.scale(sum, F::from_usize(terms.len()).unwrap().recip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::motion_prior::ModelConfig;
    use crate::scene::{
        rasterize_map, BitRaster, BoundaryKind, LaneGeometry, SceneMap, Trajectory,
    };
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn straight_lane(half_width: f64) -> LaneGeometry<f64> {
        LaneGeometry {
            lane_id: 0,
            centerline: vec![Vec2::new(-210.0, 0.0), Vec2::new(210.0, 0.0)],
            left_boundary: vec![Vec2::new(-210.0, half_width), Vec2::new(210.0, half_width)],
            right_boundary: vec![
                Vec2::new(-210.0, -half_width),
                Vec2::new(210.0, -half_width),
            ],
            boundary_kind: BoundaryKind::Dashed,
        }
    }

    fn wide_map() -> Arc<SceneMap<f64>> {
        let lane = straight_lane(12.0);
        let grid = rasterize_map(
            &[lane.clone()],
            Pose::new(Vec2::zero(), 0.0),
            420.0,
            100.0,
            2.0,
        )
        .unwrap();
        Arc::new(SceneMap {
            map_id: 7,
            lanes: vec![lane],
            grid,
        })
    }

    fn cv_traj(id: i64, start: Vec2<f64>, vel: Vec2<f64>, heading: f64) -> Trajectory<f64> {
        let dt = 0.2;
        let states = (0..12)
            .map(|k| {
                AgentState::new(id, start + vel * (k as f64 * dt), vel, heading, 4.5, 2.0)
                    .unwrap()
            })
            .collect();
        Trajectory::new(id, 5.0, 0.0, states, 0.5).unwrap()
    }

    fn scene_with(agents: Vec<Trajectory<f64>>) -> Scene<f64> {
        Scene::new(agents, wide_map(), 1, 12, 0).unwrap()
    }

    /// Ego chasing a slower lead car: finite TTC, natural rear-end geometry.
    fn chase_scene() -> Scene<f64> {
        scene_with(vec![
            cv_traj(1, Vec2::new(-30.0, 0.0), Vec2::new(12.0, 0.0), 0.0),
            cv_traj(2, Vec2::new(-5.0, 0.0), Vec2::new(8.0, 0.0), 0.0),
        ])
    }

    fn small_model(seed: u64) -> MotionPriorModel<f64> {
        let cfg = ModelConfig {
            history_horizon: 12,
            future_horizon: 10,
            hidden_dim: 16,
            latent_dim: 4,
            encoder_depth: 1,
        };
        MotionPriorModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    // ---- distance field ----

    fn toy_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> MapGrid<f64> {
        let mut raster = BitRaster::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if rng.gen::<f64>() < p {
                    raster.set(r, c, true);
                }
            }
        }
        MapGrid {
            resolution: 1.0,
            extent: (cols as f64, rows as f64),
            origin_pose: Pose::new(Vec2::zero(), 0.0),
            drivable_area: raster,
            lane_divider: BitRaster::zeros(rows, cols),
            degenerate_lanes_skipped: 0,
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..8 {
            let grid = toy_grid(&mut rng, 14, 11, 0.3);
            let drivable: Vec<(usize, usize)> = (0..14)
                .flat_map(|r| (0..11).map(move |c| (r, c)))
                .filter(|&(r, c)| grid.drivable_area.get(r, c))
                .collect();
            if drivable.is_empty() {
                continue;
            }
            let field = DrivableDistanceField::from_grid(&grid);
            for r in 0..14 {
                for c in 0..11 {
                    let brute = drivable
                        .iter()
                        .map(|&(rr, cc)| {
                            let dr = rr as f64 - r as f64;
                            let dc = cc as f64 - c as f64;
                            (dr * dr + dc * dc).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert_abs_diff_eq!(field.at_cell(r, c), brute, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn distance_is_zero_exactly_on_drivable_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = toy_grid(&mut rng, 10, 16, 0.4);
        let field = DrivableDistanceField::from_grid(&grid);
        for r in 0..10 {
            for c in 0..16 {
                if grid.drivable_area.get(r, c) {
                    assert_eq!(field.at_cell(r, c), 0.0);
                } else {
                    assert!(field.at_cell(r, c) >= 1.0 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_grid_reports_remote_distances() {
        let grid = toy_grid(&mut ChaCha8Rng::seed_from_u64(0), 6, 6, -1.0);
        let field = DrivableDistanceField::from_grid(&grid);
        for r in 0..6 {
            for c in 0..6 {
                assert!(field.at_cell(r, c) >= 1e5);
            }
        }
    }

    #[test]
    fn bilinear_sample_interpolates_cell_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = toy_grid(&mut rng, 12, 12, 0.35);
        let field = DrivableDistanceField::from_grid(&grid);
        for r in 0..12 {
            for c in 0..12 {
                let p = grid.cell_center(r, c);
                assert_abs_diff_eq!(field.sample(p), field.at_cell(r, c), epsilon = 1e-9);
            }
        }
        // local Lipschitz continuity under small moves
        for _ in 0..200 {
            let p = Vec2::new(rng.gen_range(0.5..10.5), rng.gen_range(0.5..10.5));
            let q = p + Vec2::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
            let lip = 40.0 * ((p - q).norm());
            assert!((field.sample(p) - field.sample(q)).abs() <= lip + 1e-12);
        }
    }

    #[test]
    fn tape_sample_matches_value_sample_and_fd_gradient() {
        let map = wide_map();
        let field = DrivableDistanceField::from_grid(&map.grid);
        // a point well off the drivable band (lane half-width is 12 m)
        let p = Vec2::new(17.1, 20.3);
        let mut tape = Tape::new();
        let x = tape.input(p.x);
        let y = tape.input(p.y);
        let s = field.sample_on_tape(&mut tape, x, y);
        assert_abs_diff_eq!(tape.val(s), field.sample(p), epsilon = 1e-12);
        assert!(tape.val(s) > 1.0, "test point should be off-road");

        let check = grad_check(
            |t, ids| Ok(field.sample_on_tape(t, ids[0], ids[1])),
            &[p.x, p.y],
            1e-7,
        )
        .unwrap();
        assert!(check.max_relative_error() < 1e-5, "{:?}", check);
    }

    // ---- state-level loss helpers ----

    #[test]
    fn collision_point_distance_pinned_example() {
        let ego = AgentState::new(1, Vec2::new(-2.0, 0.0), Vec2::zero(), 0.0, 4.0, 2.0).unwrap();
        let victim = AgentState::new(2, Vec2::new(5.0, 4.0), Vec2::zero(), 0.0, 4.0, 2.0).unwrap();
        assert_eq!(front_bumper(&ego), Vec2::new(0.0, 0.0));
        assert_eq!(rear_bumper(&victim), Vec2::new(3.0, 4.0));
        assert_eq!(collision_point_distance(&ego, &victim), 5.0);
    }

    #[test]
    fn collision_point_gradient_is_the_unit_sight_vector() {
        let victim = AgentState::new(2, Vec2::new(5.0, 4.0), Vec2::zero(), 0.0, 4.0, 2.0).unwrap();
        let f = |px: f64, py: f64| {
            let e = AgentState::new(1, Vec2::new(px, py), Vec2::zero(), 0.0, 4.0, 2.0).unwrap();
            collision_point_distance(&e, &victim)
        };
        let h = 1e-6;
        let gx = (f(-2.0 + h, 0.0) - f(-2.0 - h, 0.0)) / (2.0 * h);
        let gy = (f(-2.0, h) - f(-2.0, -h)) / (2.0 * h);
        // d|front - rear|/d(ego position) = (front - rear) / |front - rear|
        assert_abs_diff_eq!(gx, -0.6, epsilon = 1e-6);
        assert_abs_diff_eq!(gy, -0.8, epsilon = 1e-6);
    }

    #[test]
    fn side_impact_distance_hits_nearest_corner() {
        let ego = AgentState::new(1, Vec2::new(-2.0, 0.0), Vec2::zero(), 0.0, 4.0, 2.0).unwrap();
        let victim = AgentState::new(2, Vec2::new(10.0, 0.0), Vec2::zero(), 0.0, 4.0, 2.0).unwrap();
        // ego front (0,0); victim corners (8,±1), (12,±1); nearest = sqrt(65)
        assert_abs_diff_eq!(
            side_impact_distance(&ego, &victim),
            65.0f64.sqrt(),
            epsilon = 1e-12
        );

        let rot = |s: &AgentState<f64>, phi: f64| {
            AgentState::new(
                s.agent_id,
                s.position.rotated(phi),
                s.velocity.rotated(phi),
                s.heading + phi,
                s.length,
                s.width,
            )
            .unwrap()
        };
        for phi in [0.3, -1.1, 2.5] {
            assert_abs_diff_eq!(
                side_impact_distance(&rot(&ego, phi), &rot(&victim, phi)),
                65.0f64.sqrt(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn ttc_shortfall_pinned_values() {
        assert_abs_diff_eq!(
            ttc_shortfall(TimeToEvent::Finite(0.34), 2.0),
            2.7556,
            epsilon = 1e-12
        );
        assert_eq!(ttc_shortfall(TimeToEvent::Finite(2.0), 2.0), 0.0);
        assert_eq!(ttc_shortfall(TimeToEvent::Finite(7.0), 2.0), 0.0);
        assert_eq!(ttc_shortfall(TimeToEvent::<f64>::Unbounded, 2.0), 0.0);
    }

    // ---- victim selection ----

    #[test]
    fn victim_is_the_smallest_finite_ttc_not_the_nearest() {
        // lead car 2 closes at 4 m/s; far car 5 closes at 17 m/s head-on
        let scene = scene_with(vec![
            cv_traj(1, Vec2::new(-30.0, 0.0), Vec2::new(12.0, 0.0), 0.0),
            cv_traj(2, Vec2::new(-5.0, 0.0), Vec2::new(8.0, 0.0), 0.0),
            cv_traj(5, Vec2::new(30.0, 0.0), Vec2::new(-5.0, 0.0), std::f64::consts::PI),
        ]);
        assert_eq!(select_victim(&scene).unwrap(), 5);
    }

    #[test]
    fn victim_falls_back_to_nearest_when_nobody_closes() {
        let scene = scene_with(vec![
            cv_traj(1, Vec2::new(-30.0, 0.0), Vec2::new(12.0, 0.0), 0.0),
            cv_traj(3, Vec2::new(-25.0, 5.0), Vec2::new(12.0, 0.0), 0.0),
            cv_traj(4, Vec2::new(-30.0, -9.0), Vec2::new(12.0, 0.0), 0.0),
        ]);
        assert_eq!(select_victim(&scene).unwrap(), 3);
    }

    #[test]
    fn lone_ego_has_no_victim() {
        let scene = scene_with(vec![cv_traj(1, Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), 0.0)]);
        assert!(matches!(select_victim(&scene), Err(OptimizerError::NoVictim)));
    }

    // ---- decode on tape ----

    #[test]
    fn tape_decode_matches_value_decode() {
        let model = small_model(21);
        let scene = chase_scene();
        let ctx = model.conditioning(&scene).unwrap();
        let z = vec![0.3, -0.2, 0.1, 0.05];
        let value = model.decode(&z, &ctx).unwrap();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = z.iter().map(|&v| tape.input(v)).collect();
        let nodes = model.decode_on_tape(&mut tape, &ids, &ctx).unwrap();
        assert_eq!(nodes.len(), value.len());
        for (agent, pts) in nodes.iter().enumerate() {
            for (k, &(x, y)) in pts.iter().enumerate() {
                assert_abs_diff_eq!(tape.val(x), value[agent][k].x, epsilon = 1e-10);
                assert_abs_diff_eq!(tape.val(y), value[agent][k].y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn tape_decode_gradient_matches_finite_differences() {
        let model = small_model(22);
        let scene = chase_scene();
        let ctx = model.conditioning(&scene).unwrap();
        let check = grad_check(
            |tape, ids| {
                let nodes = model
                    .decode_on_tape(tape, ids, &ctx)
                    .map_err(|_| DiffError::EmptySet("decode"))?;
                let mut parts = Vec::new();
                for pts in &nodes {
                    for &(x, y) in pts {
                        parts.push(x);
                        parts.push(tape.scale(y, 0.5));
                    }
                }
                Ok(tape.sum_set(&parts))
            },
            &[0.3, -0.2, 0.1, 0.05],
            1e-6,
        )
        .unwrap();
        assert_eq!(check.kinks(), 0);
        assert!(check.max_relative_error() < 1e-5, "{:?}", check);
    }

    // ---- loss composition ----

    fn spiky_weights() -> LossWeightVector {
        LossWeightVector {
            w_collision_point: 2.5,
            w_side_impact: 0.7,
            w_ttc: 3.1,
            w_lateral: 1.3,
            w_yaw: 0.4,
            alpha1: 0.9,
            alpha2: 1.7,
            alpha3: 2.2,
            w_new: 0.0,
        }
    }

    #[test]
    fn term_values_recompose_into_the_total() {
        let model = small_model(30);
        let scene = chase_scene();
        let opt = AdversarialOptimizer::new(LossTermParams::default(), spiky_weights());
        let (total, terms) = opt.evaluate(&model, &scene, &[0.2, 0.1, -0.3, 0.0]).unwrap();
        assert!(total.is_finite());
        for v in [
            terms.jerk,
            terms.yaw,
            terms.drivable,
            terms.collision_point,
            terms.side_impact,
            terms.ttc,
            terms.lateral,
            terms.prior,
        ] {
            assert!(v >= 0.0, "negative term {v}");
        }
        assert!(
            (total - terms.weighted_total(&opt.weights)).abs() <= 1e-9,
            "total {total} vs recomposed {}",
            terms.weighted_total(&opt.weights)
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let model = small_model(31);
        let scene = chase_scene();
        let opt = AdversarialOptimizer::new(LossTermParams::default(), spiky_weights());
        let attack = opt.prepare(&model, &scene).unwrap();
        let z = [0.25, -0.15, 0.05, 0.4];
        let check = grad_check(
            |tape, ids| {
                let (total, _) = opt
                    .build_loss(tape, &model, &attack, ids)
                    .map_err(|_| DiffError::EmptySet("loss"))?;
                Ok(total)
            },
            &z,
            1e-6,
        )
        .unwrap();
        // min/relu selections may sit near a kink for some coordinates;
        // every smooth coordinate must agree tightly
        assert!(
            check.max_relative_error() < 1e-4 || check.kinks() > 0,
            "{check:?}"
        );
    }

    // ---- the optimizer loop ----

    #[test]
    fn optimize_descends_and_records_consistent_iterates() {
        let model = small_model(40);
        let scene = chase_scene();
        let opt = AdversarialOptimizer::new(LossTermParams::default(), spiky_weights());
        let cfg = OptimizerConfig {
            max_iterations: 30,
            seed: 7,
            ..OptimizerConfig::default()
        };
        let result = opt.optimize(&model, &scene, &cfg).unwrap();

        assert!(!result.history.is_empty());
        assert!(result.history.len() <= cfg.max_iterations + 1);
        for pair in result.history.windows(2) {
            assert!(
                pair[1].total < pair[0].total,
                "accepted iterates must strictly improve"
            );
        }
        for rec in &result.history {
            assert!(
                (rec.total - rec.terms.weighted_total(&result.weights)).abs() <= 1e-9
            );
        }
        assert_eq!(result.z_final, result.history.last().unwrap().z);
        assert_eq!(result.z_initial.len(), 4);

        // materialized scenario carries the decoded future
        assert_eq!(result.scenario.future_horizon, 10);
        let ego = result.scenario.ego();
        assert_eq!(ego.states.len(), 12 + 10);
    }

    #[test]
    fn optimize_is_bit_deterministic_per_seed() {
        let model = small_model(41);
        let scene = chase_scene();
        let opt = AdversarialOptimizer::new(LossTermParams::default(), spiky_weights());
        let cfg = OptimizerConfig {
            max_iterations: 12,
            seed: 5,
            ..OptimizerConfig::default()
        };
        let a = opt.optimize(&model, &scene, &cfg).unwrap();
        let b = opt.optimize(&model, &scene, &cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.z_final.iter().zip(&b.z_final) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let other = opt
            .optimize(&model, &scene, &OptimizerConfig { seed: 6, ..cfg })
            .unwrap();
        assert_ne!(a.z_initial, other.z_initial, "seed must move the start");
    }

    #[test]
    fn inactive_prior_is_bit_identical_to_no_prior() {
        let model = small_model(42);
        let scene = chase_scene();
        let weights = LossWeightVector {
            w_new: 0.0,
            ..LossWeightVector::default()
        };
        let plain = AdversarialOptimizer::new(LossTermParams::default(), weights.clone());
        let mut primed = AdversarialOptimizer::new(LossTermParams::default(), weights);
        primed.add_behavior_prior("aggressive_yaw").unwrap();

        let cfg = OptimizerConfig {
            max_iterations: 10,
            seed: 3,
            ..OptimizerConfig::default()
        };
        let a = plain.optimize(&model, &scene, &cfg).unwrap();
        let b = primed.optimize(&model, &scene, &cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.total.to_bits(), rb.total.to_bits());
            for (x, y) in ra.z.iter().zip(&rb.z) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn unknown_prior_name_is_rejected() {
        let mut opt = AdversarialOptimizer::<f64>::new(
            LossTermParams::default(),
            LossWeightVector::default(),
        );
        match opt.add_behavior_prior("does_not_exist") {
            Err(OptimizerError::UnknownLossTerm(name)) => assert_eq!(name, "does_not_exist"),
            other => panic!("expected UnknownLossTerm, got {other:?}"),
        }
        opt.add_behavior_prior("aggressive_yaw").unwrap();
    }

    struct PoisonPrior;
    impl BehaviorPriorTerm<f64> for PoisonPrior {
        fn name(&self) -> &str {
            "poison"
        }
        fn build(
            &self,
            tape: &mut Tape<f64>,
            _ego: &TrajectoryNodes<f64>,
        ) -> Result<NodeId, DiffError> {
            Ok(tape.constant(f64::NAN))
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_the_iteration() {
        let model = small_model(43);
        let scene = chase_scene();
        let weights = LossWeightVector {
            w_new: 1.0,
            ..LossWeightVector::default()
        };
        let mut opt = AdversarialOptimizer::new(LossTermParams::default(), weights);
        opt.register_prior(Arc::new(PoisonPrior));
        opt.add_behavior_prior("poison").unwrap();
        match opt.optimize(&model, &scene, &OptimizerConfig::default()) {
            Err(OptimizerError::OptimizationAborted { iteration, .. }) => {
                assert_eq!(iteration, 0)
            }
            other => panic!("expected OptimizationAborted, got {other:?}"),
        }
    }

    #[test]
    fn contact_heavy_weights_pull_the_bumper_gap_down() {
        let model = small_model(44);
        let scene = chase_scene();
        let weights = LossWeightVector {
            w_collision_point: 5.0,
            w_yaw: 0.1,
            alpha1: 0.05,
            alpha2: 0.2,
            alpha3: 3.0,
            ..LossWeightVector::default()
        };
        let opt = AdversarialOptimizer::new(LossTermParams::default(), weights);
        let cfg = OptimizerConfig {
            max_iterations: 40,
            seed: 3,
            ..OptimizerConfig::default()
        };
        let result = opt.optimize(&model, &scene, &cfg).unwrap();
        let first = &result.history.first().unwrap().terms;
        let last = &result.history.last().unwrap().terms;
        assert!(
            last.collision_point < first.collision_point,
            "bumper gap {} -> {}",
            first.collision_point,
            last.collision_point
        );
    }

    #[test]
    fn injected_yaw_prior_raises_final_yaw_activity() {
        let model = small_model(45);
        let scene = chase_scene();
        let params = LossTermParams::default();
        let cfg_base = OptimizerConfig {
            max_iterations: 25,
            init_jitter: 0.1,
            ..OptimizerConfig::default()
        };

        let mean_abs_yaw = |scenario: &Scene<f64>| {
            let ego = scenario.ego();
            let dt = scenario.dt();
            let future = &ego.states[12..];
            let mut acc = 0.0;
            let mut n = 0usize;
            for w in future.windows(2) {
                acc += (crate::geom::wrap_angle(w[1].heading - w[0].heading) / dt).abs();
                n += 1;
            }
            acc / n as f64
        };

        let plain = AdversarialOptimizer::new(params, LossWeightVector::default());
        let mut primed = AdversarialOptimizer::new(
            params,
            LossWeightVector {
                w_new: 50.0,
                ..LossWeightVector::default()
            },
        );
        primed.add_behavior_prior("aggressive_yaw").unwrap();

        let mut wins = 0usize;
        let mut base_sum = 0.0;
        let mut primed_sum = 0.0;
        for seed in 0..10 {
            let cfg = OptimizerConfig { seed, ..cfg_base };
            let a = plain.optimize(&model, &scene, &cfg).unwrap();
            let b = primed.optimize(&model, &scene, &cfg).unwrap();
            let (ya, yb) = (mean_abs_yaw(&a.scenario), mean_abs_yaw(&b.scenario));
            base_sum += ya;
            primed_sum += yb;
            if yb > ya {
                wins += 1;
            }
        }
        assert!(
            primed_sum > base_sum,
            "mean yaw with prior {primed_sum} vs without {base_sum}"
        );
        assert!(wins >= 7, "prior raised yaw in only {wins}/10 runs");
    }

    // ---- baseline perturbation ----

    #[test]
    fn zero_noise_baseline_is_reproducible() {
        let model = small_model(50);
        let scene = chase_scene();
        let (z1, s1) =
            perturb_baseline(&model, &scene, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (z2, s2) =
            perturb_baseline(&model, &scene, 0.0, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(s1, s2);

        let (z3, s3) =
            perturb_baseline(&model, &scene, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(z1, z3);
        assert_ne!(s1, s3);
    }

    // ---- configuration ----

    #[test]
    fn bad_configurations_are_rejected() {
        let ok = OptimizerConfig::<f64>::default();
        ok.validate().unwrap();
        for bad in [
            OptimizerConfig { learning_rate: 0.0, ..ok },
            OptimizerConfig { learning_rate: f64::NAN, ..ok },
            OptimizerConfig { max_iterations: 0, ..ok },
            OptimizerConfig { tolerance: -1.0, ..ok },
            OptimizerConfig { backtrack_factor: 1.0, ..ok },
            OptimizerConfig { backtrack_factor: 0.0, ..ok },
            OptimizerConfig { init_jitter: -0.1, ..ok },
        ] {
            assert!(matches!(
                bad.validate(),
                Err(OptimizerError::InvalidConfig(_))
            ));
        }
        let params_ok = LossTermParams::<f64>::default();
        params_ok.validate().unwrap();
        for bad in [
            LossTermParams { t_safe: 0.0, ..params_ok },
            LossTermParams { epsilon: 0.0, ..params_ok },
            LossTermParams { omega_thresh: -0.2, ..params_ok },
            LossTermParams { k_lateral: -1.0, ..params_ok },
        ] {
            assert!(matches!(
                bad.validate(),
                Err(OptimizerError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn iterate_records_round_trip_through_serde() {
        let rec = IterateRecord {
            z: vec![0.5, -1.25],
            total: 3.75,
            terms: LossTerms {
                jerk: 0.1,
                yaw: 2.0,
                drivable: 0.0,
                collision_point: 8.5,
                side_impact: 9.0,
                ttc: 0.25,
                lateral: 1.5,
                prior: 0.0,
            },
        };
        let json = serde_json::to_string(&rec).unwrap();
        let back: IterateRecord<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }
}
