//! Risk banding and population-level evaluation scores.
//!
//! Two granularities live here. Per scenario, [`classify`] bands a worst-case
//! [`IndicatorSet`] into a [`RiskLevel`] against the threshold table in
//! [`RiskThresholds`], and [`long_tail_coverage`] counts the long-tail
//! fraction of a set. Per population, three composite scores compare a
//! generated batch against a reference batch:
//!
//! * [`trajectory_realism`] — how much the attacked latents and decoded
//!   motion still look like draws from the learned prior,
//! * [`interaction_consistency`] — whether multi-agent kinematics stay
//!   physically plausible,
//! * [`sim_to_real`] — distributional/spectral/semantic similarity between
//!   generated and recorded trajectory sets.
//!
//! Every component is normalized into [0, 1] and each composite is the plain
//! arithmetic mean of its components, so reports stay comparable across runs.

use crate::geom::{point_polyline_distance, wrap_angle, Vec2};
use crate::motion_prior::LatentDistribution;
use crate::risk_field::{indicators_for_states, IndicatorSet, TimeToEvent};
use crate::scalar::Scalar;
use crate::scene::{LaneGeometry, Scene, Trajectory};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lateral drift (max minus min offset from the initial heading line) that
/// counts as a lane-change event (m). Roughly one lane width minus slack.
pub const LANE_SHIFT_EVENT_M: f64 = 2.5;
/// Speed derivative below this is a hard-brake event (m/s²).
pub const HARD_BRAKE_MPS2: f64 = -3.0;
/// Speeds below this count as standstill (m/s).
pub const STANDSTILL_SPEED_MPS: f64 = 0.5;
/// Histogram resolution for the distribution-alignment term.
pub const HISTOGRAM_BINS: usize = 32;

/// Steps that move less than this carry no usable heading (m).
const MIN_DISPLACEMENT_M: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric needs a non-empty scenario set")]
    EmptySet,
    #[error("scene needs at least two agents to score interactions")]
    TooFewAgents,
    #[error("scene has no lane geometry to measure indicators against")]
    NoLanes,
    #[error("incompatible sets: {0}")]
    IncompatibleSets(&'static str),
    #[error("risk thresholds out of order: {0}")]
    BadThresholds(&'static str),
}

/// One value per surrogate safety indicator, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTriple<F> {
    pub ttc: F,
    pub tlc: F,
    pub thw: F,
}

/// Banding thresholds over (TTC, TLC, THW).
///
/// The bands read outward from the worst case: at or below every long-tail
/// cut the scenario is a long-tail event; at or above every low-risk floor it
/// is routine traffic; inside the high band's upper edge (and not long-tail)
/// it is high risk; whatever falls in the unclassified gaps in between stays
/// [`RiskLevel::Intermediate`] rather than being force-fitted to a band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(deserialize = "F: Deserialize<'de> + Scalar"))]
pub struct RiskThresholds<F> {
    /// At or above all of these, a scene reads as routine traffic.
    pub low_min: IndicatorTriple<F>,
    /// Lower edge of the high-risk band. The classifier itself only needs
    /// the upper edge plus the long-tail cut; the lower edge documents the
    /// band extent and anchors the ordering invariant.
    pub high_lower: IndicatorTriple<F>,
    /// Upper edge of the high-risk band.
    pub high_upper: IndicatorTriple<F>,
    /// At or below all of these, the scene is a long-tail event.
    pub long_tail_max: IndicatorTriple<F>,
    /// Tighter cut applied under [`LongTailCut::Strict`].
    pub strict_long_tail_max: IndicatorTriple<F>,
}

impl<F: Scalar> Default for RiskThresholds<F> {
    fn default() -> Self {
        let t = |ttc: f64, tlc: f64, thw: f64| IndicatorTriple {
            ttc: F::cast(ttc),
            tlc: F::cast(tlc),
            thw: F::cast(thw),
        };
        Self {
            low_min: t(5.0, 1.5, 2.5),
            high_lower: t(1.5, 0.8, 1.0),
            high_upper: t(3.0, 1.5, 2.5),
            long_tail_max: t(1.5, 0.8, 1.0),
            strict_long_tail_max: t(1.0, 0.6, 0.7),
        }
    }
}

impl<F: Scalar> RiskThresholds<F> {
    /// Bands must nest: strict ≤ long-tail ≤ high lower ≤ {high upper, low
    /// floor}, per indicator, and everything strictly positive.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let axes: [(&str, fn(&IndicatorTriple<F>) -> F); 3] = [
            ("ttc", |t| t.ttc),
            ("tlc", |t| t.tlc),
            ("thw", |t| t.thw),
        ];
        for (name, get) in axes {
            let strict = get(&self.strict_long_tail_max);
            let long_tail = get(&self.long_tail_max);
            let high_lo = get(&self.high_lower);
            let high_hi = get(&self.high_upper);
            let low = get(&self.low_min);
            if strict <= F::zero() {
                return Err(MetricsError::BadThresholds("thresholds must be positive"));
            }
            if strict > long_tail {
                return Err(MetricsError::BadThresholds(
                    "strict long-tail cut exceeds the standard cut",
                ));
            }
            if long_tail > high_lo {
                return Err(MetricsError::BadThresholds(
                    "long-tail cut exceeds the high band's lower edge",
                ));
            }
            if high_lo > high_hi {
                return Err(MetricsError::BadThresholds("high band edges are inverted"));
            }
            if high_lo > low {
                return Err(MetricsError::BadThresholds(
                    "high band starts above the low-risk floor",
                ));
            }
            let _ = name;
        }
        Ok(())
    }
}

/// Which long-tail cut [`classify`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongTailCut {
    #[default]
    Standard,
    /// The tighter "deep tail" thresholds; everything between the two cuts
    /// then classifies as high risk instead.
    Strict,
}

/// Scenario risk band, ordered by severity (`Low < … < LongTail`).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Intermediate,
    High,
    LongTail,
}

/// Band a scenario's worst-case indicators.
///
/// Unbounded indicators read as +∞, so a scene with no closing interaction
/// at all sits squarely in the low band. Long-tail requires *all three*
/// indicators at or below their cut simultaneously; low requires all three at
/// or above their floors; high requires all three at or below the high band's
/// upper edge (long-tail excluded); anything else is intermediate. The bands
/// only touch on boundary sets, and long-tail is checked first so the
/// severest reading wins there.
pub fn classify<F: Scalar>(
    indicators: &IndicatorSet<F>,
    thresholds: &RiskThresholds<F>,
    cut: LongTailCut,
) -> RiskLevel {
    let lt = match cut {
        LongTailCut::Standard => thresholds.long_tail_max,
        LongTailCut::Strict => thresholds.strict_long_tail_max,
    };
    if indicators.ttc.at_most(lt.ttc)
        && indicators.tlc.at_most(lt.tlc)
        && indicators.thw.at_most(lt.thw)
    {
        return RiskLevel::LongTail;
    }
    let lo = thresholds.low_min;
    if indicators.ttc.at_least(lo.ttc)
        && indicators.tlc.at_least(lo.tlc)
        && indicators.thw.at_least(lo.thw)
    {
        return RiskLevel::Low;
    }
    let hi = thresholds.high_upper;
    if indicators.ttc.at_most(hi.ttc)
        && indicators.tlc.at_most(hi.tlc)
        && indicators.thw.at_most(hi.thw)
    {
        return RiskLevel::High;
    }
    RiskLevel::Intermediate
}

fn min_time<F: Scalar>(a: TimeToEvent<F>, b: TimeToEvent<F>) -> TimeToEvent<F> {
    match (a, b) {
        (TimeToEvent::Finite(x), TimeToEvent::Finite(y)) => TimeToEvent::Finite(x.min(y)),
        (TimeToEvent::Finite(x), TimeToEvent::Unbounded) => TimeToEvent::Finite(x),
        (TimeToEvent::Unbounded, other) => other,
    }
}

fn fold_worst<F: Scalar>(a: IndicatorSet<F>, b: IndicatorSet<F>) -> IndicatorSet<F> {
    IndicatorSet {
        ttc: min_time(a.ttc, b.ttc),
        thw: min_time(a.thw, b.thw),
        tlc: min_time(a.tlc, b.tlc),
        min_distance: a.min_distance.min(b.min_distance),
        lateral_gap: a.lateral_gap.min(b.lateral_gap),
    }
}

/// Pointwise minimum over a series of indicator sets (None when empty).
/// Unbounded entries act as +∞: any finite observation wins.
pub fn worst_case_indicators<F: Scalar>(series: &[IndicatorSet<F>]) -> Option<IndicatorSet<F>> {
    let mut it = series.iter().copied();
    let first = it.next()?;
    Some(it.fold(first, fold_worst))
}

fn nearest_lane<'a, F: Scalar>(lanes: &'a [LaneGeometry<F>], p: Vec2<F>) -> &'a LaneGeometry<F> {
    lanes
        .iter()
        .min_by(|a, b| {
            let da = point_polyline_distance(p, &a.centerline).0;
            let db = point_polyline_distance(p, &b.centerline).0;
            da.partial_cmp(&db).expect("lane distances are finite")
        })
        .expect("caller checks for lanes")
}

/// Worst case per stored step: at each instant, the minimum over every
/// ordered agent pair, each subject measured against the lane nearest to it.
/// This is the per-step series scenario files persist.
pub fn step_worst_indicators<F: Scalar>(
    scene: &Scene<F>,
) -> Result<Vec<IndicatorSet<F>>, MetricsError> {
    if scene.num_agents() < 2 {
        return Err(MetricsError::TooFewAgents);
    }
    if scene.map.lanes.is_empty() {
        return Err(MetricsError::NoLanes);
    }
    let steps = scene.agents[0].len();
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut worst: Option<IndicatorSet<F>> = None;
        for subject in &scene.agents {
            let s = &subject.states[step];
            let lane = nearest_lane(&scene.map.lanes, s.position);
            for partner in &scene.agents {
                if partner.agent_id == subject.agent_id {
                    continue;
                }
                let ind = indicators_for_states(s, &partner.states[step], lane);
                worst = Some(match worst {
                    None => ind,
                    Some(w) => fold_worst(w, ind),
                });
            }
        }
        out.push(worst.expect("two agents yield at least one pair"));
    }
    Ok(out)
}

/// Worst-case indicators of a whole scene: the minimum over every stored
/// step and every ordered agent pair. This is what the band thresholds are
/// meant to see — event criticality, not averages.
pub fn scenario_indicators<F: Scalar>(scene: &Scene<F>) -> Result<IndicatorSet<F>, MetricsError> {
    let series = step_worst_indicators(scene)?;
    Ok(worst_case_indicators(&series).expect("trajectories are never empty"))
}

/// Fraction of scenarios whose indicators classify as long-tail (LCR).
pub fn long_tail_coverage<F: Scalar>(
    scenarios: &[IndicatorSet<F>],
    thresholds: &RiskThresholds<F>,
    cut: LongTailCut,
) -> Result<F, MetricsError> {
    if scenarios.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let hits = scenarios
        .iter()
        .filter(|s| classify(s, thresholds, cut) == RiskLevel::LongTail)
        .count();
    Ok(F::from_usize(hits).unwrap() / F::from_usize(scenarios.len()).unwrap())
}

/// Count of scenarios per risk band.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskHistogram {
    pub low: usize,
    pub intermediate: usize,
    pub high: usize,
    pub long_tail: usize,
}

impl RiskHistogram {
    pub fn from_levels(levels: impl IntoIterator<Item = RiskLevel>) -> Self {
        let mut h = Self::default();
        for level in levels {
            h.record(level);
        }
        h
    }

    pub fn record(&mut self, level: RiskLevel) {
        match level {
            RiskLevel::Low => self.low += 1,
            RiskLevel::Intermediate => self.intermediate += 1,
            RiskLevel::High => self.high += 1,
            RiskLevel::LongTail => self.long_tail += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.low + self.intermediate + self.high + self.long_tail
    }

    /// Band share; 0 for an empty histogram.
    pub fn fraction(&self, level: RiskLevel) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let count = match level {
            RiskLevel::Low => self.low,
            RiskLevel::Intermediate => self.intermediate,
            RiskLevel::High => self.high,
            RiskLevel::LongTail => self.long_tail,
        };
        count as f64 / n as f64
    }
}

// ---------------------------------------------------------------------------
// Trajectory realism
// ---------------------------------------------------------------------------

/// One generated sample: the latent it was decoded from plus the decoded ego
/// motion. Reference samples carry the pre-attack latent in the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample<F> {
    pub z: Vec<F>,
    /// Decoded ego positions at uniform spacing.
    pub positions: Vec<Vec2<F>>,
    /// Seconds between consecutive positions.
    pub dt: F,
}

/// Normalizing constants for the realism score. The exponential/logistic
/// maps themselves are fixed; only their scales are tunable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealismConfig<F> {
    /// Divisor applied to the mean squared jerk, in (m/s³)², before the
    /// exponential smoothness map.
    pub jerk_scale: F,
    /// Slope of the logistic mapping per-dimension prior log-likelihood
    /// surplus to [0, 1].
    pub likelihood_slope: F,
}

impl<F: Scalar> Default for RealismConfig<F> {
    fn default() -> Self {
        Self {
            jerk_scale: F::cast(2.0),
            likelihood_slope: F::one(),
        }
    }
}

/// Realism components, each in [0, 1]; `total` is their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealismScore<F> {
    /// exp(−mean latent displacement per dimension): 1 when the attack never
    /// left its starting latents.
    pub latent_proximity: F,
    /// exp(−|pooled latent std − 1|): penalizes collapsed or exploded
    /// latent populations relative to the unit-variance prior.
    pub latent_spread: F,
    /// Logistic of the prior log-likelihood surplus per dimension; ≈0.5 for
    /// prior-typical latents, →1 at the prior mean, →0 far outside.
    pub prior_likelihood: F,
    /// exp(−mean squared jerk / scale) over the decoded motion.
    pub smoothness: F,
    /// exp(−mean absolute heading increment between consecutive steps).
    pub heading_continuity: F,
    pub total: F,
}

fn gaussian_log_lik<F: Scalar>(z: &[F], dist: &LatentDistribution<F>) -> F {
    let ln_2pi = F::cast(std::f64::consts::TAU.ln());
    let half = F::cast(0.5);
    let mut acc = F::zero();
    for d in 0..dist.dim() {
        let lv = dist.log_variance[d];
        let dm = z[d] - dist.mean[d];
        acc += ln_2pi + lv + dm * dm * (-lv).exp();
    }
    -half * acc
}

/// E[log p(z)] for z ~ p: the reference point of the likelihood logistic.
fn expected_log_lik<F: Scalar>(dist: &LatentDistribution<F>) -> F {
    let ln_2pi = F::cast(std::f64::consts::TAU.ln());
    let half = F::cast(0.5);
    let mut acc = F::zero();
    for d in 0..dist.dim() {
        acc += ln_2pi + dist.log_variance[d] + F::one();
    }
    -half * acc
}

/// [`trajectory_realism_with`] under the default normalizers.
pub fn trajectory_realism<F: Scalar>(
    generated: &[LatentSample<F>],
    reference: &[LatentSample<F>],
    prior: &LatentDistribution<F>,
) -> Result<RealismScore<F>, MetricsError> {
    trajectory_realism_with(generated, reference, prior, &RealismConfig::default())
}

/// Score how much an attacked batch still resembles prior-driven generation.
///
/// `generated` and `reference` pair one-to-one by index (the reference entry
/// holds the latent the attack started from). The five components:
///
/// * latent proximity — exp(−mean‖z − z₀‖/d),
/// * latent spread — exp(−|pooled std(z) − 1|),
/// * prior likelihood — logistic((mean log p(z) − E[log p])/d),
/// * smoothness — exp(−mean squared jerk / jerk_scale),
/// * heading continuity — exp(−mean |Δheading|), headings taken from
///   displacement directions, standstill steps skipped.
///
/// Trajectories shorter than four points contribute no jerk samples (and no
/// heading pairs below three); an all-short batch scores perfectly smooth by
/// vacuity rather than erroring.
pub fn trajectory_realism_with<F: Scalar>(
    generated: &[LatentSample<F>],
    reference: &[LatentSample<F>],
    prior: &LatentDistribution<F>,
    cfg: &RealismConfig<F>,
) -> Result<RealismScore<F>, MetricsError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if generated.len() != reference.len() {
        return Err(MetricsError::IncompatibleSets(
            "generated and reference samples must pair one-to-one",
        ));
    }
    let dim = prior.dim();
    if dim == 0 {
        return Err(MetricsError::IncompatibleSets("latent space has no dimensions"));
    }
    for s in generated.iter().chain(reference) {
        if s.z.len() != dim {
            return Err(MetricsError::IncompatibleSets(
                "latent dimension differs from the prior's",
            ));
        }
    }
    let n = F::from_usize(generated.len()).unwrap();
    let d = F::from_usize(dim).unwrap();

    let mut deviation = F::zero();
    for (g, r) in generated.iter().zip(reference) {
        let mut sq = F::zero();
        for (a, b) in g.z.iter().zip(&r.z) {
            let delta = *a - *b;
            sq += delta * delta;
        }
        deviation += sq.sqrt() / d;
    }
    let latent_proximity = (-(deviation / n)).exp();

    let count = F::from_usize(generated.len() * dim).unwrap();
    let mut mean = F::zero();
    for g in generated {
        for &v in &g.z {
            mean += v;
        }
    }
    mean /= count;
    let mut var = F::zero();
    for g in generated {
        for &v in &g.z {
            let delta = v - mean;
            var += delta * delta;
        }
    }
    var /= count;
    let latent_spread = (-(var.sqrt() - F::one()).abs()).exp();

    let mut ll = F::zero();
    for g in generated {
        ll += gaussian_log_lik(&g.z, prior);
    }
    let surplus = (ll / n - expected_log_lik(prior)) / d;
    let prior_likelihood = F::one() / (F::one() + (-(cfg.likelihood_slope * surplus)).exp());

    let three = F::cast(3.0);
    let mut jerk_sq = F::zero();
    let mut jerk_n = 0usize;
    let mut turn = F::zero();
    let mut turn_n = 0usize;
    for g in generated {
        let dt3 = g.dt * g.dt * g.dt;
        for w in g.positions.windows(4) {
            let j = (w[3] - w[0] + (w[1] - w[2]) * three) * dt3.recip();
            jerk_sq += j.dot(j);
            jerk_n += 1;
        }
        let floor = F::cast(MIN_DISPLACEMENT_M);
        for w in g.positions.windows(3) {
            let a = w[1] - w[0];
            let b = w[2] - w[1];
            if a.norm() < floor || b.norm() < floor {
                continue;
            }
            turn += wrap_angle(b.angle() - a.angle()).abs();
            turn_n += 1;
        }
    }
    let mean_jerk_sq = if jerk_n == 0 {
        F::zero()
    } else {
        jerk_sq / F::from_usize(jerk_n).unwrap()
    };
    let smoothness = (-(mean_jerk_sq / cfg.jerk_scale)).exp();
    let mean_turn = if turn_n == 0 {
        F::zero()
    } else {
        turn / F::from_usize(turn_n).unwrap()
    };
    let heading_continuity = (-mean_turn).exp();

    let five = F::cast(5.0);
    let total = (latent_proximity + latent_spread + prior_likelihood + smoothness
        + heading_continuity)
        / five;
    Ok(RealismScore {
        latent_proximity,
        latent_spread,
        prior_likelihood,
        smoothness,
        heading_continuity,
        total,
    })
}

// ---------------------------------------------------------------------------
// Interaction consistency
// ---------------------------------------------------------------------------

/// Plausibility envelope for the interaction score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig<F> {
    /// Centers farther apart than this read as implausibly detached (m).
    pub max_pair_distance: F,
    /// Largest plausible velocity change over 0.2 s (m/s).
    pub velocity_step_limit: F,
    /// Acceleration magnitude ceiling for feasible maneuvers (m/s²).
    pub max_acceleration: F,
    /// Yaw-rate magnitude ceiling for feasible maneuvers (rad/s).
    pub max_yaw_rate: F,
    /// Collision rate the balance term rewards (fraction of scenarios).
    /// Zero for corpora meant to stay safe; push it up when the point of the
    /// batch is to collide.
    pub target_collision_rate: F,
}

impl<F: Scalar> Default for InteractionConfig<F> {
    fn default() -> Self {
        Self {
            max_pair_distance: F::cast(200.0),
            velocity_step_limit: F::cast(8.0),
            max_acceleration: F::cast(8.0),
            max_yaw_rate: F::cast(1.5),
            target_collision_rate: F::zero(),
        }
    }
}

/// Interaction components, each in [0, 1]; `total` is their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionScore<F> {
    /// Fraction of agent-pair timesteps with disjoint footprints at a
    /// plausible separation.
    pub distance_plausibility: F,
    /// Fraction of per-agent steps whose velocity change stays under the
    /// scaled step limit.
    pub velocity_continuity: F,
    /// Fraction of per-agent steps inside the acceleration/yaw envelope.
    pub maneuver_feasibility: F,
    /// Fraction of agent positions on drivable cells.
    pub spatial_coherence: F,
    /// 1 − |collision rate − target|, clipped.
    pub collision_balance: F,
    pub total: F,
}

/// Score physical plausibility of multi-agent interactions over a batch.
///
/// All fractions pool samples across the whole batch (not per-scene means),
/// so long scenes weigh proportionally to the evidence they carry. A scene
/// "collides" when any agent pair overlaps footprints at any step.
pub fn interaction_consistency<F: Scalar>(
    scenes: &[Scene<F>],
    cfg: &InteractionConfig<F>,
) -> Result<InteractionScore<F>, MetricsError> {
    if scenes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut pair_ok = 0usize;
    let mut pair_n = 0usize;
    let mut vel_ok = 0usize;
    let mut vel_n = 0usize;
    let mut man_ok = 0usize;
    let mut man_n = 0usize;
    let mut cell_ok = 0usize;
    let mut cell_n = 0usize;
    let mut collisions = 0usize;
    for scene in scenes {
        if scene.num_agents() < 2 {
            return Err(MetricsError::TooFewAgents);
        }
        let dt = scene.dt();
        let steps = scene.agents[0].len();
        let mut collided = false;
        for step in 0..steps {
            for i in 0..scene.agents.len() {
                let a = &scene.agents[i].states[step];
                cell_n += 1;
                if scene.map.grid.is_drivable(a.position) {
                    cell_ok += 1;
                }
                for j in i + 1..scene.agents.len() {
                    let b = &scene.agents[j].states[step];
                    pair_n += 1;
                    let overlap = a.footprint().overlaps(&b.footprint());
                    if overlap {
                        collided = true;
                    } else if a.position.distance(b.position) < cfg.max_pair_distance {
                        pair_ok += 1;
                    }
                }
            }
        }
        let step_budget = cfg.velocity_step_limit * dt / F::cast(0.2);
        for tr in &scene.agents {
            for w in tr.states.windows(2) {
                let dv = (w[1].velocity - w[0].velocity).norm();
                vel_n += 1;
                if dv <= step_budget {
                    vel_ok += 1;
                }
                man_n += 1;
                let accel = dv / dt;
                let yaw_rate = wrap_angle(w[1].heading - w[0].heading).abs() / dt;
                if accel <= cfg.max_acceleration && yaw_rate <= cfg.max_yaw_rate {
                    man_ok += 1;
                }
            }
        }
        if collided {
            collisions += 1;
        }
    }
    // Single-step scenes have no velocity windows; that is vacuous
    // compliance, not a violation.
    let frac = |ok: usize, n: usize| {
        if n == 0 {
            F::one()
        } else {
            F::from_usize(ok).unwrap() / F::from_usize(n).unwrap()
        }
    };
    let distance_plausibility = frac(pair_ok, pair_n);
    let velocity_continuity = frac(vel_ok, vel_n);
    let maneuver_feasibility = frac(man_ok, man_n);
    let spatial_coherence = frac(cell_ok, cell_n);
    let rate = F::from_usize(collisions).unwrap() / F::from_usize(scenes.len()).unwrap();
    let collision_balance = (F::one() - (rate - cfg.target_collision_rate).abs())
        .max(F::zero())
        .min(F::one());
    let five = F::cast(5.0);
    let total = (distance_plausibility
        + velocity_continuity
        + maneuver_feasibility
        + spatial_coherence
        + collision_balance)
        / five;
    Ok(InteractionScore {
        distance_plausibility,
        velocity_continuity,
        maneuver_feasibility,
        spatial_coherence,
        collision_balance,
        total,
    })
}

// ---------------------------------------------------------------------------
// Sim-to-real similarity
// ---------------------------------------------------------------------------

/// Similarity components, each in [0, 1]; `total` is their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimToRealScore<F> {
    /// 1 − mean Jensen–Shannon divergence (base 2) of the speed and
    /// acceleration histograms.
    pub distribution_alignment: F,
    /// 1 − mean clipped relative error of the four kinematic statistics
    /// {mean, std} × {speed, acceleration}.
    pub motion_alignment: F,
    /// Cosine similarity of the mean non-DC power spectra of speed signals.
    pub spectrum_alignment: F,
    /// 1 − mean total-variation distance of behavior-event frequencies
    /// (lane change, hard brake, standstill).
    pub behavior_alignment: F,
    pub total: F,
}

fn speeds_of<F: Scalar>(tr: &Trajectory<F>) -> Vec<f64> {
    tr.states.iter().map(|s| s.speed().as_f64()).collect()
}

fn pooled_speeds<F: Scalar>(set: &[Trajectory<F>]) -> Vec<f64> {
    set.iter().flat_map(|tr| speeds_of(tr)).collect()
}

fn pooled_accels<F: Scalar>(set: &[Trajectory<F>], dt: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for tr in set {
        let speeds = speeds_of(tr);
        out.extend(speeds.windows(2).map(|w| (w[1] - w[0]) / dt));
    }
    out
}

/// Jensen–Shannon divergence, base 2, over a shared equal-width binning of
/// the pooled samples. Identical point masses (zero-width range) give 0.
fn jsd_base2(a: &[f64], b: &[f64], bins: usize) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() != b.is_empty() {
        return 1.0;
    }
    let lo = a.iter().chain(b).fold(f64::INFINITY, |m, &x| m.min(x));
    let hi = a.iter().chain(b).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let width = hi - lo;
    if !width.is_finite() || width < 1e-12 {
        return 0.0;
    }
    let fill = |xs: &[f64]| {
        let mut h = vec![0.0_f64; bins];
        for &x in xs {
            let k = (((x - lo) / width) * bins as f64) as usize;
            h[k.min(bins - 1)] += 1.0;
        }
        let n = xs.len() as f64;
        for v in &mut h {
            *v /= n;
        }
        h
    };
    let p = fill(a);
    let q = fill(b);
    let mut acc = 0.0;
    for k in 0..bins {
        let m = 0.5 * (p[k] + q[k]);
        if p[k] > 0.0 {
            acc += 0.5 * p[k] * (p[k] / m).log2();
        }
        if q[k] > 0.0 {
            acc += 0.5 * q[k] * (q[k] / m).log2();
        }
    }
    acc.clamp(0.0, 1.0)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// |g − r| relative to the reference magnitude, clipped to 1. A reference
/// statistic near zero makes any deviation max out rather than blow up.
fn clipped_relative_error(g: f64, r: f64) -> f64 {
    ((g - r).abs() / r.abs().max(1e-9)).min(1.0)
}

/// Mean one-sided power spectrum of the speed signals, DC bin dropped (the
/// mean speed level belongs to the motion statistics, not the spectrum).
fn mean_power_spectrum<F: Scalar>(set: &[Trajectory<F>]) -> Vec<f64> {
    let n = set[0].len();
    let half = n / 2;
    if half == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut mean = vec![0.0_f64; half];
    for tr in set {
        let mut buf: Vec<Complex<f64>> = tr
            .states
            .iter()
            .map(|s| Complex::new(s.speed().as_f64(), 0.0))
            .collect();
        fft.process(&mut buf);
        for k in 1..=half {
            mean[k - 1] += buf[k].norm_sqr();
        }
    }
    for v in &mut mean {
        *v /= set.len() as f64;
    }
    mean
}

/// Cosine similarity of non-negative vectors; two flat spectra count as
/// identical (1), one flat against one structured as disjoint (0).
fn cosine_or_unit(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => {
            let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            (dot / (na * nb)).clamp(0.0, 1.0)
        }
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Per-set occurrence frequency of [lane change, hard brake, standstill].
/// Lane changes are read as lateral drift beyond [`LANE_SHIFT_EVENT_M`]
/// relative to the line through the first state along its heading.
fn behavior_frequencies<F: Scalar>(set: &[Trajectory<F>], dt: f64) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for tr in set {
        let first = &tr.states[0];
        let axis = Vec2::new(first.heading.cos(), first.heading.sin());
        let normal = axis.perp();
        let mut lo = 0.0_f64;
        let mut hi = 0.0_f64;
        for s in &tr.states {
            let off = (s.position - first.position).dot(normal).as_f64();
            lo = lo.min(off);
            hi = hi.max(off);
        }
        if hi - lo > LANE_SHIFT_EVENT_M {
            counts[0] += 1;
        }
        let speeds = speeds_of(tr);
        if speeds.windows(2).any(|w| (w[1] - w[0]) / dt < HARD_BRAKE_MPS2) {
            counts[1] += 1;
        }
        if speeds.iter().any(|&s| s < STANDSTILL_SPEED_MPS) {
            counts[2] += 1;
        }
    }
    let n = set.len() as f64;
    [
        counts[0] as f64 / n,
        counts[1] as f64 / n,
        counts[2] as f64 / n,
    ]
}

/// Compare a generated trajectory population against a recorded reference.
///
/// Both sets must share one horizon and sampling rate (the spectra are
/// bin-for-bin comparable only then). Statistical stability wants roughly
/// thirty-plus trajectories per side; smaller sets compute fine but the
/// histograms get noisy. `sim_to_real(a, a)` is 1 for any non-degenerate set.
pub fn sim_to_real<F: Scalar>(
    generated: &[Trajectory<F>],
    reference: &[Trajectory<F>],
) -> Result<SimToRealScore<F>, MetricsError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let horizon = generated[0].len();
    let rate = generated[0].sample_rate.as_f64();
    for tr in generated.iter().chain(reference) {
        if tr.len() != horizon {
            return Err(MetricsError::IncompatibleSets("trajectory horizons differ"));
        }
        if (tr.sample_rate.as_f64() - rate).abs() > 1e-9 {
            return Err(MetricsError::IncompatibleSets("sampling rates differ"));
        }
    }
    let dt = 1.0 / rate;

    let speeds_g = pooled_speeds(generated);
    let speeds_r = pooled_speeds(reference);
    let accels_g = pooled_accels(generated, dt);
    let accels_r = pooled_accels(reference, dt);

    let jsd_speed = jsd_base2(&speeds_g, &speeds_r, HISTOGRAM_BINS);
    let jsd_accel = jsd_base2(&accels_g, &accels_r, HISTOGRAM_BINS);
    let distribution_alignment = 1.0 - 0.5 * (jsd_speed + jsd_accel);

    let (ms_g, ss_g) = mean_std(&speeds_g);
    let (ms_r, ss_r) = mean_std(&speeds_r);
    let (ma_g, sa_g) = mean_std(&accels_g);
    let (ma_r, sa_r) = mean_std(&accels_r);
    let motion_alignment = 1.0
        - (clipped_relative_error(ms_g, ms_r)
            + clipped_relative_error(ss_g, ss_r)
            + clipped_relative_error(ma_g, ma_r)
            + clipped_relative_error(sa_g, sa_r))
            / 4.0;

    let spectrum_alignment =
        cosine_or_unit(&mean_power_spectrum(generated), &mean_power_spectrum(reference));

    let freq_g = behavior_frequencies(generated, dt);
    let freq_r = behavior_frequencies(reference, dt);
    let tv = (0..3).map(|k| (freq_g[k] - freq_r[k]).abs()).sum::<f64>() / 3.0;
    let behavior_alignment = 1.0 - tv;

    let total =
        (distribution_alignment + motion_alignment + spectrum_alignment + behavior_alignment)
            / 4.0;
    Ok(SimToRealScore {
        distribution_alignment: F::cast(distribution_alignment),
        motion_alignment: F::cast(motion_alignment),
        spectrum_alignment: F::cast(spectrum_alignment),
        behavior_alignment: F::cast(behavior_alignment),
        total: F::cast(total),
    })
}

/// Everything the evaluate pipeline reports for one generated batch.
/// Realism needs latents, which recorded corpora don't have; it stays `None`
/// there rather than faking a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<F> {
    pub long_tail_coverage: F,
    pub realism: Option<RealismScore<F>>,
    pub interaction: InteractionScore<F>,
    pub sim_to_real: SimToRealScore<F>,
    pub risk_histogram: RiskHistogram,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::scene::{
        rasterize_map, AgentState, BitRaster, BoundaryKind, MapGrid, SceneMap, Trajectory,
    };
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn finite(ttc: f64, tlc: f64, thw: f64) -> IndicatorSet<f64> {
        IndicatorSet {
            ttc: TimeToEvent::Finite(ttc),
            thw: TimeToEvent::Finite(thw),
            tlc: TimeToEvent::Finite(tlc),
            min_distance: 10.0,
            lateral_gap: 2.0,
        }
    }

    /// Independently coded banding rules with the numbers written out,
    /// deliberately bypassing RiskThresholds.
    fn rule_oracle(ttc: f64, tlc: f64, thw: f64) -> RiskLevel {
        let long_tail = [ttc <= 1.5, tlc <= 0.8, thw <= 1.0];
        let low = [ttc >= 5.0, tlc >= 1.5, thw >= 2.5];
        let high = [ttc <= 3.0, tlc <= 1.5, thw <= 2.5];
        if long_tail.iter().all(|&b| b) {
            RiskLevel::LongTail
        } else if low.iter().all(|&b| b) {
            RiskLevel::Low
        } else if high.iter().all(|&b| b) {
            RiskLevel::High
        } else {
            RiskLevel::Intermediate
        }
    }

    #[test]
    fn severity_order_ranks_long_tail_highest() {
        assert!(RiskLevel::Low < RiskLevel::Intermediate);
        assert!(RiskLevel::Intermediate < RiskLevel::High);
        assert!(RiskLevel::High < RiskLevel::LongTail);
    }

    #[test]
    fn default_thresholds_nest_and_bad_ones_are_rejected() {
        let th = RiskThresholds::<f64>::default();
        th.validate().unwrap();

        let mut bad = th;
        bad.long_tail_max.ttc = 2.0; // above the high band's lower edge
        assert!(matches!(
            bad.validate(),
            Err(MetricsError::BadThresholds(_))
        ));

        let mut inverted = th;
        inverted.strict_long_tail_max.thw = 1.2; // above the standard cut
        assert!(inverted.validate().is_err());
    }

    #[test]
    fn classify_bands_the_pinned_triples() {
        let th = RiskThresholds::default();
        let c = |t, l, h| classify(&finite(t, l, h), &th, LongTailCut::Standard);
        assert_eq!(c(1.0, 0.5, 0.5), RiskLevel::LongTail);
        assert_eq!(c(6.0, 2.0, 3.0), RiskLevel::Low);
        assert_eq!(c(4.0, 1.7, 2.6), RiskLevel::Intermediate);
        // Band boundaries are inclusive.
        assert_eq!(c(1.5, 0.8, 1.0), RiskLevel::LongTail);
        assert_eq!(c(5.0, 1.5, 2.5), RiskLevel::Low);
        assert_eq!(c(3.0, 1.5, 2.5), RiskLevel::High);
        // One indicator out of the tail band demotes to high.
        assert_eq!(c(1.5, 0.8, 1.1), RiskLevel::High);
    }

    #[test]
    fn unbounded_indicators_read_as_infinite() {
        let th = RiskThresholds::default();
        let calm = IndicatorSet {
            ttc: TimeToEvent::Unbounded,
            thw: TimeToEvent::Unbounded,
            tlc: TimeToEvent::Unbounded,
            min_distance: 50.0,
            lateral_gap: 10.0,
        };
        assert_eq!(classify(&calm, &th, LongTailCut::Standard), RiskLevel::Low);

        // A short TTC alone cannot be long-tail or high when the other two
        // indicators never bound.
        let mixed = IndicatorSet {
            ttc: TimeToEvent::Finite(0.5),
            ..calm
        };
        assert_eq!(
            classify(&mixed, &th, LongTailCut::Standard),
            RiskLevel::Intermediate
        );
    }

    #[test]
    fn strict_cut_tightens_the_long_tail_band() {
        let th = RiskThresholds::default();
        let borderline = finite(1.2, 0.7, 0.9);
        assert_eq!(
            classify(&borderline, &th, LongTailCut::Standard),
            RiskLevel::LongTail
        );
        assert_eq!(
            classify(&borderline, &th, LongTailCut::Strict),
            RiskLevel::High
        );
        let deep = finite(0.9, 0.5, 0.6);
        assert_eq!(classify(&deep, &th, LongTailCut::Strict), RiskLevel::LongTail);
    }

    #[test]
    fn classification_agrees_with_rule_oracle_on_dense_grid() {
        let th = RiskThresholds::default();
        let pts: Vec<f64> = (0..50).map(|i| 10.0 * i as f64 / 49.0).collect();
        for &ttc in &pts {
            for &tlc in &pts {
                for &thw in &pts {
                    assert_eq!(
                        classify(&finite(ttc, tlc, thw), &th, LongTailCut::Standard),
                        rule_oracle(ttc, tlc, thw),
                        "disagreement at ({ttc}, {tlc}, {thw})"
                    );
                }
            }
        }
    }

    #[test]
    fn coverage_counts_the_long_tail_fraction() {
        let th = RiskThresholds::default();
        let mut set: Vec<IndicatorSet<f64>> = vec![finite(6.0, 2.0, 3.0); 7];
        set.extend(vec![finite(1.0, 0.5, 0.5); 3]);
        let c = long_tail_coverage(&set, &th, LongTailCut::Standard).unwrap();
        assert_eq!(c, 0.3);

        let none = vec![finite(6.0, 2.0, 3.0); 4];
        assert_eq!(
            long_tail_coverage(&none, &th, LongTailCut::Standard).unwrap(),
            0.0
        );
        let all = vec![finite(0.4, 0.3, 0.2); 4];
        assert_eq!(
            long_tail_coverage(&all, &th, LongTailCut::Standard).unwrap(),
            1.0
        );
        assert!(matches!(
            long_tail_coverage::<f64>(&[], &th, LongTailCut::Standard),
            Err(MetricsError::EmptySet)
        ));
    }

    #[test]
    fn coverage_is_permutation_invariant_and_monotone() {
        let th = RiskThresholds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let mut set: Vec<IndicatorSet<f64>> = (0..30)
                .map(|_| {
                    finite(
                        rng.gen_range(0.0..10.0),
                        rng.gen_range(0.0..3.0),
                        rng.gen_range(0.0..4.0),
                    )
                })
                .collect();
            let before = long_tail_coverage(&set, &th, LongTailCut::Standard).unwrap();
            set.shuffle(&mut rng);
            let shuffled = long_tail_coverage(&set, &th, LongTailCut::Standard).unwrap();
            assert_eq!(before.to_bits(), shuffled.to_bits());

            set.push(finite(0.5, 0.4, 0.3));
            let grown = long_tail_coverage(&set, &th, LongTailCut::Standard).unwrap();
            assert!(grown >= before);
        }
    }

    #[test]
    fn worst_case_folds_minimum_and_unbounded() {
        assert!(worst_case_indicators::<f64>(&[]).is_none());
        let a = IndicatorSet {
            ttc: TimeToEvent::Unbounded,
            thw: TimeToEvent::Finite(2.0),
            tlc: TimeToEvent::Finite(3.0),
            min_distance: 5.0,
            lateral_gap: 1.0,
        };
        let b = IndicatorSet {
            ttc: TimeToEvent::Finite(4.0),
            thw: TimeToEvent::Unbounded,
            tlc: TimeToEvent::Finite(1.0),
            min_distance: 2.0,
            lateral_gap: -1.0,
        };
        let w = worst_case_indicators(&[a, b]).unwrap();
        assert_eq!(w.ttc, TimeToEvent::Finite(4.0));
        assert_eq!(w.thw, TimeToEvent::Finite(2.0));
        assert_eq!(w.tlc, TimeToEvent::Finite(1.0));
        assert_eq!(w.min_distance, 2.0);
        assert_eq!(w.lateral_gap, -1.0);

        let calm = IndicatorSet {
            ttc: TimeToEvent::Unbounded,
            thw: TimeToEvent::Unbounded,
            tlc: TimeToEvent::Unbounded,
            min_distance: 9.0,
            lateral_gap: 9.0,
        };
        let w2 = worst_case_indicators(&[calm, calm]).unwrap();
        assert!(w2.ttc.is_unbounded() && w2.thw.is_unbounded() && w2.tlc.is_unbounded());
    }

    // ---- scene fixtures ----

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

    fn lane_map() -> Arc<SceneMap<f64>> {
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
            map_id: 3,
            lanes: vec![lane],
            grid,
        })
    }

    /// All-drivable 100×40 m raster with no lanes, for interaction scoring.
    fn open_map() -> Arc<SceneMap<f64>> {
        let (rows, cols) = (40usize, 100usize);
        let mut raster = BitRaster::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                raster.set(r, c, true);
            }
        }
        Arc::new(SceneMap {
            map_id: 9,
            lanes: vec![],
            grid: MapGrid {
                resolution: 1.0,
                extent: (cols as f64, rows as f64),
                origin_pose: Pose::new(Vec2::zero(), 0.0),
                drivable_area: raster,
                lane_divider: BitRaster::zeros(rows, cols),
                degenerate_lanes_skipped: 0,
            },
        })
    }

    fn cv_traj(id: i64, start: Vec2<f64>, vel: Vec2<f64>, steps: usize) -> Trajectory<f64> {
        let dt = 0.2;
        let states = (0..steps)
            .map(|k| {
                AgentState::new(id, start + vel * (k as f64 * dt), vel, 0.0, 4.5, 2.0).unwrap()
            })
            .collect();
        Trajectory::new(id, 5.0, 0.0, states, 0.5).unwrap()
    }

    #[test]
    fn scenario_indicators_track_the_closing_pair() {
        let ego = cv_traj(1, Vec2::zero(), Vec2::new(10.0, 0.0), 5);
        let lead = cv_traj(2, Vec2::new(20.0, 0.0), Vec2::zero(), 5);
        let scene = Scene::new(vec![ego, lead], lane_map(), 1, 5, 0).unwrap();
        let worst = scenario_indicators(&scene).unwrap();
        // Last step: centers 12 m apart, 4.5 m footprints → 7.5 m gap
        // closing at 10 m/s.
        assert_abs_diff_eq!(worst.ttc.finite().unwrap(), 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(worst.thw.finite().unwrap(), 0.75, epsilon = 1e-9);
        assert!(worst.tlc.is_unbounded());
        assert_abs_diff_eq!(worst.min_distance, 7.5, epsilon = 1e-9);
        assert_abs_diff_eq!(worst.lateral_gap, -2.0, epsilon = 1e-9);

        let lonely = Scene::new(
            vec![cv_traj(1, Vec2::zero(), Vec2::zero(), 5)],
            lane_map(),
            1,
            5,
            0,
        )
        .unwrap();
        assert!(matches!(
            scenario_indicators(&lonely),
            Err(MetricsError::TooFewAgents)
        ));
    }

    #[test]
    fn step_series_folds_to_scenario_worst() {
        let ego = cv_traj(1, Vec2::zero(), Vec2::new(10.0, 0.0), 5);
        let lead = cv_traj(2, Vec2::new(20.0, 0.0), Vec2::zero(), 5);
        let scene = Scene::new(vec![ego, lead], lane_map(), 1, 5, 0).unwrap();
        let series = step_worst_indicators(&scene).unwrap();
        assert_eq!(series.len(), 5);
        // The pair closes monotonically, so TTC shrinks step over step.
        for pair in series.windows(2) {
            assert!(pair[1].ttc.finite().unwrap() < pair[0].ttc.finite().unwrap());
        }
        let folded = worst_case_indicators(&series).unwrap();
        let direct = scenario_indicators(&scene).unwrap();
        assert_eq!(folded.min_distance, direct.min_distance);
        assert_eq!(folded.ttc.finite(), direct.ttc.finite());
    }

    #[test]
    fn histogram_counts_and_fractions() {
        let h = RiskHistogram::from_levels([
            RiskLevel::Low,
            RiskLevel::Low,
            RiskLevel::High,
            RiskLevel::LongTail,
        ]);
        assert_eq!(h.low, 2);
        assert_eq!(h.high, 1);
        assert_eq!(h.long_tail, 1);
        assert_eq!(h.intermediate, 0);
        assert_eq!(h.total(), 4);
        assert_eq!(h.fraction(RiskLevel::Low), 0.5);
        assert_eq!(RiskHistogram::default().fraction(RiskLevel::High), 0.0);
    }

    // ---- realism ----

    fn straight_sample(z: Vec<f64>, speed: f64, steps: usize) -> LatentSample<f64> {
        let dt = 0.2;
        LatentSample {
            z,
            positions: (0..steps)
                .map(|k| Vec2::new(speed * k as f64 * dt, 0.0))
                .collect(),
            dt,
        }
    }

    #[test]
    fn untouched_latents_score_full_proximity() {
        let prior = LatentDistribution::standard(3);
        let set = vec![
            straight_sample(vec![0.3, -0.2, 1.1], 8.0, 12),
            straight_sample(vec![-0.7, 0.4, 0.0], 6.0, 12),
        ];
        let score = trajectory_realism(&set, &set, &prior).unwrap();
        assert_eq!(score.latent_proximity, 1.0);
    }

    #[test]
    fn straight_constant_speed_is_perfectly_smooth() {
        let prior = LatentDistribution::standard(2);
        let set = vec![straight_sample(vec![0.1, 0.2], 10.0, 16)];
        let score = trajectory_realism(&set, &set, &prior).unwrap();
        assert_abs_diff_eq!(score.smoothness, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.heading_continuity, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_jerk_set_scores_the_substituted_exponential() {
        // x(t) = j t³/6 has exact third differences, so every pooled sample
        // is j = 10 m/s³ and the smoothness map gives exp(−10²/2).
        let dt = 0.25;
        let jerk = 10.0;
        let sample = LatentSample {
            z: vec![0.0, 0.0],
            positions: (0..12)
                .map(|k| {
                    let t = k as f64 * dt;
                    Vec2::new(jerk * t * t * t / 6.0, 0.0)
                })
                .collect(),
            dt,
        };
        let prior = LatentDistribution::standard(2);
        let score = trajectory_realism(&[sample.clone()], &[sample], &prior).unwrap();
        assert_relative_eq!(score.smoothness, (-50.0f64).exp(), max_relative = 1e-9);
    }

    #[test]
    fn prior_mean_latents_sit_above_the_logistic_midpoint() {
        let prior = LatentDistribution::standard(4);
        let at_mean = vec![straight_sample(vec![0.0; 4], 5.0, 10); 3];
        let score = trajectory_realism(&at_mean, &at_mean, &prior).unwrap();
        // Mean log-likelihood beats the prior's own expectation by exactly
        // half a nat per dimension at the mode.
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        assert_abs_diff_eq!(score.prior_likelihood, expected, epsilon = 1e-9);

        let far = vec![straight_sample(vec![100.0; 4], 5.0, 10); 3];
        let outlier = trajectory_realism(&far, &far, &prior).unwrap();
        assert!(outlier.prior_likelihood < 1e-3);
    }

    #[test]
    fn unit_spread_latents_score_one() {
        let prior = LatentDistribution::standard(2);
        let set = vec![
            straight_sample(vec![1.0, -1.0], 5.0, 8),
            straight_sample(vec![-1.0, 1.0], 5.0, 8),
        ];
        let score = trajectory_realism(&set, &set, &prior).unwrap();
        assert_eq!(score.latent_spread, 1.0);
    }

    #[test]
    fn realism_total_is_the_component_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let prior = LatentDistribution::standard(4);
        let random_sample = |rng: &mut ChaCha8Rng| {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut p = Vec2::new(0.0, 0.0);
            let positions = (0..10)
                .map(|_| {
                    p = p + Vec2::new(rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..1.0));
                    p
                })
                .collect();
            LatentSample {
                z,
                positions,
                dt: 0.2,
            }
        };
        for _ in 0..20 {
            let gen: Vec<_> = (0..6).map(|_| random_sample(&mut rng)).collect();
            let refr: Vec<_> = (0..6).map(|_| random_sample(&mut rng)).collect();
            let s = trajectory_realism(&gen, &refr, &prior).unwrap();
            for c in [
                s.latent_proximity,
                s.latent_spread,
                s.prior_likelihood,
                s.smoothness,
                s.heading_continuity,
            ] {
                assert!((0.0..=1.0).contains(&c), "component out of range: {c}");
            }
            let mean = (s.latent_proximity
                + s.latent_spread
                + s.prior_likelihood
                + s.smoothness
                + s.heading_continuity)
                / 5.0;
            assert_abs_diff_eq!(s.total, mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn realism_rejects_mismatched_sets() {
        let prior = LatentDistribution::standard(2);
        let a = vec![straight_sample(vec![0.0, 0.0], 5.0, 8)];
        let b = vec![
            straight_sample(vec![0.0, 0.0], 5.0, 8),
            straight_sample(vec![0.1, 0.1], 5.0, 8),
        ];
        assert!(matches!(
            trajectory_realism(&a, &b, &prior),
            Err(MetricsError::IncompatibleSets(_))
        ));
        let wrong_dim = vec![straight_sample(vec![0.0; 3], 5.0, 8)];
        assert!(matches!(
            trajectory_realism(&wrong_dim, &wrong_dim, &prior),
            Err(MetricsError::IncompatibleSets(_))
        ));
        assert!(matches!(
            trajectory_realism::<f64>(&[], &[], &prior),
            Err(MetricsError::EmptySet)
        ));
    }

    // ---- interaction ----

    fn static_traj(id: i64, at: Vec2<f64>, steps: usize) -> Trajectory<f64> {
        cv_traj_at(id, at, Vec2::zero(), steps)
    }

    fn cv_traj_at(id: i64, start: Vec2<f64>, vel: Vec2<f64>, steps: usize) -> Trajectory<f64> {
        let dt = 0.2;
        let states = (0..steps)
            .map(|k| {
                AgentState::new(id, start + vel * (k as f64 * dt), vel, 0.0, 4.5, 2.0).unwrap()
            })
            .collect();
        Trajectory::from_states_unchecked(id, 5.0, 0.0, states)
    }

    #[test]
    fn well_separated_static_scene_scores_clean() {
        let scene = Scene::new(
            vec![
                static_traj(1, Vec2::new(-10.0, 0.0), 3),
                static_traj(2, Vec2::new(10.0, 0.0), 3),
            ],
            open_map(),
            1,
            3,
            0,
        )
        .unwrap();
        let score = interaction_consistency(&[scene], &InteractionConfig::default()).unwrap();
        assert_eq!(score.distance_plausibility, 1.0);
        assert_eq!(score.velocity_continuity, 1.0);
        assert_eq!(score.maneuver_feasibility, 1.0);
        assert_eq!(score.spatial_coherence, 1.0);
        assert_eq!(score.collision_balance, 1.0);
        assert_eq!(score.total, 1.0);
    }

    #[test]
    fn overlapping_footprints_zero_the_distance_term() {
        let scene = Scene::new(
            vec![
                static_traj(1, Vec2::zero(), 3),
                static_traj(2, Vec2::new(0.5, 0.0), 3),
            ],
            open_map(),
            1,
            3,
            0,
        )
        .unwrap();
        let score = interaction_consistency(&[scene], &InteractionConfig::default()).unwrap();
        assert_eq!(score.distance_plausibility, 0.0);
        // Every scenario collides while the target rate is zero.
        assert_eq!(score.collision_balance, 0.0);
    }

    #[test]
    fn mixed_batch_matches_hand_computed_means() {
        // Scene A: two parked cars 20 m apart — fully clean.
        let clean = Scene::new(
            vec![
                static_traj(1, Vec2::new(-10.0, 0.0), 3),
                static_traj(2, Vec2::new(10.0, 0.0), 3),
            ],
            open_map(),
            1,
            3,
            0,
        )
        .unwrap();
        // Scene B: coincident footprints at every step.
        let colliding = Scene::new(
            vec![static_traj(1, Vec2::zero(), 3), static_traj(2, Vec2::zero(), 3)],
            open_map(),
            1,
            3,
            0,
        )
        .unwrap();
        // Scene C: one velocity jump of 50 m/s (breaks continuity and the
        // acceleration envelope once) and one step parked off the raster.
        let mut jumpy_states = vec![
            AgentState::new(1, Vec2::new(-10.0, 0.0), Vec2::zero(), 0.0, 4.5, 2.0).unwrap(),
            AgentState::new(1, Vec2::new(-60.0, 0.0), Vec2::new(50.0, 0.0), 0.0, 4.5, 2.0)
                .unwrap(),
            AgentState::new(1, Vec2::new(-10.0, 0.0), Vec2::new(50.0, 0.0), 0.0, 4.5, 2.0)
                .unwrap(),
        ];
        let jumpy = Trajectory::from_states_unchecked(1, 5.0, 0.0, std::mem::take(&mut jumpy_states));
        let wild = Scene::new(
            vec![jumpy, static_traj(2, Vec2::new(10.0, 0.0), 3)],
            open_map(),
            1,
            3,
            0,
        )
        .unwrap();

        let score = interaction_consistency(
            &[clean, colliding, wild],
            &InteractionConfig::default(),
        )
        .unwrap();
        // Pairs: 9 total, scene B loses all 3.          → 6/9
        // Velocity windows: 12 total, one 50 m/s jump.  → 11/12
        // Maneuvers: same single violation.             → 11/12
        // Positions: 18 total, one off-raster step.     → 17/18
        // Collisions: 1 of 3 scenes against target 0.   → 2/3
        assert_abs_diff_eq!(score.distance_plausibility, 6.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.velocity_continuity, 11.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.maneuver_feasibility, 11.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.spatial_coherence, 17.0 / 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.collision_balance, 2.0 / 3.0, epsilon = 1e-12);
        let mean = (score.distance_plausibility
            + score.velocity_continuity
            + score.maneuver_feasibility
            + score.spatial_coherence
            + score.collision_balance)
            / 5.0;
        assert_abs_diff_eq!(score.total, mean, epsilon = 1e-12);
    }

    #[test]
    fn interaction_needs_two_agents_and_a_batch() {
        let lonely = Scene::new(vec![static_traj(1, Vec2::zero(), 3)], open_map(), 1, 3, 0)
            .unwrap();
        assert!(matches!(
            interaction_consistency(&[lonely], &InteractionConfig::default()),
            Err(MetricsError::TooFewAgents)
        ));
        assert!(matches!(
            interaction_consistency::<f64>(&[], &InteractionConfig::default()),
            Err(MetricsError::EmptySet)
        ));
    }

    // ---- sim-to-real ----

    fn wander(rng: &mut ChaCha8Rng, id: i64, steps: usize) -> Trajectory<f64> {
        let dt = 0.2;
        let mut pos = Vec2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-5.0..5.0));
        let mut vel = Vec2::new(rng.gen_range(2.0..15.0), rng.gen_range(-1.0..1.0));
        let states = (0..steps)
            .map(|_| {
                let s = AgentState::new(id, pos, vel, vel.angle(), 4.5, 2.0).unwrap();
                vel = vel + Vec2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3));
                pos = pos + vel * dt;
                s
            })
            .collect();
        Trajectory::from_states_unchecked(id, 5.0, 0.0, states)
    }

    #[test]
    fn identical_sets_score_unit_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set: Vec<_> = (0..32).map(|k| wander(&mut rng, k, 20)).collect();
        let score = sim_to_real(&set, &set).unwrap();
        assert_abs_diff_eq!(score.distribution_alignment, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.motion_alignment, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.spectrum_alignment, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.behavior_alignment, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(score.total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn disjoint_kinematics_zero_the_distribution_term() {
        // Constant 5 m/s cruising against a 20 m/s fleet accelerating at
        // 3 m/s²: both the speed and acceleration histograms share no bin.
        let slow: Vec<_> = (0..40)
            .map(|k| cv_traj_at(k, Vec2::new(k as f64, 0.0), Vec2::new(5.0, 0.0), 15))
            .collect();
        let dt = 0.2;
        let fast: Vec<_> = (0..40)
            .map(|k| {
                let mut pos = Vec2::new(k as f64, 0.0);
                let states = (0..15)
                    .map(|t| {
                        let v = Vec2::new(20.0 + 3.0 * t as f64 * dt, 0.0);
                        let s = AgentState::new(k, pos, v, 0.0, 4.5, 2.0).unwrap();
                        pos = pos + v * dt;
                        s
                    })
                    .collect();
                Trajectory::from_states_unchecked(k, 5.0, 0.0, states)
            })
            .collect();
        let score = sim_to_real(&slow, &fast).unwrap();
        assert_abs_diff_eq!(score.distribution_alignment, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn injected_speed_bias_drops_motion_alignment_analytically() {
        // +2 m/s on a constant 10 m/s reference moves exactly one of the
        // four statistics by 2/10, so the component drops by 0.05.
        let reference: Vec<_> = (0..40)
            .map(|k| cv_traj_at(k, Vec2::new(0.0, k as f64), Vec2::new(10.0, 0.0), 12))
            .collect();
        let biased: Vec<_> = (0..40)
            .map(|k| cv_traj_at(k, Vec2::new(0.0, k as f64), Vec2::new(12.0, 0.0), 12))
            .collect();
        let score = sim_to_real(&biased, &reference).unwrap();
        assert_abs_diff_eq!(score.motion_alignment, 0.95, epsilon = 1e-12);
        // Flat speed signals on both sides: spectra agree by the flatness
        // rule, and neither side triggers behavior events.
        assert_eq!(score.spectrum_alignment, 1.0);
        assert_eq!(score.behavior_alignment, 1.0);
    }

    #[test]
    fn behavior_events_register_in_the_semantic_term() {
        // Reference cruises; generated set brakes hard to a standstill and
        // drifts a lane's worth sideways in half the trajectories.
        let reference: Vec<_> = (0..10)
            .map(|k| cv_traj_at(k, Vec2::new(0.0, k as f64), Vec2::new(10.0, 0.0), 12))
            .collect();
        let generated: Vec<_> = (0..10)
            .map(|k| {
                if k % 2 == 0 {
                    let dt = 0.2;
                    let mut pos = Vec2::new(0.0, k as f64);
                    let states = (0..12)
                        .map(|t| {
                            // 10 m/s down to 0 within four steps (−12.5 m/s²),
                            // drifting laterally while still moving.
                            let speed = (10.0 - 2.5 * t as f64).max(0.0);
                            let v = Vec2::new(speed * 0.6, speed * 0.8);
                            let s = AgentState::new(k, pos, v, 0.0, 4.5, 2.0).unwrap();
                            pos = pos + v * dt;
                            s
                        })
                        .collect();
                    Trajectory::from_states_unchecked(k, 5.0, 0.0, states)
                } else {
                    cv_traj_at(k, Vec2::new(0.0, k as f64), Vec2::new(10.0, 0.0), 12)
                }
            })
            .collect();
        let score = sim_to_real(&generated, &reference).unwrap();
        // Half the generated set lane-changes, hard-brakes, and stands
        // still; the reference does none → TV = (0.5+0.5+0.5)/3.
        assert_abs_diff_eq!(score.behavior_alignment, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn horizon_and_rate_mismatches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..4).map(|k| wander(&mut rng, k, 12)).collect();
        let b: Vec<_> = (0..4).map(|k| wander(&mut rng, k, 10)).collect();
        assert!(matches!(
            sim_to_real(&a, &b),
            Err(MetricsError::IncompatibleSets("trajectory horizons differ"))
        ));
        let mut c = a.clone();
        c[0].sample_rate = 10.0;
        assert!(matches!(
            sim_to_real(&a, &c),
            Err(MetricsError::IncompatibleSets("sampling rates differ"))
        ));
        assert!(matches!(
            sim_to_real::<f64>(&a, &[]),
            Err(MetricsError::EmptySet)
        ));
    }

    #[test]
    fn fuzzed_sets_stay_within_unit_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let steps = rng.gen_range(4..24);
            let gen: Vec<_> = (0..rng.gen_range(2..8))
                .map(|k| wander(&mut rng, k, steps))
                .collect();
            let refr: Vec<_> = (0..rng.gen_range(2..8))
                .map(|k| wander(&mut rng, k, steps))
                .collect();
            let s = sim_to_real(&gen, &refr).unwrap();
            for c in [
                s.distribution_alignment,
                s.motion_alignment,
                s.spectrum_alignment,
                s.behavior_alignment,
            ] {
                assert!((0.0..=1.0).contains(&c), "component out of range: {c}");
            }
            let mean = (s.distribution_alignment
                + s.motion_alignment
                + s.spectrum_alignment
                + s.behavior_alignment)
                / 4.0;
            assert_abs_diff_eq!(s.total, mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = MetricsReport {
            long_tail_coverage: 0.25,
            realism: Some(RealismScore {
                latent_proximity: 0.9,
                latent_spread: 0.8,
                prior_likelihood: 0.55,
                smoothness: 0.99,
                heading_continuity: 0.97,
                total: (0.9 + 0.8 + 0.55 + 0.99 + 0.97) / 5.0,
            }),
            interaction: InteractionScore {
                distance_plausibility: 1.0,
                velocity_continuity: 1.0,
                maneuver_feasibility: 0.5,
                spatial_coherence: 1.0,
                collision_balance: 0.75,
                total: (1.0 + 1.0 + 0.5 + 1.0 + 0.75) / 5.0,
            },
            sim_to_real: SimToRealScore {
                distribution_alignment: 0.7,
                motion_alignment: 0.9,
                spectrum_alignment: 0.95,
                behavior_alignment: 1.0,
                total: (0.7 + 0.9 + 0.95 + 1.0) / 4.0,
            },
            risk_histogram: RiskHistogram {
                low: 10,
                intermediate: 4,
                high: 5,
                long_tail: 1,
            },
        };
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: MetricsReport<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        // The strict/standard cut and the level names are part of the
        // stable schema the CLI prints.
        assert!(json.contains("long_tail_coverage"));
        assert_eq!(serde_json::to_string(&RiskLevel::LongTail).unwrap(), "\"long_tail\"");
        assert_eq!(
            serde_json::to_string(&LongTailCut::Strict).unwrap(),
            "\"strict\""
        );
    }
}
