//! Interaction graph construction and pairwise kinematics.

use super::{Scene, SceneError, CONFLICT_LOOKAHEAD_S, NEIGHBOR_RADIUS_M};
use crate::geom::{segments_intersect, wrap_angle, Vec2};
use crate::scalar::Scalar;
use crate::scene::AgentState;
use serde::{Deserialize, Serialize};

/// Pairwise kinematic summary between two agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeState<F> {
    /// Center distance minus the oriented-box allowance of both footprints
    /// along the line of sight; ≤ 0 when bumper-to-bumper or overlapping.
    pub gap: F,
    /// Rate at which the gap shrinks; negative when receding.
    pub closing_speed: F,
    /// |Δposition| projected on the first agent's lateral axis.
    pub lateral_offset: F,
    /// World-frame direction of (b − a).
    pub bearing: F,
}

/// Line-of-sight gap, closing speed, lateral offset, and bearing from `a`
/// to `b`. Total on all inputs; coincident centers fall back to `a`'s
/// heading as the sight line.
pub fn relative_kinematics<F: Scalar>(a: &AgentState<F>, b: &AgentState<F>) -> RelativeState<F> {
    let delta = b.position - a.position;
    let dist = delta.norm();
    let u = if dist > F::zero() {
        delta / dist
    } else {
        Vec2::new(a.heading.cos(), a.heading.sin())
    };
    let gap = dist - a.footprint().support_radius(u) - b.footprint().support_radius(u);
    let closing_speed = -(b.velocity - a.velocity).dot(u);
    let lateral_axis = Vec2::new(a.heading.cos(), a.heading.sin()).perp();
    RelativeState {
        gap,
        closing_speed,
        lateral_offset: delta.dot(lateral_axis).abs(),
        bearing: delta.y.atan2(delta.x),
    }
}

/// Directed edge of a [`SceneGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge<F> {
    pub from: usize,
    pub to: usize,
    /// (center distance m, closing speed m/s, world bearing rad, conflict flag).
    pub features: [F; 4],
}

/// Directed interaction graph over the agents of one scene at one step.
///
/// Node order matches the agent order of the source [`Scene`]. Node features
/// are the flattened history window ending at the build step, expressed in
/// the ego frame at that step: per step (relative position ×2, local
/// velocity ×2, relative heading), then the footprint (length, width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph<F> {
    pub agent_ids: Vec<i64>,
    pub nodes: Vec<Vec<F>>,
    pub edges: Vec<GraphEdge<F>>,
    pub neighbor_radius: F,
    pub ego_index: usize,
    /// Length of every node feature vector.
    pub node_dim: usize,
}

/// Per-step feature count in a node vector, before the footprint pair.
pub const NODE_FEATURES_PER_STEP: usize = 5;

/// Build the interaction graph at history step `t`.
///
/// An edge (i→j) exists iff the center distance at `t` is at most the
/// neighbor radius; there are no self-edges. `t` must lie inside the history
/// window — later steps are unobserved at graph time.
pub fn build_scene_graph<F: Scalar>(
    scene: &Scene<F>,
    t: usize,
) -> Result<SceneGraph<F>, SceneError> {
    if t >= scene.history_horizon {
        return Err(SceneError::MissingObservation {
            agent_id: scene.ego_id,
            step: t,
        });
    }
    for traj in &scene.agents {
        if t >= traj.len() {
            return Err(SceneError::MissingObservation {
                agent_id: traj.agent_id,
                step: t,
            });
        }
    }
    let h = scene.history_horizon;
    let anchor = *scene.ego().state(t)?;
    let cos_h = anchor.heading.cos();
    let sin_h = anchor.heading.sin();
    let to_ego = |v: Vec2<F>| Vec2::new(v.x * cos_h + v.y * sin_h, -v.x * sin_h + v.y * cos_h);

    let mut nodes = Vec::with_capacity(scene.num_agents());
    let mut agent_ids = Vec::with_capacity(scene.num_agents());
    for traj in &scene.agents {
        let mut feats = Vec::with_capacity(NODE_FEATURES_PER_STEP * h + 2);
        for k in 0..h {
            // window (t+1-h ..= t), front-padded with the first sample
            let idx = (t + 1 + k).saturating_sub(h);
            let s = traj.state(idx.min(t))?;
            let rel = to_ego(s.position - anchor.position);
            let vel = to_ego(s.velocity);
            feats.push(rel.x);
            feats.push(rel.y);
            feats.push(vel.x);
            feats.push(vel.y);
            feats.push(wrap_angle(s.heading - anchor.heading));
        }
        let last = traj.state(t)?;
        feats.push(last.length);
        feats.push(last.width);
        nodes.push(feats);
        agent_ids.push(traj.agent_id);
    }

    let radius = F::cast(NEIGHBOR_RADIUS_M);
    let lookahead = F::cast(CONFLICT_LOOKAHEAD_S);
    let mut edges = Vec::new();
    for i in 0..scene.num_agents() {
        let si = scene.agents[i].state(t)?;
        for j in 0..scene.num_agents() {
            if i == j {
                continue;
            }
            let sj = scene.agents[j].state(t)?;
            let dist = si.position.distance(sj.position);
            if dist > radius {
                continue;
            }
            let rel = relative_kinematics(si, sj);
            let conflict = segments_intersect(
                si.position,
                si.position + si.velocity * lookahead,
                sj.position,
                sj.position + sj.velocity * lookahead,
            );
            edges.push(GraphEdge {
                from: i,
                to: j,
                features: [
                    dist,
                    rel.closing_speed,
                    rel.bearing,
                    if conflict { F::one() } else { F::zero() },
                ],
            });
        }
    }

    Ok(SceneGraph {
        agent_ids,
        nodes,
        edges,
        neighbor_radius: radius,
        ego_index: scene.ego_index(),
        node_dim: NODE_FEATURES_PER_STEP * h + 2,
    })
}
