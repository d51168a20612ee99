//! Conditional variational motion model over multi-agent futures.
//!
//! A shared graph encoder produces per-agent embeddings and a pooled scene
//! embedding; the context vector c concatenates the coarse map summary with
//! that pool. Three heads hang off it:
//!
//! * posterior — (c, future summary) → latent Gaussian,
//! * prior — c → latent Gaussian,
//! * decoder — (z, c, agent embedding) → per-agent future displacements.
//!
//! The posterior sees a summary of the ground-truth future during training
//! (mean over agents of the ego-frame displacement sequence); at inference
//! that summary is absent and sampling goes through the prior. Decoded
//! displacements accumulate from each agent's last observed position, so a
//! zero decoder freezes every agent in place.

use crate::diff::{DiffError, NodeId, Tape};
use crate::geom::Vec2;
use crate::graph_encoder::{context_dim, context_vector, GraphEncoderModel, GraphEncoderNodes};
use crate::nn::{clip_gradient_norm, Activation, Mlp, MlpNodes, NnError};
use crate::scalar::Scalar;
use crate::scene::{
    build_scene_graph, AgentState, Scene, SceneError, SceneGraph, SceneMap, Trajectory,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Clamp bounds for predicted log-variances.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 5.0;

/// Meters of displacement per unit of raw decoder output.
pub const DISPLACEMENT_SCALE_M: f64 = 5.0;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("corpus has {got} scenes, need at least {need}")]
    CorpusTooSmall { got: usize, need: usize },
    #[error("scene lacks the future window required here")]
    MissingFuture,
    #[error("latent of dim {got}, model expects {expected}")]
    LatentDim { got: usize, expected: usize },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution<F> {
    pub mean: Vec<F>,
    pub log_variance: Vec<F>,
}

impl<F: Scalar> LatentDistribution<F> {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![F::zero(); dim],
            log_variance: vec![F::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized draw z = μ + σ ⊙ ε.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<F> {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .map(|(&m, &lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (lv * F::cast(0.5)).exp() * F::cast(eps)
            })
            .collect()
    }

    /// Closed-form KL(self ‖ other) for diagonal Gaussians.
    pub fn kl(&self, other: &Self) -> F {
        let half = F::cast(0.5);
        let mut acc = F::zero();
        for d in 0..self.dim() {
            let (m1, lv1) = (self.mean[d], self.log_variance[d]);
            let (m0, lv0) = (other.mean[d], other.log_variance[d]);
            let dm = m1 - m0;
            acc += lv0 - lv1 + (lv1.exp() + dm * dm) * (-lv0).exp() - F::one();
        }
        acc * half
    }
}

/// Draw a latent from a distribution (reparameterized, deterministic given
/// the RNG state).
pub fn sample_latent<F: Scalar>(dist: &LatentDistribution<F>, rng: &mut impl Rng) -> Vec<F> {
    dist.sample(rng)
}

/// Sum over agent pairs and timesteps of max(0, r_i + r_j − dist)², with r
/// the circumscribing disc radius of each footprint.
pub fn collision_penalty<F: Scalar>(positions: &[Vec<Vec2<F>>], radii: &[F]) -> F {
    let mut acc = F::zero();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let rsum = radii[i] + radii[j];
            for (a, b) in positions[i].iter().zip(&positions[j]) {
                let pen = (rsum - a.distance(*b)).max(F::zero());
                acc += pen * pen;
            }
        }
    }
    acc
}

/// Structural dimensions of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub history_horizon: usize,
    pub future_horizon: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub encoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_horizon: 10,
            future_horizon: 30,
            hidden_dim: 64,
            latent_dim: 16,
            encoder_depth: 2,
        }
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub w_kl: f64,
    pub w_coll: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling per update.
    pub clip_norm: f64,
    /// Fraction of epochs over which w_kl ramps linearly from 0.
    pub kl_warmup_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            w_kl: 0.1,
            w_coll: 1.0,
            learning_rate: 0.02,
            epochs: 60,
            batch_size: 32,
            seed: 0,
            clip_norm: 5.0,
            kl_warmup_fraction: 0.2,
        }
    }
}

/// Loss components of one evaluation or one epoch, already weighted into
/// `total = recon + w_kl·kl + w_coll·coll`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F> {
    pub total: F,
    pub recon: F,
    pub kl: F,
    pub coll: F,
}

/// Everything the decoder needs besides z: the context vector, per-agent
/// embeddings, anchor states, and the map (for downstream loss terms).
#[derive(Debug, Clone)]
pub struct DecodingContext<F> {
    pub c: Vec<F>,
    pub agent_embeddings: Vec<Vec<F>>,
    pub last_states: Vec<AgentState<F>>,
    /// Ego state at the last history step; decode happens in its frame.
    pub anchor: AgentState<F>,
    pub map: Arc<SceneMap<F>>,
    pub agent_ids: Vec<i64>,
    pub ego_index: usize,
    pub dt: F,
}

/// The CVAE: shared graph encoder plus posterior / prior / decoder heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPriorModel<F> {
    pub graph_encoder: GraphEncoderModel<F>,
    pub posterior_head: Mlp<F>,
    pub prior_head: Mlp<F>,
    pub decoder: Mlp<F>,
    pub latent_dim: usize,
    pub history_horizon: usize,
    pub future_horizon: usize,
    pub hidden_dim: usize,
}

impl<F: Scalar> MotionPriorModel<F> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let node_dim = crate::scene::NODE_FEATURES_PER_STEP * cfg.history_horizon + 2;
        let c_dim = context_dim(cfg.hidden_dim);
        let future_dim = 2 * cfg.future_horizon;
        let h = cfg.hidden_dim;
        Self {
            graph_encoder: GraphEncoderModel::init(node_dim, h, cfg.encoder_depth, rng),
            posterior_head: Mlp::init(
                &[c_dim + future_dim, h, 2 * cfg.latent_dim],
                Activation::Tanh,
                rng,
            ),
            prior_head: Mlp::init(&[c_dim, h, 2 * cfg.latent_dim], Activation::Tanh, rng),
            decoder: Mlp::init(&[cfg.latent_dim + c_dim + h, h, future_dim], Activation::Tanh, rng),
            latent_dim: cfg.latent_dim,
            history_horizon: cfg.history_horizon,
            future_horizon: cfg.future_horizon,
            hidden_dim: cfg.hidden_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.graph_encoder.num_params()
            + self.posterior_head.num_params()
            + self.prior_head.num_params()
            + self.decoder.num_params()
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(F)) {
        self.graph_encoder.for_each_param(f);
        self.posterior_head.for_each_param(f);
        self.prior_head.for_each_param(f);
        self.decoder.for_each_param(f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut F)) {
        self.graph_encoder.for_each_param_mut(f);
        self.posterior_head.for_each_param_mut(f);
        self.prior_head.for_each_param_mut(f);
        self.decoder.for_each_param_mut(f);
    }

    fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> MotionPriorNodes {
        MotionPriorNodes {
            encoder: self.graph_encoder.bind(tape, trainable),
            posterior: self.posterior_head.bind(tape, trainable),
            prior: self.prior_head.bind(tape, trainable),
            decoder: self.decoder.bind(tape, trainable),
        }
    }

    /// Encode the scene's static/relational context into the decoder-side
    /// conditioning bundle.
    pub fn conditioning(&self, scene: &Scene<F>) -> Result<DecodingContext<F>, PriorError> {
        let t = scene.last_history_step();
        let graph = build_scene_graph(scene, t)?;
        let (h, pooled) = self.graph_encoder.encode_values(&graph)?;
        let c = context_vector(&scene.map.grid, &pooled);
        let last_states: Vec<AgentState<F>> = scene
            .agents
            .iter()
            .map(|tr| tr.state(t).copied())
            .collect::<Result<_, _>>()?;
        let anchor = last_states[scene.ego_index()];
        Ok(DecodingContext {
            c,
            agent_embeddings: h,
            anchor,
            agent_ids: graph.agent_ids,
            ego_index: scene.ego_index(),
            map: scene.map.clone(),
            dt: scene.dt(),
            last_states,
        })
    }

    /// Mean over agents of the flattened ego-frame future displacement
    /// sequence, scaled to O(1); zeros when the scene has no future.
    pub fn future_summary(&self, scene: &Scene<F>) -> Vec<F> {
        let dim = 2 * self.future_horizon;
        let mut acc = vec![F::zero(); dim];
        if !scene.has_future() {
            return acc;
        }
        let t = scene.last_history_step();
        let anchor = *scene.ego().state(t).expect("validated");
        let (cos_h, sin_h) = (anchor.heading.cos(), anchor.heading.sin());
        let inv_scale = F::cast(1.0 / DISPLACEMENT_SCALE_M);
        let inv_n = F::from_usize(scene.num_agents()).unwrap().recip();
        for (idx, tr) in scene.agents.iter().enumerate() {
            let mut prev = tr.state(t).expect("validated").position;
            let future = scene.future_positions(idx).expect("has_future checked");
            for (k, p) in future.iter().enumerate() {
                let d = *p - prev;
                // rotate into the ego frame
                let dx = d.x * cos_h + d.y * sin_h;
                let dy = -d.x * sin_h + d.y * cos_h;
                acc[2 * k] += dx * inv_scale * inv_n;
                acc[2 * k + 1] += dy * inv_scale * inv_n;
                prev = *p;
            }
        }
        acc
    }

    fn split_head(&self, out: Vec<F>) -> LatentDistribution<F> {
        let (lo, hi) = (F::cast(LOG_VAR_MIN), F::cast(LOG_VAR_MAX));
        LatentDistribution {
            mean: out[..self.latent_dim].to_vec(),
            log_variance: out[self.latent_dim..]
                .iter()
                .map(|&v| v.max(lo).min(hi))
                .collect(),
        }
    }

    /// Posterior over z given the scene (incl. its future, when present) and
    /// the context vector.
    pub fn encode(&self, scene: &Scene<F>, c: &[F]) -> Result<LatentDistribution<F>, PriorError> {
        let mut input = c.to_vec();
        input.extend(self.future_summary(scene));
        Ok(self.split_head(self.posterior_head.forward(&input)?))
    }

    /// Conditional prior over z given the context vector alone.
    pub fn prior(&self, c: &[F]) -> Result<LatentDistribution<F>, PriorError> {
        Ok(self.split_head(self.prior_head.forward(c)?))
    }

    /// Decode world-frame future positions for every agent.
    pub fn decode(
        &self,
        z: &[F],
        ctx: &DecodingContext<F>,
    ) -> Result<Vec<Vec<Vec2<F>>>, PriorError> {
        if z.len() != self.latent_dim {
            return Err(PriorError::LatentDim {
                got: z.len(),
                expected: self.latent_dim,
            });
        }
        let (cos_h, sin_h) = (ctx.anchor.heading.cos(), ctx.anchor.heading.sin());
        let scale = F::cast(DISPLACEMENT_SCALE_M);
        let mut out = Vec::with_capacity(ctx.agent_embeddings.len());
        for (i, h_i) in ctx.agent_embeddings.iter().enumerate() {
            let mut input = Vec::with_capacity(z.len() + ctx.c.len() + h_i.len());
            input.extend_from_slice(z);
            input.extend_from_slice(&ctx.c);
            input.extend_from_slice(h_i);
            let raw = self.decoder.forward(&input)?;
            let p0 = ctx.last_states[i].position;
            let (mut cx, mut cy) = (F::zero(), F::zero());
            let mut pts = Vec::with_capacity(self.future_horizon);
            for k in 0..self.future_horizon {
                cx += raw[2 * k] * scale;
                cy += raw[2 * k + 1] * scale;
                pts.push(Vec2::new(
                    p0.x + cos_h * cx - sin_h * cy,
                    p0.y + sin_h * cx + cos_h * cy,
                ));
            }
            out.push(pts);
        }
        Ok(out)
    }

    /// Tape-path twin of [`decode`](Self::decode): network weights enter as
    /// constants so gradients flow to the latent inputs only. Node pairs are
    /// world-frame (x, y) per agent per step, built with the same op order
    /// as the value path.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<F>,
        z: &[NodeId],
        ctx: &DecodingContext<F>,
    ) -> Result<Vec<Vec<(NodeId, NodeId)>>, PriorError> {
        if z.len() != self.latent_dim {
            return Err(PriorError::LatentDim {
                got: z.len(),
                expected: self.latent_dim,
            });
        }
        let dec = self.decoder.bind(tape, false);
        let c_nodes: Vec<NodeId> = ctx.c.iter().map(|&v| tape.constant(v)).collect();
        let (cos_h, sin_h) = (ctx.anchor.heading.cos(), ctx.anchor.heading.sin());
        let scale = F::cast(DISPLACEMENT_SCALE_M);
        let mut out = Vec::with_capacity(ctx.agent_embeddings.len());
        for (i, h_i) in ctx.agent_embeddings.iter().enumerate() {
            let mut input = Vec::with_capacity(z.len() + c_nodes.len() + h_i.len());
            input.extend_from_slice(z);
            input.extend_from_slice(&c_nodes);
            for &v in h_i {
                input.push(tape.constant(v));
            }
            let raw = dec.forward(tape, &input)?;
            let p0 = ctx.last_states[i].position;
            let mut cx = tape.constant(F::zero());
            let mut cy = tape.constant(F::zero());
            let mut pts = Vec::with_capacity(self.future_horizon);
            for k in 0..self.future_horizon {
                let dx = tape.scale(raw[2 * k], scale);
                let dy = tape.scale(raw[2 * k + 1], scale);
                cx = tape.add(cx, dx);
                cy = tape.add(cy, dy);
                let cxc = tape.scale(cx, cos_h);
                let cys = tape.scale(cy, sin_h);
                let wx0 = tape.sub(cxc, cys);
                let wx = tape.shift(wx0, p0.x);
                let cxs = tape.scale(cx, sin_h);
                let cyc = tape.scale(cy, cos_h);
                let wy0 = tape.add(cxs, cyc);
                let wy = tape.shift(wy0, p0.y);
                pts.push((wx, wy));
            }
            out.push(pts);
        }
        Ok(out)
    }

    /// Rebuild a full scene whose trajectories append the decoded future to
    /// the observed history. Velocities in the future are forward
    /// differences of the decoded positions; headings follow the motion
    /// direction (previous heading kept below walking speed).
    pub fn materialize_scene(
        &self,
        scene: &Scene<F>,
        decoded: &[Vec<Vec2<F>>],
    ) -> Result<Scene<F>, PriorError> {
        let t = scene.last_history_step();
        let dt = scene.dt();
        let mut agents = Vec::with_capacity(scene.num_agents());
        for (idx, tr) in scene.agents.iter().enumerate() {
            let mut states: Vec<AgentState<F>> = tr.states[..=t].to_vec();
            let base = *tr.state(t)?;
            let pts = &decoded[idx];
            for k in 0..pts.len() {
                let vel = if k + 1 < pts.len() {
                    (pts[k + 1] - pts[k]) / dt
                } else if k > 0 {
                    (pts[k] - pts[k - 1]) / dt
                } else {
                    base.velocity
                };
                let prev_heading = states.last().unwrap().heading;
                let heading = if vel.norm() > F::cast(0.5) {
                    vel.angle()
                } else {
                    prev_heading
                };
                states.push(AgentState {
                    agent_id: tr.agent_id,
                    position: pts[k],
                    velocity: vel,
                    heading,
                    length: base.length,
                    width: base.width,
                });
            }
            agents.push(Trajectory::from_states_unchecked(
                tr.agent_id,
                tr.sample_rate,
                tr.start_time,
                states,
            ));
        }
        Ok(Scene::new(
            agents,
            scene.map.clone(),
            scene.ego_id,
            scene.history_horizon,
            self.future_horizon,
        )?)
    }

    /// Value-space CVAE loss over a batch; stochastic through the posterior
    /// sample, deterministic given the RNG.
    pub fn cvae_loss(
        &self,
        scenes: &[Scene<F>],
        w_kl: F,
        w_coll: F,
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown<F>, PriorError> {
        if scenes.is_empty() {
            return Err(PriorError::CorpusTooSmall { got: 0, need: 1 });
        }
        let inv = F::from_usize(scenes.len()).unwrap().recip();
        let (mut recon, mut kl, mut coll) = (F::zero(), F::zero(), F::zero());
        for scene in scenes {
            if !scene.has_future() {
                return Err(PriorError::MissingFuture);
            }
            let ctx = self.conditioning(scene)?;
            let post = self.encode(scene, &ctx.c)?;
            let pri = self.prior(&ctx.c)?;
            let z = post.sample(rng);
            let decoded = self.decode(&z, &ctx)?;
            let mut se = F::zero();
            let mut count = 0usize;
            for (idx, pts) in decoded.iter().enumerate() {
                let gt = scene.future_positions(idx).ok_or(PriorError::MissingFuture)?;
                for (p, g) in pts.iter().zip(&gt) {
                    let d = *p - *g;
                    se += d.dot(d);
                    count += 1;
                }
            }
            recon += se / F::from_usize(count).unwrap() * inv;
            kl += post.kl(&pri) * inv;
            let radii: Vec<F> = ctx.last_states.iter().map(|s| s.footprint().disc_radius()).collect();
            coll += collision_penalty(&decoded, &radii) * inv;
        }
        Ok(LossBreakdown {
            total: recon + w_kl * kl + w_coll * coll,
            recon,
            kl,
            coll,
        })
    }

    /// Tape-space per-scene loss; the workhorse of `train`.
    fn loss_on_tape(
        &self,
        tape: &mut Tape<F>,
        item: &TrainItem<F>,
        w_kl: F,
        w_coll: F,
        rng: &mut impl Rng,
    ) -> Result<(LossIds, MotionPriorNodes), PriorError> {
        let bound = self.bind(tape, true);
        let (h, pooled) = bound.encoder.encode(tape, &item.graph)?;
        let mut c: Vec<NodeId> = item
            .map_summary
            .iter()
            .map(|&v| tape.constant(v))
            .collect();
        c.extend(pooled);

        let mut post_in = c.clone();
        post_in.extend(item.future_summary.iter().map(|&v| tape.constant(v)));
        let post_out = bound.posterior.forward(tape, &post_in)?;
        let prior_out = bound.prior.forward(tape, &c)?;

        let (lo, hi) = (F::cast(LOG_VAR_MIN), F::cast(LOG_VAR_MAX));
        let clamp = |tape: &mut Tape<F>, id: NodeId| {
            let lo_c = tape.constant(lo);
            let hi_c = tape.constant(hi);
            let m = tape.max(id, lo_c);
            tape.min(m, hi_c)
        };
        let d_z = self.latent_dim;
        let mu: Vec<NodeId> = post_out[..d_z].to_vec();
        let lv: Vec<NodeId> = post_out[d_z..].iter().map(|&id| clamp(tape, id)).collect();
        let mu0: Vec<NodeId> = prior_out[..d_z].to_vec();
        let lv0: Vec<NodeId> = prior_out[d_z..].iter().map(|&id| clamp(tape, id)).collect();

        // reparameterized sample
        let half = F::cast(0.5);
        let z: Vec<NodeId> = (0..d_z)
            .map(|d| {
                let eps: f64 = rng.sample(StandardNormal);
                let hl = tape.scale(lv[d], half);
                let sd = tape.exp(hl);
                let noise = tape.scale(sd, F::cast(eps));
                tape.add(mu[d], noise)
            })
            .collect();

        // closed-form KL posterior ‖ prior
        let kl = {
            let mut terms = Vec::with_capacity(d_z);
            for d in 0..d_z {
                let dm = tape.sub(mu[d], mu0[d]);
                let dm2 = tape.square(dm);
                let e1 = tape.exp(lv[d]);
                let s = tape.add(e1, dm2);
                let nlv0 = tape.neg(lv0[d]);
                let inv0 = tape.exp(nlv0);
                let ratio = tape.mul(s, inv0);
                let diff = tape.sub(lv0[d], lv[d]);
                let part = tape.add(diff, ratio);
                terms.push(tape.shift(part, -F::one()));
            }
            let sum = tape.sum_set(&terms);
            tape.scale(sum, half)
        };

        // decode all agents in the anchor frame
        let (cos_h, sin_h) = (item.anchor.heading.cos(), item.anchor.heading.sin());
        let scale = F::cast(DISPLACEMENT_SCALE_M);
        let n_agents = h.len();
        let mut world: Vec<Vec<(NodeId, NodeId)>> = Vec::with_capacity(n_agents);
        let mut sq_errs = Vec::with_capacity(n_agents * self.future_horizon * 2);
        for i in 0..n_agents {
            let mut input = Vec::with_capacity(d_z + c.len() + h[i].len());
            input.extend_from_slice(&z);
            input.extend_from_slice(&c);
            input.extend_from_slice(&h[i]);
            let raw = bound.decoder.forward(tape, &input)?;
            let p0 = item.last_states[i].position;
            let mut cx = tape.constant(F::zero());
            let mut cy = tape.constant(F::zero());
            let mut pts = Vec::with_capacity(self.future_horizon);
            for k in 0..self.future_horizon {
                let dx = tape.scale(raw[2 * k], scale);
                let dy = tape.scale(raw[2 * k + 1], scale);
                cx = tape.add(cx, dx);
                cy = tape.add(cy, dy);
                let cxc = tape.scale(cx, cos_h);
                let cys = tape.scale(cy, sin_h);
                let wx0 = tape.sub(cxc, cys);
                let wx = tape.shift(wx0, p0.x);
                let cxs = tape.scale(cx, sin_h);
                let cyc = tape.scale(cy, cos_h);
                let wy0 = tape.add(cxs, cyc);
                let wy = tape.shift(wy0, p0.y);
                let gt = item.gt_futures[i][k];
                let ex = tape.shift(wx, -gt.x);
                let ey = tape.shift(wy, -gt.y);
                sq_errs.push(tape.square(ex));
                sq_errs.push(tape.square(ey));
                pts.push((wx, wy));
            }
            world.push(pts);
        }
        let se_sum = tape.sum_set(&sq_errs);
        let recon = tape.scale(
            se_sum,
            F::from_usize(n_agents * self.future_horizon).unwrap().recip(),
        );

        // pairwise collision hinge
        let mut pens = Vec::new();
        for i in 0..n_agents {
            for j in i + 1..n_agents {
                let rsum = item.radii[i] + item.radii[j];
                for k in 0..self.future_horizon {
                    let dx = tape.sub(world[i][k].0, world[j][k].0);
                    let dy = tape.sub(world[i][k].1, world[j][k].1);
                    let dist = tape.euclidean_norm(&[dx, dy])?;
                    let neg = tape.neg(dist);
                    let gap = tape.shift(neg, rsum);
                    let hinge = tape.relu(gap);
                    pens.push(tape.square(hinge));
                }
            }
        }
        let coll = if pens.is_empty() {
            tape.constant(F::zero())
        } else {
            tape.sum_set(&pens)
        };

        let klw = tape.scale(kl, w_kl);
        let collw = tape.scale(coll, w_coll);
        let total = tape.sum_set(&[recon, klw, collw]);
        Ok((
            LossIds {
                total,
                recon,
                kl,
                coll,
            },
            bound,
        ))
    }

    /// Evaluation-protocol reconstruction error: decode at the posterior mean
    /// (no sampling) and report the mean squared position error in m².
    pub fn reconstruction_mse(&self, scenes: &[Scene<F>]) -> Result<F, PriorError> {
        if scenes.is_empty() {
            return Err(PriorError::CorpusTooSmall { got: 0, need: 1 });
        }
        let mut acc = F::zero();
        for scene in scenes {
            if !scene.has_future() {
                return Err(PriorError::MissingFuture);
            }
            let ctx = self.conditioning(scene)?;
            let post = self.encode(scene, &ctx.c)?;
            let decoded = self.decode(&post.mean, &ctx)?;
            let mut se = F::zero();
            let mut count = 0usize;
            for (idx, pts) in decoded.iter().enumerate() {
                let gt = scene.future_positions(idx).ok_or(PriorError::MissingFuture)?;
                for (p, g) in pts.iter().zip(&gt) {
                    let d = *p - *g;
                    se += d.dot(d);
                    count += 1;
                }
            }
            acc += se / F::from_usize(count).unwrap();
        }
        Ok(acc / F::from_usize(scenes.len()).unwrap())
    }

    /// Train a fresh model on the corpus with mini-batch gradient descent
    /// (sequential shard accumulation, global-norm clipping, KL warmup).
    pub fn train(
        corpus: &[Scene<F>],
        model_cfg: &ModelConfig,
        cfg: &TrainingConfig,
    ) -> Result<(Self, Vec<LossBreakdown<F>>), PriorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Self::init(model_cfg, &mut rng);
        let history = model.fit_with_rng(corpus, cfg, &mut rng)?;
        Ok((model, history))
    }

    /// Continue training an existing model (e.g. a lower-rate refinement
    /// stage or a checkpoint resume). RNG restarts from `cfg.seed`.
    pub fn fit(
        &mut self,
        corpus: &[Scene<F>],
        cfg: &TrainingConfig,
    ) -> Result<Vec<LossBreakdown<F>>, PriorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.fit_with_rng(corpus, cfg, &mut rng)
    }

    fn fit_with_rng(
        &mut self,
        corpus: &[Scene<F>],
        cfg: &TrainingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<LossBreakdown<F>>, PriorError> {
        if corpus.is_empty() {
            return Err(PriorError::CorpusTooSmall { got: 0, need: 1 });
        }
        let model = &mut *self;
        let items: Vec<TrainItem<F>> = corpus
            .iter()
            .map(|s| TrainItem::build(model, s))
            .collect::<Result<_, _>>()?;

        let n_params = model.num_params();
        let warmup_epochs = ((cfg.epochs as f64) * cfg.kl_warmup_fraction).ceil().max(1.0);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut tape = Tape::with_capacity(256 * 1024);
        let mut grad_acc = vec![F::zero(); n_params];
        let mut flat = Vec::with_capacity(n_params);

        for epoch in 0..cfg.epochs {
            let w_kl_e = F::cast(cfg.w_kl * ((epoch as f64) / warmup_epochs).min(1.0));
            let w_coll = F::cast(cfg.w_coll);
            order.shuffle(rng);
            let mut epoch_sums = LossBreakdown {
                total: F::zero(),
                recon: F::zero(),
                kl: F::zero(),
                coll: F::zero(),
            };
            for batch in order.chunks(cfg.batch_size) {
                grad_acc.iter_mut().for_each(|g| *g = F::zero());
                for &i in batch {
                    tape.reset();
                    let (ids, bound) =
                        model.loss_on_tape(&mut tape, &items[i], w_kl_e, w_coll, rng)?;
                    let total = tape.val(ids.total);
                    if !total.is_finite() {
                        return Err(PriorError::TrainingDiverged { epoch });
                    }
                    epoch_sums.total += total;
                    epoch_sums.recon += tape.val(ids.recon);
                    epoch_sums.kl += tape.val(ids.kl);
                    epoch_sums.coll += tape.val(ids.coll);
                    let grads = tape.backward(ids.total);
                    flat.clear();
                    bound.collect_grads(&grads, &mut flat);
                    for (a, g) in grad_acc.iter_mut().zip(&flat) {
                        *a += *g;
                    }
                }
                let inv_b = F::from_usize(batch.len()).unwrap().recip();
                grad_acc.iter_mut().for_each(|g| *g *= inv_b);
                clip_gradient_norm(&mut grad_acc, F::cast(cfg.clip_norm));
                let lr = F::cast(cfg.learning_rate);
                let mut k = 0usize;
                model.for_each_param_mut(&mut |p| {
                    *p -= lr * grad_acc[k];
                    k += 1;
                });
            }
            let inv_n = F::from_usize(items.len()).unwrap().recip();
            history.push(LossBreakdown {
                total: epoch_sums.total * inv_n,
                recon: epoch_sums.recon * inv_n,
                kl: epoch_sums.kl * inv_n,
                coll: epoch_sums.coll * inv_n,
            });
        }
        Ok(history)
    }
}

/// Node-id handles for the loss components of one tape build.
struct LossIds {
    total: NodeId,
    recon: NodeId,
    kl: NodeId,
    coll: NodeId,
}

/// Tape-bound model (parameter nodes in `for_each_param` order).
struct MotionPriorNodes {
    encoder: GraphEncoderNodes,
    posterior: MlpNodes,
    prior: MlpNodes,
    decoder: MlpNodes,
}

impl MotionPriorNodes {
    fn collect_grads<F: Scalar>(&self, grads: &crate::diff::Gradients<F>, out: &mut Vec<F>) {
        self.encoder.collect_grads(grads, out);
        self.posterior.collect_grads(grads, out);
        self.prior.collect_grads(grads, out);
        self.decoder.collect_grads(grads, out);
    }
}

/// Precomputed per-scene training inputs.
struct TrainItem<F> {
    graph: SceneGraph<F>,
    map_summary: Vec<F>,
    future_summary: Vec<F>,
    gt_futures: Vec<Vec<Vec2<F>>>,
    last_states: Vec<AgentState<F>>,
    anchor: AgentState<F>,
    radii: Vec<F>,
}

impl<F: Scalar> TrainItem<F> {
    fn build(model: &MotionPriorModel<F>, scene: &Scene<F>) -> Result<Self, PriorError> {
        if !scene.has_future() {
            return Err(PriorError::MissingFuture);
        }
        let t = scene.last_history_step();
        let graph = build_scene_graph(scene, t)?;
        let map_summary = scene
            .map
            .grid
            .coarse_summary(crate::graph_encoder::MAP_SUMMARY_TILES);
        let future_summary = model.future_summary(scene);
        let gt_futures: Vec<Vec<Vec2<F>>> = (0..scene.num_agents())
            .map(|i| scene.future_positions(i).ok_or(PriorError::MissingFuture))
            .collect::<Result<_, _>>()?;
        let last_states: Vec<AgentState<F>> = scene
            .agents
            .iter()
            .map(|tr| tr.state(t).copied())
            .collect::<Result<_, _>>()?;
        let anchor = last_states[scene.ego_index()];
        let radii = last_states.iter().map(|s| s.footprint().disc_radius()).collect();
        Ok(Self {
            graph,
            map_summary,
            future_summary,
            gt_futures,
            last_states,
            anchor,
            radii,
        })
    }
}
