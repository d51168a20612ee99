//! Message-passing encoder over scene graphs: per-agent embeddings, a
//! mean-pooled scene embedding, and the map-conditioned context vector.

use crate::diff::{NodeId, Tape};
use crate::nn::{Activation, Mlp, MlpNodes, NnError};
use crate::scalar::Scalar;
use crate::scene::{MapGrid, SceneGraph, NODE_FEATURES_PER_STEP};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Normalization constants bringing raw physical features to O(1).
const POS_SCALE: f64 = 50.0;
const VEL_SCALE: f64 = 20.0;
const ANGLE_SCALE: f64 = std::f64::consts::PI;
const LENGTH_SCALE: f64 = 5.0;
const WIDTH_SCALE: f64 = 2.5;

/// Tiles per side of the coarse drivable-area summary entering the context
/// vector.
pub const MAP_SUMMARY_TILES: usize = 8;

fn node_feature_scales<F: Scalar>(node_dim: usize) -> Vec<F> {
    let steps = (node_dim - 2) / NODE_FEATURES_PER_STEP;
    let mut s = Vec::with_capacity(node_dim);
    for _ in 0..steps {
        s.push(F::cast(1.0 / POS_SCALE));
        s.push(F::cast(1.0 / POS_SCALE));
        s.push(F::cast(1.0 / VEL_SCALE));
        s.push(F::cast(1.0 / VEL_SCALE));
        s.push(F::cast(1.0 / ANGLE_SCALE));
    }
    s.push(F::cast(1.0 / LENGTH_SCALE));
    s.push(F::cast(1.0 / WIDTH_SCALE));
    s
}

fn edge_feature_scales<F: Scalar>() -> [F; 4] {
    [
        F::cast(1.0 / POS_SCALE),
        F::cast(1.0 / VEL_SCALE),
        F::cast(1.0 / ANGLE_SCALE),
        F::one(),
    ]
}

/// One round of message passing: a message network over
/// (h_i, h_j, edge features) and an update network over
/// (h_i, aggregated message).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePassingLayer<F> {
    pub message_net: Mlp<F>,
    pub update_net: Mlp<F>,
    pub hidden_dim: usize,
}

impl<F: Scalar> MessagePassingLayer<F> {
    pub fn init(hidden_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            message_net: Mlp::init(
                &[2 * hidden_dim + 4, hidden_dim, hidden_dim],
                Activation::Tanh,
                rng,
            ),
            update_net: Mlp::init(&[2 * hidden_dim, hidden_dim, hidden_dim], Activation::Tanh, rng),
            hidden_dim,
        }
    }
}

/// GNN encoder: input projection, L message-passing rounds, mean pooling.
///
/// Aggregation over an empty neighborhood is the zero vector, so isolated
/// agents still receive an update from their own embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEncoderModel<F> {
    pub input_projection: Mlp<F>,
    pub layers: Vec<MessagePassingLayer<F>>,
    pub hidden_dim: usize,
    pub node_dim: usize,
}

impl<F: Scalar> GraphEncoderModel<F> {
    pub fn init(node_dim: usize, hidden_dim: usize, depth: usize, rng: &mut impl Rng) -> Self {
        assert!(depth >= 1, "encoder depth must be at least 1");
        Self {
            input_projection: Mlp::init(&[node_dim, hidden_dim, hidden_dim], Activation::Tanh, rng),
            layers: (0..depth)
                .map(|_| MessagePassingLayer::init(hidden_dim, rng))
                .collect(),
            hidden_dim,
            node_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.input_projection.num_params()
            + self
                .layers
                .iter()
                .map(|l| l.message_net.num_params() + l.update_net.num_params())
                .sum::<usize>()
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(F)) {
        self.input_projection.for_each_param(f);
        for l in &self.layers {
            l.message_net.for_each_param(f);
            l.update_net.for_each_param(f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut F)) {
        self.input_projection.for_each_param_mut(f);
        for l in &mut self.layers {
            l.message_net.for_each_param_mut(f);
            l.update_net.for_each_param_mut(f);
        }
    }

    fn check_dims(&self, graph: &SceneGraph<F>) -> Result<(), NnError> {
        if graph.node_dim != self.node_dim {
            return Err(NnError::Shape {
                layer: 0,
                got: graph.node_dim,
                expected: self.node_dim,
            });
        }
        Ok(())
    }

    /// Value-space encoding: (per-node embeddings, mean-pooled embedding).
    pub fn encode_values(&self, graph: &SceneGraph<F>) -> Result<(Vec<Vec<F>>, Vec<F>), NnError> {
        self.check_dims(graph)?;
        let scales = node_feature_scales::<F>(self.node_dim);
        let escales = edge_feature_scales::<F>();
        let mut h: Vec<Vec<F>> = Vec::with_capacity(graph.nodes.len());
        for feats in &graph.nodes {
            let scaled: Vec<F> = feats.iter().zip(&scales).map(|(&v, &s)| v * s).collect();
            h.push(self.input_projection.forward(&scaled)?);
        }
        for layer in &self.layers {
            let mut agg = vec![vec![F::zero(); self.hidden_dim]; h.len()];
            let mut degree = vec![0usize; h.len()];
            for e in &graph.edges {
                let mut input = Vec::with_capacity(2 * self.hidden_dim + 4);
                input.extend_from_slice(&h[e.from]);
                input.extend_from_slice(&h[e.to]);
                input.extend(e.features.iter().zip(&escales).map(|(&v, &s)| v * s));
                let msg = layer.message_net.forward(&input)?;
                for (a, m) in agg[e.from].iter_mut().zip(&msg) {
                    *a += *m;
                }
                degree[e.from] += 1;
            }
            let mut next = Vec::with_capacity(h.len());
            for i in 0..h.len() {
                if degree[i] > 0 {
                    let inv = F::from_usize(degree[i]).unwrap().recip();
                    for a in agg[i].iter_mut() {
                        *a *= inv;
                    }
                }
                let mut input = Vec::with_capacity(2 * self.hidden_dim);
                input.extend_from_slice(&h[i]);
                input.extend_from_slice(&agg[i]);
                next.push(layer.update_net.forward(&input)?);
            }
            h = next;
        }
        let inv_n = F::from_usize(h.len()).unwrap().recip();
        let mut pooled = vec![F::zero(); self.hidden_dim];
        for hi in &h {
            for (p, v) in pooled.iter_mut().zip(hi) {
                *p += *v * inv_n;
            }
        }
        Ok((h, pooled))
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> GraphEncoderNodes {
        GraphEncoderNodes {
            input_projection: self.input_projection.bind(tape, trainable),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        l.message_net.bind(tape, trainable),
                        l.update_net.bind(tape, trainable),
                    )
                })
                .collect(),
            hidden_dim: self.hidden_dim,
            node_dim: self.node_dim,
        }
    }
}

/// Tape-bound encoder.
#[derive(Debug)]
pub struct GraphEncoderNodes {
    pub input_projection: MlpNodes,
    pub layers: Vec<(MlpNodes, MlpNodes)>,
    hidden_dim: usize,
    node_dim: usize,
}

impl GraphEncoderNodes {
    /// Tape encoding; graph features enter as constants.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        graph: &SceneGraph<F>,
    ) -> Result<(Vec<Vec<NodeId>>, Vec<NodeId>), NnError> {
        if graph.node_dim != self.node_dim {
            return Err(NnError::Shape {
                layer: 0,
                got: graph.node_dim,
                expected: self.node_dim,
            });
        }
        let scales = node_feature_scales::<F>(self.node_dim);
        let escales = edge_feature_scales::<F>();
        let mut h: Vec<Vec<NodeId>> = Vec::with_capacity(graph.nodes.len());
        for feats in &graph.nodes {
            let scaled: Vec<NodeId> = feats
                .iter()
                .zip(&scales)
                .map(|(&v, &s)| tape.constant(v * s))
                .collect();
            h.push(self.input_projection.forward(tape, &scaled)?);
        }
        for (message_net, update_net) in &self.layers {
            let mut incoming: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); h.len()];
            for e in &graph.edges {
                let mut input = Vec::with_capacity(2 * self.hidden_dim + 4);
                input.extend_from_slice(&h[e.from]);
                input.extend_from_slice(&h[e.to]);
                for (v, s) in e.features.iter().zip(&escales) {
                    input.push(tape.constant(*v * *s));
                }
                let msg = message_net.forward(tape, &input)?;
                incoming[e.from].push(msg);
            }
            let mut next = Vec::with_capacity(h.len());
            for i in 0..h.len() {
                let agg: Vec<NodeId> = if incoming[i].is_empty() {
                    (0..self.hidden_dim).map(|_| tape.constant(F::zero())).collect()
                } else {
                    let inv = F::from_usize(incoming[i].len()).unwrap().recip();
                    (0..self.hidden_dim)
                        .map(|d| {
                            let terms: Vec<NodeId> =
                                incoming[i].iter().map(|m| m[d]).collect();
                            let s = tape.sum_set(&terms);
                            tape.scale(s, inv)
                        })
                        .collect()
                };
                let mut input = Vec::with_capacity(2 * self.hidden_dim);
                input.extend_from_slice(&h[i]);
                input.extend_from_slice(&agg);
                next.push(update_net.forward(tape, &input)?);
            }
            h = next;
        }
        let inv_n = F::from_usize(h.len()).unwrap().recip();
        let pooled: Vec<NodeId> = (0..self.hidden_dim)
            .map(|d| {
                let col: Vec<NodeId> = h.iter().map(|hi| hi[d]).collect();
                let s = tape.sum_set(&col);
                tape.scale(s, inv_n)
            })
            .collect();
        Ok((h, pooled))
    }

    pub fn collect_grads<F: Scalar>(
        &self,
        grads: &crate::diff::Gradients<F>,
        out: &mut Vec<F>,
    ) {
        self.input_projection.collect_grads(grads, out);
        for (m, u) in &self.layers {
            m.collect_grads(grads, out);
            u.collect_grads(grads, out);
        }
    }
}

/// Context vector: coarse drivable-area summary concatenated with the pooled
/// agent embedding.
pub fn context_vector<F: Scalar>(map: &MapGrid<F>, pooled: &[F]) -> Vec<F> {
    let mut c = map.coarse_summary(MAP_SUMMARY_TILES);
    c.extend_from_slice(pooled);
    c
}

/// Context dimension for a given hidden width.
pub fn context_dim(hidden_dim: usize) -> usize {
    MAP_SUMMARY_TILES * MAP_SUMMARY_TILES + hidden_dim
}
