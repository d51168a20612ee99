//! Minimal dense-network building blocks with two forward paths: plain
//! values for inference and tape nodes for differentiation.
//!
//! Parameters live in the model structs; a tape build *binds* them, creating
//! one tape node per parameter in a fixed traversal order (weights row-major,
//! then bias, layer by layer). Gradient collection walks the same order, so a
//! flat gradient vector always lines up with [`Mlp::for_each_param_mut`].

use crate::diff::{Gradients, NodeId, Tape};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: input of dim {got}, expected {expected}")]
    Shape {
        layer: usize,
        got: usize,
        expected: usize,
    },
    #[error("layer {layer}: non-finite activation")]
    NumericalError { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

/// Fully connected layer; weights row-major (out_dim × in_dim).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    /// Seeded uniform init in ±1/√fan_in for weights and bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || F::cast((2.0 * rng.gen::<f64>() - 1.0) * bound);
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| draw()).collect(),
            bias: (0..out_dim).map(|_| draw()).collect(),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![F::zero(); in_dim * out_dim],
            bias: vec![F::zero(); out_dim],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn apply_activation(v: F, act: Activation) -> F {
        match act {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(F::zero()),
            Activation::Identity => v,
        }
    }

    /// Value-space forward with shape and finiteness checks.
    pub fn forward(&self, layer: usize, x: &[F], act: Activation) -> Result<Vec<F>, NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::Shape {
                layer,
                got: x.len(),
                expected: self.in_dim,
            });
        }
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            let v = Self::apply_activation(acc, act);
            if !v.is_finite() {
                return Err(NnError::NumericalError { layer });
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Put every parameter on the tape. `trainable` selects input nodes
    /// (gradients flow) versus constants (frozen, e.g. during latent attacks).
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> DenseNodes {
        let mut push = |v: F| {
            if trainable {
                tape.input(v)
            } else {
                tape.constant(v)
            }
        };
        DenseNodes {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: self.weights.iter().map(|&w| push(w)).collect(),
            bias: self.bias.iter().map(|&b| push(b)).collect(),
        }
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(F)) {
        self.weights.iter().for_each(|&w| f(w));
        self.bias.iter().for_each(|&b| f(b));
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut F)) {
        self.weights.iter_mut().for_each(|w| f(w));
        self.bias.iter_mut().for_each(|b| f(b));
    }
}

/// Tape-bound counterpart of [`Dense`].
#[derive(Debug)]
pub struct DenseNodes {
    pub in_dim: usize,
    pub out_dim: usize,
    weights: Vec<NodeId>,
    bias: Vec<NodeId>,
}

impl DenseNodes {
    /// Assemble from explicit node ids (weights row-major, then bias) —
    /// used when parameters were placed on the tape by the caller.
    pub fn from_parts(in_dim: usize, out_dim: usize, weights: Vec<NodeId>, bias: Vec<NodeId>) -> Self {
        assert_eq!(weights.len(), in_dim * out_dim);
        assert_eq!(bias.len(), out_dim);
        Self {
            in_dim,
            out_dim,
            weights,
            bias,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        layer: usize,
        x: &[NodeId],
        act: Activation,
    ) -> Result<Vec<NodeId>, NnError> {
        if x.len() != self.in_dim {
            return Err(NnError::Shape {
                layer,
                got: x.len(),
                expected: self.in_dim,
            });
        }
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let d = tape.dot(row, x);
            let pre = tape.add(d, self.bias[o]);
            out.push(match act {
                Activation::Tanh => tape.tanh(pre),
                Activation::Relu => tape.relu(pre),
                Activation::Identity => pre,
            });
        }
        Ok(out)
    }

    pub fn collect_grads<F: Scalar>(&self, grads: &Gradients<F>, out: &mut Vec<F>) {
        out.extend(self.weights.iter().map(|&id| grads.wrt(id)));
        out.extend(self.bias.iter().map(|&id| grads.wrt(id)));
    }
}

/// Stack of dense layers; the hidden activation applies to every layer
/// except the last, which stays linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<F> {
    pub layers: Vec<Dense<F>>,
    pub hidden_activation: Activation,
}

impl<F: Scalar> Mlp<F> {
    /// `dims = [in, hidden…, out]`, seeded init.
    pub fn init(dims: &[usize], hidden_activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        Self {
            layers: dims
                .windows(2)
                .map(|w| Dense::init(w[0], w[1], rng))
                .collect(),
            hidden_activation,
        }
    }

    pub fn zeros(dims: &[usize], hidden_activation: Activation) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            hidden_activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn act_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>, NnError> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(i, &h, self.act_for(i))?;
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> MlpNodes {
        MlpNodes {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            hidden_activation: self.hidden_activation,
        }
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(F)) {
        for l in &self.layers {
            l.for_each_param(f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut F)) {
        for l in &mut self.layers {
            l.for_each_param_mut(f);
        }
    }
}

/// Tape-bound counterpart of [`Mlp`].
#[derive(Debug)]
pub struct MlpNodes {
    pub layers: Vec<DenseNodes>,
    hidden_activation: Activation,
}

impl MlpNodes {
    pub fn from_parts(layers: Vec<DenseNodes>, hidden_activation: Activation) -> Self {
        Self {
            layers,
            hidden_activation,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: &[NodeId],
    ) -> Result<Vec<NodeId>, NnError> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = if i + 1 == self.layers.len() {
                Activation::Identity
            } else {
                self.hidden_activation
            };
            h = layer.forward(tape, i, &h, act)?;
        }
        Ok(h)
    }

    pub fn collect_grads<F: Scalar>(&self, grads: &Gradients<F>, out: &mut Vec<F>) {
        for l in &self.layers {
            l.collect_grads(grads, out);
        }
    }
}

/// Scale `grads` in place so its Euclidean norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradient_norm<F: Scalar>(grads: &mut [F], max_norm: F) -> F {
    let norm = grads.iter().map(|&g| g * g).sum::<F>().sqrt();
    if norm > max_norm && norm > F::zero() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::<f64>::init(16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(d
            .weights
            .iter()
            .chain(&d.bias)
            .all(|w| w.abs() <= bound));
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let d2 = Dense::<f64>::init(16, 8, &mut rng2);
        assert_eq!(d, d2);
    }

    #[test]
    fn value_and_tape_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::<f64>::init(&[5, 8, 3], Activation::Tanh, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.7).collect();
        let by_value = mlp.forward(&x).unwrap();

        let mut tape = Tape::new();
        let nodes = mlp.bind(&mut tape, true);
        let xs: Vec<_> = x.iter().map(|&v| tape.constant(v)).collect();
        let out = nodes.forward(&mut tape, &xs).unwrap();
        for (v, id) in by_value.iter().zip(&out) {
            assert_abs_diff_eq!(*v, tape.val(*id), epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported_with_layer_index() {
        let mlp = Mlp::<f64>::zeros(&[4, 4, 2], Activation::Relu);
        let err = mlp.forward(&[1.0; 3]).unwrap_err();
        assert!(matches!(err, NnError::Shape { layer: 0, got: 3, expected: 4 }));
    }

    #[test]
    fn zero_weights_forward_is_bias() {
        let mut mlp = Mlp::<f64>::zeros(&[3, 2], Activation::Tanh);
        mlp.layers[0].bias = vec![0.5, -1.5];
        assert_eq!(mlp.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn gradient_collection_matches_parameter_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::<f64>::init(&[2, 3, 1], Activation::Tanh, &mut rng);
        let x = [0.4, -0.2];

        let mut tape = Tape::new();
        let nodes = mlp.bind(&mut tape, true);
        let xs: Vec<_> = x.iter().map(|&v| tape.constant(v)).collect();
        let out = nodes.forward(&mut tape, &xs).unwrap();
        let grads = tape.backward(out[0]);
        let mut flat = Vec::new();
        nodes.collect_grads(&grads, &mut flat);
        assert_eq!(flat.len(), mlp.num_params());

        // compare against finite differences through the parameter order
        let mut idx = 0usize;
        let mut max_err = 0.0f64;
        let eval = |m: &Mlp<f64>| m.forward(&x).unwrap()[0];
        for k in 0..mlp.num_params() {
            let h = 1e-6;
            let mut i = 0usize;
            let mut probe = mlp.clone();
            probe.for_each_param_mut(&mut |p| {
                if i == k {
                    *p += h;
                }
                i += 1;
            });
            let fp = eval(&probe);
            i = 0;
            probe = mlp.clone();
            probe.for_each_param_mut(&mut |p| {
                if i == k {
                    *p -= h;
                }
                i += 1;
            });
            let fm = eval(&probe);
            let numeric = (fp - fm) / (2.0 * h);
            max_err = max_err.max((numeric - flat[idx]).abs());
            idx += 1;
        }
        assert!(max_err < 1e-6, "max_err {max_err}");
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        let pre = clip_gradient_norm(&mut g, 1.0);
        assert_abs_diff_eq!(pre, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.8, epsilon = 1e-12);
        let mut small = vec![0.3, 0.4];
        clip_gradient_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }
}
