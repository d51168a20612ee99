//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Expressions are built node by node against a [`Tape`]; values are computed
//! eagerly at construction time and a single [`Tape::backward`] sweep yields
//! the gradient of one scalar output with respect to every input node. The
//! tape is a define-by-run structure: optimization loops call [`Tape::reset`]
//! and rebuild the graph each iteration, reusing the allocations.
//!
//! Non-smooth primitives use fixed subgradient conventions so that repeated
//! runs are bit-identical: `relu'(0) = 0`, `|x|' at 0 is 0, binary `max`/`min`
//! route the gradient to their first argument on ties, `min_over_set` routes
//! to the lowest index, and `sqrt'(0)` and the gradient of a zero-length
//! Euclidean norm are taken as 0.

use crate::scalar::Scalar;
use thiserror::Error;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Square(u32),
    Sqrt(u32),
    Exp(u32),
    Ln(u32),
    Tanh(u32),
    Relu(u32),
    Abs(u32),
    Max(u32, u32),
    Min(u32, u32),
    Atan2(u32, u32),
    Hypot(u32, u32),
    /// 1 / (x + eps); the derivative −v² needs only the stored value.
    RecipEps(u32),
    /// Minimum over `args[start..start+len]`.
    MinSet { start: u32, len: u32 },
    /// sqrt(sum of squares) over `args[start..start+len]`.
    Norm { start: u32, len: u32 },
    /// Sum over `args[start..start+len]`.
    SumSet { start: u32, len: u32 },
    /// Inner product of `args[start..start+len]` with
    /// `args[start+len..start+2*len]`.
    Dot { start: u32, len: u32 },
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("sqrt of negative operand {0}")]
    SqrtNegative(f64),
    #[error("log of non-positive operand {0}")]
    LogNonPositive(f64),
    #[error("{num} / {den} is not finite")]
    DivNonFinite { num: f64, den: f64 },
    #[error("{0} requires a non-empty node set")]
    EmptySet(&'static str),
}

/// Flat arena holding the expression graph and its forward values.
#[derive(Debug, Default)]
pub struct Tape<F> {
    ops: Vec<Op>,
    vals: Vec<F>,
    args: Vec<u32>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            vals: Vec::new(),
            args: Vec::new(),
        }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            ops: Vec::with_capacity(nodes),
            vals: Vec::with_capacity(nodes),
            args: Vec::new(),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drop all nodes but keep the allocations for the next build.
    pub fn reset(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.args.clear();
    }

    /// Forward value of a node.
    pub fn val(&self, id: NodeId) -> F {
        self.vals[id.idx()]
    }

    fn push(&mut self, op: Op, val: F) -> NodeId {
        let id = NodeId(self.ops.len() as u32);
        self.ops.push(op);
        self.vals.push(val);
        id
    }

    fn push_args(&mut self, ids: &[NodeId]) -> (u32, u32) {
        let start = self.args.len() as u32;
        self.args.extend(ids.iter().map(|n| n.0));
        (start, ids.len() as u32)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, v: F) -> NodeId {
        self.push(Op::Input, v)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, v: F) -> NodeId {
        self.push(Op::Const, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()] + self.vals[b.idx()];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()] - self.vals[b.idx()];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()] * self.vals[b.idx()];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = self.vals[a.idx()] / self.vals[b.idx()];
        if !v.is_finite() {
            return Err(DiffError::DivNonFinite {
                num: self.vals[a.idx()].as_f64(),
                den: self.vals[b.idx()].as_f64(),
            });
        }
        Ok(self.push(Op::Div(a.0, b.0), v))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.vals[a.idx()];
        self.push(Op::Neg(a.0), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let x = self.vals[a.idx()];
        self.push(Op::Square(a.0), x * x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let x = self.vals[a.idx()];
        if x < F::zero() {
            return Err(DiffError::SqrtNegative(x.as_f64()));
        }
        Ok(self.push(Op::Sqrt(a.0), x.sqrt()))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let x = self.vals[a.idx()];
        if x <= F::zero() {
            return Err(DiffError::LogNonPositive(x.as_f64()));
        }
        Ok(self.push(Op::Ln(a.0), x.ln()))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].tanh();
        self.push(Op::Tanh(a.0), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].max(F::zero());
        self.push(Op::Relu(a.0), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].abs();
        self.push(Op::Abs(a.0), v)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.vals[a.idx()], self.vals[b.idx()]);
        let v = if x >= y { x } else { y };
        self.push(Op::Max(a.0, b.0), v)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.vals[a.idx()], self.vals[b.idx()]);
        let v = if x <= y { x } else { y };
        self.push(Op::Min(a.0, b.0), v)
    }

    /// Four-quadrant arctangent of `y / x`.
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        let v = self.vals[y.idx()].atan2(self.vals[x.idx()]);
        self.push(Op::Atan2(y.0, x.0), v)
    }

    pub fn hypot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()].hypot(self.vals[b.idx()]);
        self.push(Op::Hypot(a.0, b.0), v)
    }

    /// Safe reciprocal 1 / (x + eps) for strictly positive `x + eps`.
    pub fn reciprocal_with_epsilon(&mut self, a: NodeId, eps: F) -> NodeId {
        assert!(eps > F::zero(), "epsilon must be strictly positive");
        let v = (self.vals[a.idx()] + eps).recip();
        self.push(Op::RecipEps(a.0), v)
    }

    /// Minimum over a set of nodes; ties resolve to the lowest index.
    pub fn min_over_set(&mut self, ids: &[NodeId]) -> Result<NodeId, DiffError> {
        if ids.is_empty() {
            return Err(DiffError::EmptySet("min_over_set"));
        }
        let mut v = self.vals[ids[0].idx()];
        for id in &ids[1..] {
            let x = self.vals[id.idx()];
            if x < v {
                v = x;
            }
        }
        let (start, len) = self.push_args(ids);
        Ok(self.push(Op::MinSet { start, len }, v))
    }

    /// Euclidean norm of a vector of nodes.
    pub fn euclidean_norm(&mut self, ids: &[NodeId]) -> Result<NodeId, DiffError> {
        if ids.is_empty() {
            return Err(DiffError::EmptySet("euclidean_norm"));
        }
        let mut s = F::zero();
        for id in ids {
            let x = self.vals[id.idx()];
            s += x * x;
        }
        let (start, len) = self.push_args(ids);
        Ok(self.push(Op::Norm { start, len }, s.sqrt()))
    }

    /// Sum over a set of nodes (fixed left-to-right order).
    pub fn sum_set(&mut self, ids: &[NodeId]) -> NodeId {
        let mut s = F::zero();
        for id in ids {
            s += self.vals[id.idx()];
        }
        let (start, len) = self.push_args(ids);
        self.push(Op::SumSet { start, len }, s)
    }

    /// Inner product of two equal-length node slices.
    pub fn dot(&mut self, a: &[NodeId], b: &[NodeId]) -> NodeId {
        assert_eq!(a.len(), b.len(), "dot operands must have equal length");
        let mut s = F::zero();
        for (x, y) in a.iter().zip(b) {
            s += self.vals[x.idx()] * self.vals[y.idx()];
        }
        let start = self.args.len() as u32;
        self.args.extend(a.iter().map(|n| n.0));
        self.args.extend(b.iter().map(|n| n.0));
        self.push(Op::Dot { start, len: a.len() as u32 }, s)
    }

    /// Convenience: `a * s` for a plain scalar factor.
    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let c = self.constant(s);
        self.mul(a, c)
    }

    /// Convenience: `a + s` for a plain scalar offset.
    pub fn shift(&mut self, a: NodeId, s: F) -> NodeId {
        let c = self.constant(s);
        self.add(a, c)
    }

    /// Gradient of `output` with respect to every node, by one reverse sweep.
    pub fn backward(&self, output: NodeId) -> Gradients<F> {
        let mut adj = vec![F::zero(); self.ops.len()];
        adj[output.idx()] = F::one();
        let two = F::cast(2.0);
        for i in (0..=output.idx()).rev() {
            let g = adj[i];
            if g == F::zero() {
                continue;
            }
            match self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * self.vals[b as usize];
                    adj[b as usize] += g * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    let inv_b = self.vals[b as usize].recip();
                    adj[a as usize] += g * inv_b;
                    adj[b as usize] -= g * self.vals[i] * inv_b;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::Square(a) => adj[a as usize] += g * two * self.vals[a as usize],
                Op::Sqrt(a) => {
                    if self.vals[i] > F::zero() {
                        adj[a as usize] += g / (two * self.vals[i]);
                    }
                }
                Op::Exp(a) => adj[a as usize] += g * self.vals[i],
                Op::Ln(a) => adj[a as usize] += g / self.vals[a as usize],
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    adj[a as usize] += g * (F::one() - t * t);
                }
                Op::Relu(a) => {
                    if self.vals[a as usize] > F::zero() {
                        adj[a as usize] += g;
                    }
                }
                Op::Abs(a) => {
                    let x = self.vals[a as usize];
                    if x > F::zero() {
                        adj[a as usize] += g;
                    } else if x < F::zero() {
                        adj[a as usize] -= g;
                    }
                }
                Op::Max(a, b) => {
                    if self.vals[a as usize] >= self.vals[b as usize] {
                        adj[a as usize] += g;
                    } else {
                        adj[b as usize] += g;
                    }
                }
                Op::Min(a, b) => {
                    if self.vals[a as usize] <= self.vals[b as usize] {
                        adj[a as usize] += g;
                    } else {
                        adj[b as usize] += g;
                    }
                }
                Op::Atan2(y, x) => {
                    let yv = self.vals[y as usize];
                    let xv = self.vals[x as usize];
                    let d = xv * xv + yv * yv;
                    if d > F::zero() {
                        adj[y as usize] += g * xv / d;
                        adj[x as usize] -= g * yv / d;
                    }
                }
                Op::Hypot(a, b) => {
                    let h = self.vals[i];
                    if h > F::zero() {
                        adj[a as usize] += g * self.vals[a as usize] / h;
                        adj[b as usize] += g * self.vals[b as usize] / h;
                    }
                }
                Op::RecipEps(a) => {
                    let v = self.vals[i];
                    adj[a as usize] -= g * v * v;
                }
                Op::MinSet { start, len } => {
                    let slice = &self.args[start as usize..(start + len) as usize];
                    let mut best = slice[0] as usize;
                    for &a in &slice[1..] {
                        if self.vals[a as usize] < self.vals[best] {
                            best = a as usize;
                        }
                    }
                    adj[best] += g;
                }
                Op::Norm { start, len } => {
                    let h = self.vals[i];
                    if h > F::zero() {
                        let inv = g / h;
                        for &a in &self.args[start as usize..(start + len) as usize] {
                            adj[a as usize] += inv * self.vals[a as usize];
                        }
                    }
                }
                Op::SumSet { start, len } => {
                    for &a in &self.args[start as usize..(start + len) as usize] {
                        adj[a as usize] += g;
                    }
                }
                Op::Dot { start, len } => {
                    let (s, l) = (start as usize, len as usize);
                    for k in 0..l {
                        let a = self.args[s + k] as usize;
                        let b = self.args[s + l + k] as usize;
                        adj[a] += g * self.vals[b];
                        adj[b] += g * self.vals[a];
                    }
                }
            }
        }
        Gradients { adj }
    }

    /// Branch decisions of every non-smooth node, in tape order. Two builds
    /// of the same expression share a signature exactly when every kink
    /// resolved the same way, which makes finite-difference checks near a
    /// kink detectable.
    pub fn activation_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            match *op {
                Op::Relu(a) => sig.push((self.vals[a as usize] > F::zero()) as u32),
                Op::Abs(a) => {
                    let x = self.vals[a as usize];
                    sig.push(if x > F::zero() {
                        2
                    } else if x < F::zero() {
                        1
                    } else {
                        0
                    });
                }
                Op::Max(a, b) => sig.push((self.vals[a as usize] >= self.vals[b as usize]) as u32),
                Op::Min(a, b) => sig.push((self.vals[a as usize] <= self.vals[b as usize]) as u32),
                Op::MinSet { start, len } => {
                    let slice = &self.args[start as usize..(start + len) as usize];
                    let mut best = 0u32;
                    for (k, &a) in slice.iter().enumerate() {
                        if self.vals[a as usize] < self.vals[slice[best as usize] as usize] {
                            best = k as u32;
                        }
                    }
                    sig.push(best);
                }
                Op::Sqrt(a) => sig.push((self.vals[a as usize] > F::zero()) as u32),
                _ => {
                    let _ = i;
                }
            }
        }
        sig
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    adj: Vec<F>,
}

impl<F: Scalar> Gradients<F> {
    /// d(output) / d(node).
    pub fn wrt(&self, id: NodeId) -> F {
        self.adj[id.idx()]
    }
}

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Debug)]
pub struct GradCheck<F> {
    pub analytic: Vec<F>,
    pub numeric: Vec<F>,
    /// True where the two finite-difference probes resolved some non-smooth
    /// primitive differently; those components are not comparable.
    pub kink_crossed: Vec<bool>,
}

impl<F: Scalar> GradCheck<F> {
    /// Largest |analytic - numeric| / max(1, |analytic|) over comparable
    /// components.
    pub fn max_relative_error(&self) -> F {
        let mut worst = F::zero();
        for i in 0..self.analytic.len() {
            if self.kink_crossed[i] {
                continue;
            }
            let denom = F::one().max(self.analytic[i].abs());
            let err = (self.analytic[i] - self.numeric[i]).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
        worst
    }

    /// Number of components skipped because a kink sat between the probes.
    pub fn kinks(&self) -> usize {
        self.kink_crossed.iter().filter(|&&k| k).count()
    }
}

/// Compare the tape gradient of `f` at `x` against central finite
/// differences with per-component step `rel_step * max(1, |x_i|)`.
pub fn grad_check<F: Scalar>(
    f: impl Fn(&mut Tape<F>, &[NodeId]) -> Result<NodeId, DiffError>,
    x: &[F],
    rel_step: F,
) -> Result<GradCheck<F>, DiffError> {
    let eval = |pt: &[F]| -> Result<(F, Vec<u32>), DiffError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = pt.iter().map(|&v| tape.input(v)).collect();
        let out = f(&mut tape, &ids)?;
        Ok((tape.val(out), tape.activation_signature()))
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = x.iter().map(|&v| tape.input(v)).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out);
    let analytic: Vec<F> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let mut numeric = Vec::with_capacity(x.len());
    let mut kink_crossed = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * F::one().max(x[i].abs());
        probe[i] = x[i] + h;
        let (fp, sig_p) = eval(&probe)?;
        probe[i] = x[i] - h;
        let (fm, sig_m) = eval(&probe)?;
        probe[i] = x[i];
        numeric.push((fp - fm) / (F::cast(2.0) * h));
        kink_crossed.push(sig_p != sig_m);
    }
    Ok(GradCheck {
        analytic,
        numeric,
        kink_crossed,
    })
}
