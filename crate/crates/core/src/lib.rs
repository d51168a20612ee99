//! Learned motion prior over traffic scenes with knowledge-guided
//! adversarial scenario synthesis.
//!
//! The crate is organized bottom-up:
//!
//! * [`scalar`], [`geom`], [`diff`] — numeric kernel: a float abstraction,
//!   planar geometry, and a reverse-mode autodiff tape.
//! * [`scene`] — agents, trajectories, maps, and the scene interaction graph.
//! * [`nn`], [`graph_encoder`], [`motion_prior`] — the conditional
//!   variational model over future trajectories.
//! * [`risk_field`], [`controller`], [`optimizer`] — risk potential field,
//!   directive selection, and latent-space attack optimization.
//! * [`metrics`], [`io`] — risk classification and evaluation metrics,
//!   corpus/scenario/checkpoint serialization.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below
//! pin the double-precision instantiations used by the CLI.

pub mod controller;
pub mod diff;
pub mod geom;
pub mod graph_encoder;
pub mod io;
pub mod metrics;
pub mod motion_prior;
pub mod nn;
pub mod optimizer;
pub mod risk_field;
pub mod scalar;
pub mod scene;

pub use scalar::Scalar;

/// Default precision used by the command-line tools.
pub type Real = f64;
/// Double-precision 2-D vector.
pub type Vec2r = geom::Vec2<Real>;
/// Double-precision pose.
pub type Poser = geom::Pose<Real>;
/// Double-precision oriented box.
pub type Obbr = geom::Obb<Real>;
/// Double-precision autodiff tape.
pub type Taper = diff::Tape<Real>;
