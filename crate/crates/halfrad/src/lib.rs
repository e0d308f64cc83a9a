//! Sparse recovery that survives adversarially augmented measurements.
//!
//! Given a measurement matrix `A` in which only an unknown subset (or
//! reweighting) of rows is trustworthy, and responses `b = A x* (+ xi)` for
//! an `s`-sparse `x*`, this crate recovers `x*` by repeatedly halving a
//! radius bound around the current iterate. Each halving phase asks a
//! *step oracle* for nonnegative row weights that certify both progress and
//! a short-flat decomposition of the induced step direction; steps that
//! cannot be certified terminate the phase instead of corrupting it. That
//! self-certification is what makes the method immune to consistent rows an
//! adversary appends — the same rows that break greedy baselines like
//! iterative hard thresholding and orthogonal matching pursuit.
//!
//! The crate ships four layers:
//!
//! - geometric primitives ([`vecops`], [`sqmax`]): truncation, shelling,
//!   l1-ball projection, short-flat certificates, and the smoothed-max
//!   potential with its constrained minimizer;
//! - the step oracles ([`oracle`]) and radius-halving drivers
//!   ([`recovery`]) for exact and noisy measurements;
//! - instance generators ([`ensembles`]): Gaussian ensembles, semi-random
//!   adversaries, explicit breaker instances, and RIP spot checks;
//! - baselines ([`baselines`]) and a benchmark harness ([`harness`]) behind
//!   the `halfrad` CLI.
//!
//! Start with the runnable examples (`cargo run --release --example
//! exact_recovery`) for end-to-end usage.

pub mod baselines;
pub mod ensembles;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod oracle;
pub mod recovery;
pub mod sqmax;
pub mod stream;
pub mod vecops;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use vecops::{ShortFlatDecomposition, SparseSignal};
