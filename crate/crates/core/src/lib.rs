//! Ensembles of shallow energy/entropy networks combined through zentropy
//! statistical mechanics.
//!
//! Each of `K` configurations owns a pair of small networks for its internal
//! energy `E(k)` and intrinsic entropy `S(k) ≥ 0`. Configuration probabilities
//! follow a Boltzmann-like law augmented with an entropy-fluctuation term, and
//! the ensemble's total Helmholtz energy is what gets fitted to data and then
//! analysed for stationary points, curvature changes and critical points.
//!
//! Module map:
//!
//! * [`autodiff`]: derivative engine (computation graphs, dual numbers).
//! * [`netcore`]: tanh feed-forward networks and the baseline DNN.
//! * [`zentropy`]: probabilities, total entropy, total Helmholtz energy.
//! * [`losses`]: cross-entropy, cross-zentropy, KL / Jensen–Shannon, convexity penalty.
//! * [`train`]: Adam, the training loop and configuration-count selection.
//! * [`analysis`]: derivatives of `F`, bifurcation diagrams, curvature contours,
//!   isobars, the zero-eigenvalue critical-point solver.
//! * [`benchdata`]: benchmark models, data generators, EOS tools, file formats.
//! * [`tasks`]: end-to-end objectives and presets tying the above together.
//!
//! Numerics are generic over [`autodiff::Real`]; the aliases below name the
//! concrete scalars used throughout.

pub mod analysis;
pub mod autodiff;
pub mod benchdata;
pub mod error;
pub mod losses;
pub mod netcore;
pub mod tasks;
pub mod train;
pub mod zentropy;

pub use error::{Error, Result};

/// Working precision for parameters, data and reports.
pub type Scalar = f64;
/// Tangent-carrying scalar for first derivatives.
pub type Dual64 = autodiff::Dual<f64>;
/// Second-order (hyper-dual) scalar: `Dual<Dual<f64>>`.
pub type HyperDual64 = autodiff::Dual<autodiff::Dual<f64>>;
/// Ensemble state evaluated in working precision.
pub type State = zentropy::EnsembleState<f64>;
