//! Exact first and second derivatives.
//!
//! Two complementary routes live here:
//!
//! * [`Graph`] records a computation as an immutable node list that can be
//!   re-evaluated at arbitrary bindings. Gradients come from a reverse sweep;
//!   Hessians of low-dimensional inputs from forward-over-reverse (a reverse
//!   sweep carried out in [`Dual`] arithmetic, one column per input).
//! * Code written generically over [`Real`] can be run directly on
//!   `Dual<f64>` or `Dual<Dual<f64>>` for tangent and curvature information
//!   without building a graph. The training loop relies on this.
//!
//! The rectifier `max(x, 0)` has derivative zero at exactly `x = 0`.

mod dual;
mod graph;
mod real;

pub use dual::Dual;
pub use graph::{Bindings, DerivativeReport, Expr, Graph};
pub use real::Real;
