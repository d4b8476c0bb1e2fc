//! Time-optimal and norm-optimal control of linear time-varying ODEs with
//! rectangular (per-channel box) control constraints.
//!
//! The system is `y'(t) + A(t) y(t) = Σ_i b_i u^i(t)`, `y(0) = y0`, with
//! `|u^i(t)| ≤ k_i·M`. Both the least horizon `t*(M)` that reaches the
//! origin under bound `M` and the least bound `M̃(T)` that reaches it by
//! horizon `T` are computed through one variational object: minimizers of a
//! dual functional yield the optimal control in closed bang-bang form, and
//! `t*` is found by bisecting the strictly decreasing map `T ↦ M̃(T)`.
//! Independent certificates (sign-formula and integral-identity checks,
//! re-propagation, a brute-force schedule search, and Gramian steering)
//! validate every solver output.

pub mod dualopt;
pub mod emit;
pub mod model;
pub mod odeflow;
pub mod steering;
pub mod synthesis;
pub mod timeopt;
pub mod verify;

pub use model::{parse_problem, serialize_problem, validate_spec, ProblemSpec};
