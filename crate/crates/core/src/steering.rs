//! Gramian-based null steering on a subinterval.
//!
//! The controllability Gramian `W(τ,T) = ∫_τ^T Φ(T,s) b bᵀ Φ(T,s)ᵀ ds` of a
//! single channel is positive definite when the channel can steer, and
//! `u(t) = −bᵀ Φ(T,t)ᵀ W(τ,T)⁻¹ Φ(T,τ) z0` drives `y(τ) = z0` to the origin
//! at `T` with `‖u‖_∞ ≤ C‖z0‖`. Feasibility probes and admissible-control
//! generation both go through this construction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::ProblemSpec;
use crate::odeflow::{
    propagate_primal_opts, DualBasis, FnControl, OdeError, OdeOptions,
};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error(
        "singular controllability Gramian: min eigenvalue {min_eigenvalue:.3e} \
         vs trace {trace:.3e}"
    )]
    SingularGramian { min_eigenvalue: f64, trace: f64 },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// A single-channel controllability Gramian over `[tau, horizon]`.
#[derive(Debug, Clone)]
pub struct GramianResult {
    pub w: DMatrix<f64>,
    pub tau: f64,
    pub horizon: f64,
    pub min_eigenvalue: f64,
}

/// Steering control and its certificates.
#[derive(Debug, Clone)]
pub struct SteerResult {
    pub tau: f64,
    pub horizon: f64,
    pub channel: usize,
    /// Sample grid on `[tau, horizon]` and the control values there.
    pub grid: Vec<f64>,
    pub samples: Vec<f64>,
    pub sup_norm: f64,
    /// Numerical evaluation of the Lemma bound
    /// `‖bᵀΦ(T,·)ᵀ‖_∞ · ‖W⁻¹‖ · ‖Φ(T,τ)‖`.
    pub bound_c: f64,
    /// `‖y(T)‖` from re-propagation under the steering control.
    pub terminal_norm: f64,
}

/// Computes the channel Gramian by quadrature on the transition grid,
/// symmetrized by averaging. Fails when the smallest eigenvalue is at or
/// below `1e-12·trace`.
pub fn gramian(
    spec: &ProblemSpec,
    tau: f64,
    horizon: f64,
    channel: usize,
) -> Result<GramianResult, SteeringError> {
    let basis = DualBasis::build(spec, horizon, &OdeOptions::default())?;
    gramian_on(spec, &basis, tau, channel)
}

fn gramian_on(
    spec: &ProblemSpec,
    basis: &DualBasis,
    tau: f64,
    channel: usize,
) -> Result<GramianResult, SteeringError> {
    let horizon = basis.horizon();
    assert!(
        (0.0..horizon).contains(&tau),
        "need 0 <= tau < horizon"
    );
    assert!(channel < spec.d, "channel out of range");
    let grid = basis.grid();
    let outer = |e: &DVector<f64>| e * e.transpose();
    let point_outer = |t: f64| {
        let e = basis.psi_at(spec, t).transpose() * &spec.b[channel];
        outer(&e)
    };

    // Partial panel [tau, first node], then pair-panels on the stored grid.
    let mut j_start = grid.partition_point(|&t| t < tau);
    let mut w = DMatrix::zeros(spec.m, spec.m);
    if j_start < grid.len() && grid[j_start] > tau {
        let (a, b) = (tau, grid[j_start]);
        let mid = 0.5 * (a + b);
        w += (point_outer(a) + point_outer(mid) * 4.0 + point_outer(b)) * ((b - a) / 6.0);
    }
    while j_start + 2 < grid.len() {
        let (a, b) = (grid[j_start], grid[j_start + 2]);
        w += (outer(basis.generator(channel, j_start))
            + outer(basis.generator(channel, j_start + 1)) * 4.0
            + outer(basis.generator(channel, j_start + 2)))
            * ((b - a) / 6.0);
        j_start += 2;
    }
    if j_start + 1 < grid.len() {
        let (a, b) = (grid[j_start], grid[j_start + 1]);
        w += (outer(basis.generator(channel, j_start))
            + point_outer(0.5 * (a + b)) * 4.0
            + outer(basis.generator(channel, j_start + 1)))
            * ((b - a) / 6.0);
    }
    let w = (&w + w.transpose()) * 0.5;

    let eigen = w.clone().symmetric_eigen();
    let min_eigenvalue = eigen.eigenvalues.min();
    let trace = w.trace();
    if min_eigenvalue <= 1e-12 * trace {
        return Err(SteeringError::SingularGramian {
            min_eigenvalue,
            trace,
        });
    }
    Ok(GramianResult {
        w,
        tau,
        horizon,
        min_eigenvalue,
    })
}

/// Builds the explicit null-steering control for `y(tau) = z0` on the given
/// channel and verifies it by re-propagation.
pub fn steer_to_zero(
    spec: &ProblemSpec,
    tau: f64,
    horizon: f64,
    z0: &DVector<f64>,
    channel: usize,
) -> Result<SteerResult, SteeringError> {
    let basis = DualBasis::build(spec, horizon, &OdeOptions::default())?;
    let gram = gramian_on(spec, &basis, tau, channel)?;
    let chol = gram
        .w
        .clone()
        .cholesky()
        .expect("Gramian passed the eigenvalue gate");
    // κ = W(τ,T)⁻¹ Φ(T,τ) z0, so that u(t) = −⟨Φ(T,t)b, κ⟩.
    let phi_t_tau = basis.psi_at(spec, tau).transpose();
    let kappa = chol.solve(&(&phi_t_tau * z0));

    let basis_ref = &basis;
    let kappa_ref = &kappa;
    let control_at = move |t: f64| -> f64 {
        let e = basis_ref.psi_at(spec, t).transpose() * &spec.b[channel];
        -e.dot(kappa_ref)
    };

    // Samples on the stored grid restricted to [tau, T] (plus tau itself).
    let mut grid: Vec<f64> = Vec::new();
    let mut samples = Vec::new();
    if basis.grid().first().map_or(false, |&g| g < tau) || tau > 0.0 {
        grid.push(tau);
        samples.push(control_at(tau));
    }
    for (j, &t) in basis.grid().iter().enumerate() {
        if t < tau || (t == tau && !grid.is_empty()) {
            continue;
        }
        grid.push(t);
        samples.push(-basis.generator(channel, j).dot(&kappa));
    }
    let sup_norm = samples.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));

    // Lemma constant, evaluated numerically.
    let sup_e = (0..basis.n_nodes())
        .map(|j| basis.generator(channel, j).norm())
        .fold(0.0f64, f64::max);
    let w_inv_norm = 1.0 / gram.min_eigenvalue;
    let phi_norm = phi_t_tau
        .clone()
        .svd(false, false)
        .singular_values
        .max();
    let bound_c = sup_e * w_inv_norm * phi_norm;

    // Independent re-propagation check from y(tau) = z0.
    let d = spec.d;
    let steer = FnControl {
        dim: d,
        f: move |t: f64| {
            let mut u = DVector::zeros(d);
            u[channel] = control_at(t);
            u
        },
    };
    let traj = propagate_primal_opts(spec, z0, &steer, tau, horizon, &OdeOptions::default())?;

    Ok(SteerResult {
        tau,
        horizon,
        channel,
        grid,
        samples,
        sup_norm,
        bound_c,
        terminal_norm: traj.terminal_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntryExpression;
    use approx::assert_relative_eq;

    fn scalar() -> ProblemSpec {
        ProblemSpec::new(
            1,
            1,
            vec![vec![EntryExpression::constant(0.0)]],
            vec![vec![1.0]],
            vec![1.0],
            vec![1.0],
        )
        .unwrap()
    }

    fn double_integrator() -> ProblemSpec {
        ProblemSpec::new(
            2,
            1,
            vec![
                vec![EntryExpression::constant(0.0), EntryExpression::constant(-1.0)],
                vec![EntryExpression::constant(0.0), EntryExpression::constant(0.0)],
            ],
            vec![vec![0.0, 1.0]],
            vec![1.0],
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn gramian_scalar_is_interval_length() {
        let spec = scalar();
        let g = gramian(&spec, 0.0, 3.0, 0).unwrap();
        assert_relative_eq!(g.w[(0, 0)], 3.0, epsilon = 1e-9);
        let g = gramian(&spec, 1.0, 3.0, 0).unwrap();
        assert_relative_eq!(g.w[(0, 0)], 2.0, epsilon = 1e-9);
        assert!(g.min_eigenvalue > 0.0);
    }

    #[test]
    fn gramian_detects_rank_deficiency() {
        // A = 0, b = (1,0): the flow never reaches the second coordinate.
        let spec = ProblemSpec::new(
            2,
            1,
            vec![
                vec![EntryExpression::constant(0.0), EntryExpression::constant(0.0)],
                vec![EntryExpression::constant(0.0), EntryExpression::constant(0.0)],
            ],
            vec![vec![1.0, 0.0]],
            vec![1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        match gramian(&spec, 0.0, 2.0, 0) {
            Err(SteeringError::SingularGramian { .. }) => {}
            other => panic!("expected singular Gramian, got {other:?}"),
        }
    }

    #[test]
    fn steer_scalar_matches_closed_form() {
        // W = T − τ and Φ ≡ 1 give u ≡ −z0/(T−τ).
        let spec = scalar();
        let res = steer_to_zero(&spec, 0.0, 2.0, &DVector::from_vec(vec![1.0]), 0).unwrap();
        for &u in &res.samples {
            assert_relative_eq!(u, -0.5, epsilon = 1e-10);
        }
        assert_relative_eq!(res.sup_norm, 0.5, epsilon = 1e-10);
        assert!(res.terminal_norm <= 1e-10);
        assert!(res.sup_norm <= res.bound_c * 1.0 + 1e-12);
    }

    #[test]
    fn steer_zero_initial_state_gives_zero_control() {
        let spec = double_integrator();
        let res = steer_to_zero(&spec, 0.0, 2.0, &DVector::zeros(2), 0).unwrap();
        assert!(res.sup_norm == 0.0);
        assert!(res.terminal_norm <= 1e-12);
    }

    #[test]
    fn steer_double_integrator() {
        let spec = double_integrator();
        let z0 = DVector::from_vec(vec![1.0, 0.0]);
        let res = steer_to_zero(&spec, 0.0, 2.0, &z0, 0).unwrap();
        assert!(res.terminal_norm <= 1e-8, "residual {}", res.terminal_norm);
        assert!(res.sup_norm.is_finite());
        assert!(res.sup_norm <= res.bound_c * z0.norm() + 1e-12);
    }

    #[test]
    fn steering_is_linear_in_initial_state() {
        let spec = double_integrator();
        let z = DVector::from_vec(vec![0.4, -0.9]);
        let a = steer_to_zero(&spec, 0.5, 2.0, &z, 0).unwrap();
        let b = steer_to_zero(&spec, 0.5, 2.0, &(&z * -2.5), 0).unwrap();
        for (ua, ub) in a.samples.iter().zip(&b.samples) {
            assert_relative_eq!(ub, &(-2.5 * ua), epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn gramian_interval_monotonicity() {
        // W(τ,T) − W(r,T) is PSD for τ < r.
        let spec = double_integrator();
        let big = gramian(&spec, 0.2, 2.0, 0).unwrap();
        let small = gramian(&spec, 0.9, 2.0, 0).unwrap();
        let diff = &big.w - &small.w;
        let eig = ((&diff + diff.transpose()) * 0.5).symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);
    }
}
