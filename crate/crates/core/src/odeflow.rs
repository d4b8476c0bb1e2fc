//! Flows of the primal and dual equations, trajectory propagation, and
//! kink-aware quadrature of absolute pairing integrals.
//!
//! The primal fundamental matrix solves `∂_t Φ(t,s) = −A(t) Φ(t,s)`,
//! `Φ(s,s) = I` (the system is `y' + A(t)y = Σ b_i u^i`); the dual one
//! solves `∂_t Ψ(t,s) = A*(t) Ψ(t,s)`. The two pair up as
//! `Φ(t,s)ᵀ Ψ(t,s) = I`, which also gives `Ψ(s,T) = Φ(T,s)ᵀ` — a single
//! stored trajectory of `Ψ(·,T)` therefore serves dual solutions, pairing
//! signals, Gramian integrands, and steering kernels alike.
//!
//! Integration is classical fixed-step RK4 with one-or-more Richardson
//! step-halving checks; systems here are small, smooth, and non-stiff, and
//! the fixed grid keeps every run bit-reproducible.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::ProblemSpec;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error(
        "integrator tolerance not met: discrepancy {achieved:.3e} > {tol:.3e} at {steps} steps"
    )]
    ToleranceNotMet {
        achieved: f64,
        tol: f64,
        steps: usize,
    },
}

/// Integrator controls. `tol_ode` bounds the Richardson discrepancy between
/// an `n`-step and a `2n`-step run; the step count doubles until it holds.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub tol_ode: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { tol_ode: 1e-10 }
    }
}

/// Base step count for a span: `max(2048, ceil(span·256))`.
pub fn base_steps(span: f64) -> usize {
    2048usize.max((span.abs() * 256.0).ceil() as usize)
}

const MAX_REFINEMENTS: u32 = 4;

/// Relative width (times the horizon) to which pairing sign changes are
/// localized by bisection.
pub const KINK_WIDTH_REL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// RK4 core
// ---------------------------------------------------------------------------

fn rk4_step<F>(f: &F, t: f64, h: f64, x: &DMatrix<f64>) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn integrate_end<F>(f: &F, t0: f64, t1: f64, x0: &DMatrix<f64>, n: usize) -> DMatrix<f64>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let h = (t1 - t0) / n as f64;
    let mut x = x0.clone();
    for k in 0..n {
        x = rk4_step(f, t0 + k as f64 * h, h, &x);
    }
    x
}

fn integrate_path<F>(f: &F, t0: f64, t1: f64, x0: &DMatrix<f64>, n: usize) -> Vec<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let h = (t1 - t0) / n as f64;
    let mut path = Vec::with_capacity(n + 1);
    path.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..n {
        x = rk4_step(f, t0 + k as f64 * h, h, &x);
        path.push(x.clone());
    }
    path
}

/// Integrates with Richardson refinement: the returned path uses `2n` steps
/// where `n` is the first count whose halving discrepancy meets `tol`.
fn integrate_refined<F>(
    f: &F,
    t0: f64,
    t1: f64,
    x0: &DMatrix<f64>,
    base: usize,
    tol: f64,
) -> Result<(Vec<DMatrix<f64>>, usize), OdeError>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let mut n = base.max(2);
    let mut achieved = f64::INFINITY;
    for _ in 0..=MAX_REFINEMENTS {
        let coarse_end = integrate_end(f, t0, t1, x0, n);
        let fine = integrate_path(f, t0, t1, x0, 2 * n);
        achieved = (fine.last().unwrap() - &coarse_end).amax();
        if achieved <= tol {
            return Ok((fine, 2 * n));
        }
        n *= 2;
    }
    Err(OdeError::ToleranceNotMet {
        achieved,
        tol,
        steps: n,
    })
}

// ---------------------------------------------------------------------------
// Transition matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Primal,
    Dual,
}

/// Fundamental matrix of the primal or dual equation between two times.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub value: DMatrix<f64>,
    pub from: f64,
    pub to: f64,
    pub kind: FlowKind,
}

/// Computes `Φ(t,s)` (primal) or `Ψ(t,s)` (dual). `t = s` returns the
/// identity exactly; `t < s` integrates backward.
pub fn transition(
    spec: &ProblemSpec,
    s: f64,
    t: f64,
    kind: FlowKind,
) -> Result<TransitionMatrix, OdeError> {
    transition_opts(spec, s, t, kind, &OdeOptions::default())
}

pub fn transition_opts(
    spec: &ProblemSpec,
    s: f64,
    t: f64,
    kind: FlowKind,
    opts: &OdeOptions,
) -> Result<TransitionMatrix, OdeError> {
    let eye = DMatrix::identity(spec.m, spec.m);
    if t == s {
        return Ok(TransitionMatrix {
            value: eye,
            from: s,
            to: t,
            kind,
        });
    }
    let f = |tau: f64, x: &DMatrix<f64>| -> DMatrix<f64> {
        let a = spec.eval_a(tau);
        match kind {
            FlowKind::Primal => -&a * x,
            FlowKind::Dual => a.transpose() * x,
        }
    };
    let (path, _) = integrate_refined(&f, s, t, &eye, base_steps(t - s), opts.tol_ode)?;
    Ok(TransitionMatrix {
        value: path.into_iter().last().unwrap(),
        from: s,
        to: t,
        kind,
    })
}

// ---------------------------------------------------------------------------
// Dual basis: Ψ(·,T) sampled on a uniform grid
// ---------------------------------------------------------------------------

/// The dual fundamental matrix `Ψ(t,T)` sampled over `[0,T]`, plus the
/// per-channel pairing generators `e_i(t) = Ψ(t,T)ᵀ b_i` (so the pairing of
/// any dual solution with datum `x` is `⟨e_i(t), x⟩`, and `Φ(T,t) b_i =
/// e_i(t)` as well).
#[derive(Debug, Clone)]
pub struct DualBasis {
    horizon: f64,
    step: f64,
    grid: Vec<f64>,
    psi: Vec<DMatrix<f64>>,
    generators: Vec<Vec<DVector<f64>>>,
}

impl DualBasis {
    pub fn build(spec: &ProblemSpec, horizon: f64, opts: &OdeOptions) -> Result<Self, OdeError> {
        assert!(horizon > 0.0, "horizon must be positive");
        // Integrate X(τ) = Ψ(T−τ, T) forward in the reversed variable:
        // X' = −A*(T−τ) X, X(0) = I.
        let f = |tau: f64, x: &DMatrix<f64>| -> DMatrix<f64> {
            -spec.eval_a(horizon - tau).transpose() * x
        };
        let eye = DMatrix::identity(spec.m, spec.m);
        let (mut path, n) =
            integrate_refined(&f, 0.0, horizon, &eye, base_steps(horizon), opts.tol_ode)?;
        path.reverse(); // ascending t
        let step = horizon / n as f64;
        let grid: Vec<f64> = (0..=n)
            .map(|j| {
                if j == 0 {
                    0.0
                } else if j == n {
                    horizon
                } else {
                    j as f64 * step
                }
            })
            .collect();
        let generators = (0..spec.d)
            .map(|i| path.iter().map(|psi| psi.transpose() * &spec.b[i]).collect())
            .collect();
        Ok(DualBasis {
            horizon,
            step,
            grid,
            psi: path,
            generators,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    /// `Ψ(t_j, T)` at grid node `j`.
    pub fn psi_node(&self, j: usize) -> &DMatrix<f64> {
        &self.psi[j]
    }

    /// `Ψ(0, T)` — maps terminal dual data to initial dual states.
    pub fn end_matrix(&self) -> &DMatrix<f64> {
        &self.psi[0]
    }

    /// Pairing generator `e_i(t_j)` for channel `i` at node `j`.
    pub fn generator(&self, channel: usize, j: usize) -> &DVector<f64> {
        &self.generators[channel][j]
    }

    fn node_left_of(&self, t: f64) -> usize {
        let j = (t / self.step).floor() as isize;
        j.clamp(0, self.grid.len() as isize - 2) as usize
    }

    /// `Ψ(t, T)` anywhere in `[0, T]`, by two local RK4 steps of the dual
    /// matrix equation from the nearest grid node at or below `t` — the
    /// basis is never polynomially interpolated.
    pub fn psi_at(&self, spec: &ProblemSpec, t: f64) -> DMatrix<f64> {
        let j = self.node_left_of(t);
        let t_j = self.grid[j];
        if t == t_j {
            return self.psi[j].clone();
        }
        let f =
            |tau: f64, x: &DMatrix<f64>| -> DMatrix<f64> { spec.eval_a(tau).transpose() * x };
        let h = (t - t_j) / 2.0;
        let mid = rk4_step(&f, t_j, h, &self.psi[j]);
        rk4_step(&f, t_j + h, h, &mid)
    }

    /// Dual state `φ(t) = Ψ(t,T)·x` for terminal datum `x`.
    pub fn dual_state_at(&self, spec: &ProblemSpec, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.psi_at(spec, t) * x
    }

    /// Pairing `⟨b_i, φ(t)⟩ = ⟨e_i(t), x⟩` at an arbitrary time.
    pub fn pairing_at(&self, spec: &ProblemSpec, channel: usize, x: &DVector<f64>, t: f64) -> f64 {
        (self.psi_at(spec, t).transpose() * &spec.b[channel]).dot(x)
    }

    /// Pairing at a grid node (no integration).
    pub fn pairing_node(&self, channel: usize, x: &DVector<f64>, j: usize) -> f64 {
        self.generators[channel][j].dot(x)
    }

    /// Time derivative of the pairing, `ṗ_i(t) = ⟨A(t) b_i, φ(t)⟩`.
    pub fn pairing_slope_at(
        &self,
        spec: &ProblemSpec,
        channel: usize,
        x: &DVector<f64>,
        t: f64,
    ) -> f64 {
        let phi = self.dual_state_at(spec, x, t);
        (spec.eval_a(t) * &spec.b[channel]).dot(&phi)
    }
}

// ---------------------------------------------------------------------------
// Dual trajectories
// ---------------------------------------------------------------------------

/// Sampled solution of the dual equation with terminal datum `phi_terminal`,
/// together with the per-channel pairings `⟨b_i, φ(t)⟩` recomputed at every
/// node.
#[derive(Debug, Clone)]
pub struct DualTrajectory {
    pub horizon: f64,
    pub phi_terminal: DVector<f64>,
    pub grid: Vec<f64>,
    pub phi: Vec<DVector<f64>>,
    /// `pairings[i][j] = ⟨b_i, φ(grid[j])⟩`.
    pub pairings: Vec<Vec<f64>>,
}

impl DualTrajectory {
    fn node_left_of(&self, t: f64) -> usize {
        let step = self.horizon / (self.grid.len() - 1) as f64;
        let j = (t / step).floor() as isize;
        j.clamp(0, self.grid.len() as isize - 2) as usize
    }

    /// `φ(t)` anywhere in `[0, T]`, by two local RK4 steps of `φ' = A*(t)φ`
    /// from the nearest sample at or below `t`.
    pub fn phi_at(&self, spec: &ProblemSpec, t: f64) -> DVector<f64> {
        let j = self.node_left_of(t);
        let t_j = self.grid[j];
        if t == t_j {
            return self.phi[j].clone();
        }
        let f =
            |tau: f64, x: &DMatrix<f64>| -> DMatrix<f64> { spec.eval_a(tau).transpose() * x };
        let as_mat = DMatrix::from_column_slice(self.phi[j].len(), 1, self.phi[j].as_slice());
        let h = (t - t_j) / 2.0;
        let mid = rk4_step(&f, t_j, h, &as_mat);
        let end = rk4_step(&f, t_j + h, h, &mid);
        DVector::from_column_slice(end.as_slice())
    }

    /// `⟨b_i, φ(t)⟩` at an arbitrary time.
    pub fn pairing_at(&self, spec: &ProblemSpec, channel: usize, t: f64) -> f64 {
        spec.b[channel].dot(&self.phi_at(spec, t))
    }
}

/// Solves the dual equation backward from `φ(T) = phi_T` (by forward
/// integration in the reversed time variable).
pub fn solve_dual(
    spec: &ProblemSpec,
    horizon: f64,
    phi_t: &DVector<f64>,
) -> Result<DualTrajectory, OdeError> {
    solve_dual_opts(spec, horizon, phi_t, &OdeOptions::default())
}

pub fn solve_dual_opts(
    spec: &ProblemSpec,
    horizon: f64,
    phi_t: &DVector<f64>,
    opts: &OdeOptions,
) -> Result<DualTrajectory, OdeError> {
    assert!(horizon > 0.0, "horizon must be positive");
    let f = |tau: f64, x: &DMatrix<f64>| -> DMatrix<f64> {
        -spec.eval_a(horizon - tau).transpose() * x
    };
    let x0 = DMatrix::from_column_slice(spec.m, 1, phi_t.as_slice());
    let (mut path, n) =
        integrate_refined(&f, 0.0, horizon, &x0, base_steps(horizon), opts.tol_ode)?;
    path.reverse();
    let step = horizon / n as f64;
    let grid: Vec<f64> = (0..=n)
        .map(|j| {
            if j == 0 {
                0.0
            } else if j == n {
                horizon
            } else {
                j as f64 * step
            }
        })
        .collect();
    let phi: Vec<DVector<f64>> = path
        .into_iter()
        .map(|col| DVector::from_column_slice(col.as_slice()))
        .collect();
    let pairings = (0..spec.d)
        .map(|i| phi.iter().map(|p| spec.b[i].dot(p)).collect())
        .collect();
    Ok(DualTrajectory {
        horizon,
        phi_terminal: phi_t.clone(),
        grid,
        phi,
        pairings,
    })
}

// ---------------------------------------------------------------------------
// Primal propagation
// ---------------------------------------------------------------------------

/// A control signal defined almost everywhere on the horizon. Breakpoints
/// are interior discontinuities; the integrator restarts at each so that no
/// step straddles one.
pub trait ControlSignal {
    fn dim(&self) -> usize;
    fn value(&self, t: f64) -> DVector<f64>;
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// The zero control.
pub struct ZeroControl {
    pub dim: usize,
}

impl ControlSignal for ZeroControl {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _t: f64) -> DVector<f64> {
        DVector::zeros(self.dim)
    }
}

/// A control given by a closure (used for smooth analytic controls such as
/// Gramian steering kernels).
pub struct FnControl<F: Fn(f64) -> DVector<f64>> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64) -> DVector<f64>> ControlSignal for FnControl<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64) -> DVector<f64> {
        (self.f)(t)
    }
}

/// Sampled state trajectory of the controlled system.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    pub terminal_norm: f64,
}

impl Trajectory {
    pub fn terminal(&self) -> &DVector<f64> {
        self.y.last().unwrap()
    }
}

/// Propagates `y' = −A(t) y + Σ b_i u^i(t)` from `y(start) = y0` over
/// `[start, end]`, restarting at every control breakpoint.
pub fn propagate_primal(
    spec: &ProblemSpec,
    y0: &DVector<f64>,
    control: &dyn ControlSignal,
    horizon: f64,
) -> Result<Trajectory, OdeError> {
    propagate_primal_opts(spec, y0, control, 0.0, horizon, &OdeOptions::default())
}

pub fn propagate_primal_opts(
    spec: &ProblemSpec,
    y0: &DVector<f64>,
    control: &dyn ControlSignal,
    start: f64,
    end: f64,
    opts: &OdeOptions,
) -> Result<Trajectory, OdeError> {
    assert!(end > start, "empty propagation interval");
    assert_eq!(control.dim(), spec.d, "control dimension mismatch");
    let span = end - start;
    let mut cuts: Vec<f64> = control
        .breakpoints()
        .into_iter()
        .filter(|&t| t > start && t < end)
        .collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();
    let mut panels = Vec::with_capacity(cuts.len() + 1);
    let mut lo = start;
    for c in cuts {
        panels.push((lo, c));
        lo = c;
    }
    panels.push((lo, end));

    let b_mat = spec.b_matrix();
    let base = base_steps(span);
    let run = |mult: usize| -> (Vec<f64>, Vec<DVector<f64>>) {
        let mut grid = vec![start];
        let mut states = vec![y0.clone()];
        let mut y = DMatrix::from_column_slice(spec.m, 1, y0.as_slice());
        for &(a, b) in &panels {
            // RK4 stages may touch the panel's right endpoint (or overshoot
            // it by rounding); the control there must be read from the left
            // so the discontinuity stays outside the panel.
            let inner_end = b.next_down();
            let rhs = |t: f64, y: &DMatrix<f64>| -> DMatrix<f64> {
                let u = control.value(t.min(inner_end));
                let forced = &b_mat * u;
                -spec.eval_a(t) * y + DMatrix::from_column_slice(spec.m, 1, forced.as_slice())
            };
            let n = (((b - a) / span * base as f64).ceil() as usize).max(16) * mult;
            let h = (b - a) / n as f64;
            for k in 0..n {
                y = rk4_step(&rhs, a + k as f64 * h, h, &y);
                let t = if k + 1 == n { b } else { a + (k + 1) as f64 * h };
                grid.push(t);
                states.push(DVector::from_column_slice(y.as_slice()));
            }
        }
        (grid, states)
    };

    let mut mult = 1;
    let mut achieved = f64::INFINITY;
    for _ in 0..=MAX_REFINEMENTS {
        let (_, coarse) = run(mult);
        let (grid, fine) = run(2 * mult);
        achieved = (fine.last().unwrap() - coarse.last().unwrap()).amax();
        if achieved <= opts.tol_ode {
            let terminal_norm = fine.last().unwrap().norm();
            return Ok(Trajectory {
                grid,
                y: fine,
                terminal_norm,
            });
        }
        mult *= 2;
    }
    Err(OdeError::ToleranceNotMet {
        achieved,
        tol: opts.tol_ode,
        steps: base * mult,
    })
}

// ---------------------------------------------------------------------------
// Kink localization and quadrature
// ---------------------------------------------------------------------------

/// Refines a bracketed sign change of `f` to width `width` by bisection.
/// `f(lo)` and `f(hi)` must have opposite (nonzero) signs.
pub(crate) fn bisect_crossing<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, width: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = f(lo);
    for _ in 0..80 {
        if hi - lo <= width {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return mid;
        }
        if (f_lo > 0.0) == (f_mid > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Finds all sign changes of a sampled signal, refining each bracketed
/// crossing with `refine` (a pointwise evaluator of the same signal).
pub(crate) fn locate_sign_changes<F: Fn(f64) -> f64>(
    grid: &[f64],
    samples: &[f64],
    refine: &F,
    width: f64,
) -> Vec<f64> {
    let mut crossings = Vec::new();
    for j in 0..grid.len() - 1 {
        let (v0, v1) = (samples[j], samples[j + 1]);
        if v0 == 0.0 {
            if j == 0 || samples[j - 1] != 0.0 {
                crossings.push(grid[j]);
            }
            continue;
        }
        if v1 == 0.0 {
            continue; // recorded when the next panel starts there
        }
        if (v0 > 0.0) != (v1 > 0.0) {
            crossings.push(bisect_crossing(refine, grid[j], grid[j + 1], width));
        }
    }
    if let Some(&last) = samples.last() {
        if last == 0.0 && samples.len() >= 2 && samples[samples.len() - 2] != 0.0 {
            crossings.push(*grid.last().unwrap());
        }
    }
    crossings
}

/// Simpson's rule on `[a, b]` given endpoint and midpoint values.
fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Composite Simpson over consecutive node pairs (odd nodes act as panel
/// midpoints), splitting any panel that contains a breakpoint so that no
/// quadrature panel spans one. `node_value` reads the integrand at a grid
/// node; `point_value` evaluates it anywhere (used only near breakpoints).
pub(crate) fn integrate_with_breakpoints(
    grid: &[f64],
    breakpoints: &[f64],
    sliver: f64,
    node_value: &dyn Fn(usize) -> f64,
    point_value: &dyn Fn(f64) -> f64,
) -> f64 {
    debug_assert!(grid.len() % 2 == 1, "pair-panel rule needs an even step count");
    let mut total = 0.0;
    let mut next_cut = 0usize;
    let mut j = 0;
    while j + 2 < grid.len() {
        let (a, b) = (grid[j], grid[j + 2]);
        while next_cut < breakpoints.len() && breakpoints[next_cut] <= a {
            next_cut += 1;
        }
        let mut inside = Vec::new();
        let mut probe = next_cut;
        while probe < breakpoints.len() && breakpoints[probe] < b {
            inside.push(breakpoints[probe]);
            probe += 1;
        }
        if inside.is_empty() {
            total += simpson(a, b, node_value(j), node_value(j + 1), node_value(j + 2));
        } else {
            let mut bounds = Vec::with_capacity(inside.len() + 2);
            bounds.push(a);
            bounds.extend(inside);
            bounds.push(b);
            for w in bounds.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                if hi - lo <= sliver {
                    total += 0.5 * (hi - lo) * (point_value(lo) + point_value(hi));
                } else {
                    total += simpson(
                        lo,
                        hi,
                        point_value(lo),
                        point_value(0.5 * (lo + hi)),
                        point_value(hi),
                    );
                }
            }
        }
        j += 2;
    }
    if j + 1 < grid.len() {
        // Odd trailing step (even node count): close with one Simpson panel.
        let (a, b) = (grid[j], grid[j + 1]);
        total += simpson(a, b, node_value(j), point_value(0.5 * (a + b)), node_value(j + 1));
    }
    total
}

/// Integrates `∫₀ᵀ Σ_i k_i |⟨b_i, φ(t)⟩| dt` over a dual trajectory.
///
/// Every sign change of every channel pairing is localized by bisection and
/// inserted as a panel boundary, so no quadrature panel spans a kink;
/// pairing values off the grid come from local integration of the dual
/// equation, never from interpolation through a kink.
pub fn kink_integral(spec: &ProblemSpec, traj: &DualTrajectory, weights: &[f64]) -> f64 {
    assert_eq!(weights.len(), spec.d, "one weight per channel");
    let width = KINK_WIDTH_REL * traj.horizon;
    let mut crossings = Vec::new();
    for i in 0..spec.d {
        let refine = |t: f64| traj.pairing_at(spec, i, t);
        crossings.extend(locate_sign_changes(
            &traj.grid,
            &traj.pairings[i],
            &refine,
            width,
        ));
    }
    crossings.sort_by(|x, y| x.partial_cmp(y).unwrap());
    crossings.dedup_by(|a, b| (*a - *b).abs() <= width);

    let node_value = |j: usize| -> f64 {
        (0..spec.d)
            .map(|i| weights[i] * traj.pairings[i][j].abs())
            .sum()
    };
    let point_value = |t: f64| -> f64 {
        let phi = traj.phi_at(spec, t);
        (0..spec.d)
            .map(|i| weights[i] * spec.b[i].dot(&phi).abs())
            .sum()
    };
    integrate_with_breakpoints(&traj.grid, &crossings, width, &node_value, &point_value)
}
