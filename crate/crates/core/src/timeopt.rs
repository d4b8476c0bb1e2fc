//! Bisection construction of the optimal time `t*(M)` and the time-optimal
//! control.
//!
//! `T ↦ M̃(T)` is strictly decreasing and continuous with limits `+∞` at
//! `0⁺` and `0` at `+∞`, and `t*(·)` is its inverse. Starting from a bracket
//! `[0, K·t0]` with `M̃(K·t0) < M`, the midpoint rule
//! `[a_n, b_n] = [t_n, b_{n−1}]` if `M̃(t_n) > M`, else `[a_{n−1}, t_n]`
//! halves the bracket each step and `t_n → t*(M)`; the norm-optimal control
//! at the final horizon, extended by zero, is the time-optimal control with
//! levels `k_i·M`. The left endpoint `a_0 = 0` is a formal bracket only
//! (`M̃(0⁺) = +∞`) and is never evaluated.

use thiserror::Error;

use crate::model::{validate_spec, ProblemSpec};
use crate::odeflow::DualBasis;
use crate::synthesis::{
    synthesize_on, BangBangControl, NormOptResult, Provenance, SynthesisError, SynthesisOptions,
};
use crate::verify::{check_time_optimality, OptimalityReport, Verdict, VerifyError};

#[derive(Debug, Error)]
pub enum TimeOptError {
    #[error(
        "no horizon K·t0 with M-tilde below {bound} within K <= {k_max} \
         (last value {last_m:.6e}); M-tilde does decay to zero as T grows, \
         so either the bound is too small for this cap or the rank heuristic failed"
    )]
    HorizonExhausted { bound: f64, k_max: usize, last_m: f64 },
    #[error("bisection did not converge within {n_max} iterations")]
    MaxIterations { n_max: usize },
    #[error("optimality verification rejected the solver output")]
    VerificationFailed {
        report: Box<OptimalityReport>,
        result: Box<TimeOptResult>,
    },
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// One evaluated bisection iterate; `a`, `b` are the bracket after the
/// update at step `n`.
#[derive(Debug, Clone, Copy)]
pub struct TraceEntry {
    pub n: usize,
    pub t: f64,
    pub m_tilde: f64,
    pub a: f64,
    pub b: f64,
}

/// Full record of a bisection run.
#[derive(Debug, Clone)]
pub struct BisectionTrace {
    pub t0: f64,
    /// Horizon multiplier `K` with `M̃(K·t0) < M`.
    pub horizon_multiplier: usize,
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
}

/// Optimal-time solve output.
#[derive(Debug, Clone)]
pub struct TimeOptResult {
    pub bound: f64,
    pub t_star: f64,
    /// Time-optimal control: the norm-optimal control at `t_star` with
    /// levels rescaled to `k_i·M`.
    pub control: BangBangControl,
    pub trace: BisectionTrace,
    /// `M̃(t_star)` as recomputed at the final iterate.
    pub m_check: f64,
    /// Norm-optimal synthesis at `t_star` (carries the minimizer and the
    /// terminal residual).
    pub norm_result: NormOptResult,
    /// Filled by [`solve_time_optimal`].
    pub verification: Option<OptimalityReport>,
}

/// Options for the bisection.
#[derive(Debug, Clone)]
pub struct TimeOptOptions {
    /// Initial horizon step (the paper leaves it arbitrary).
    pub t0: f64,
    pub k_max: usize,
    /// Bracket-width stop; defaults to `1e-6·max(1, t0)`.
    pub tol_t: Option<f64>,
    /// Early exit when `|M̃(t_n) − M| ≤ tol_m`; defaults to `1e-6·M`.
    pub tol_m: Option<f64>,
    pub n_max: usize,
    pub synthesis: SynthesisOptions,
}

impl Default for TimeOptOptions {
    fn default() -> Self {
        TimeOptOptions {
            t0: 1.0,
            k_max: 64,
            tol_t: None,
            tol_m: None,
            n_max: 200,
            synthesis: SynthesisOptions::default(),
        }
    }
}

/// Least `K` with `M̃(K·t0) < M` (strict, matching the construction).
/// Returns the count plus the synthesis at `K·t0` for warm starting.
pub fn find_horizon_k(
    spec: &ProblemSpec,
    bound: f64,
    t0: f64,
    k_max: usize,
) -> Result<(usize, NormOptResult), TimeOptError> {
    assert!(bound > 0.0 && t0 > 0.0 && k_max >= 1);
    let mut opts = SynthesisOptions::default();
    let mut last_m = f64::INFINITY;
    for k in 1..=k_max {
        let horizon = k as f64 * t0;
        let res = synthesize_norm_optimal_warm(spec, horizon, &opts)?;
        last_m = res.m_tilde;
        opts.warm_start = Some(res.minimizer.phi_hat_t.clone());
        if res.m_tilde < bound {
            return Ok((k, res));
        }
    }
    Err(TimeOptError::HorizonExhausted {
        bound,
        k_max,
        last_m,
    })
}

fn synthesize_norm_optimal_warm(
    spec: &ProblemSpec,
    horizon: f64,
    opts: &SynthesisOptions,
) -> Result<NormOptResult, SynthesisError> {
    let basis = DualBasis::build(spec, horizon, &opts.ode)?;
    synthesize_on(spec, &basis, opts)
}

/// Outcome of the bracket iteration alone.
pub(crate) struct BisectCore {
    pub t_star: f64,
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
}

/// The bracket update verbatim: `[a_n, b_n] = [t_n, b_{n-1}]` when
/// `M̃(t_n) > M`, `[a_{n-1}, t_n]` otherwise (ties go right), with early
/// exit when `|M̃(t_n) − M| ≤ tol_m` and the bracket-width stop `tol_t`.
pub(crate) fn bisect_core<E>(
    bound: f64,
    bracket_hi: f64,
    tol_t: f64,
    tol_m: f64,
    n_max: usize,
    mut eval: impl FnMut(f64) -> Result<f64, E>,
) -> Result<BisectCore, E> {
    let mut a = 0.0f64;
    let mut b = bracket_hi;
    let mut entries = Vec::new();
    let mut converged = false;
    let mut t_n = 0.5 * (a + b);
    for n in 1..=n_max {
        t_n = 0.5 * (a + b);
        let m_n = eval(t_n)?;
        if m_n > bound {
            a = t_n;
        } else {
            b = t_n;
        }
        entries.push(TraceEntry {
            n,
            t: t_n,
            m_tilde: m_n,
            a,
            b,
        });
        if (m_n - bound).abs() <= tol_m || b - a <= tol_t {
            converged = true;
            break;
        }
    }
    Ok(BisectCore {
        t_star: t_n,
        entries,
        converged,
    })
}

/// Runs the bisection for `t*(M)`. Stops when the bracket width reaches
/// `tol_t` or the recomputed norm matches the bound within `tol_m`,
/// whichever comes first; `t_star` is the final midpoint.
pub fn bisect_optimal_time(
    spec: &ProblemSpec,
    bound: f64,
    opts: &TimeOptOptions,
) -> Result<TimeOptResult, TimeOptError> {
    assert!(bound > 0.0, "bound must be positive");
    assert!(validate_spec(spec).ok, "spec failed validation");
    let tol_t = opts.tol_t.unwrap_or(1e-6 * opts.t0.max(1.0));
    let tol_m = opts.tol_m.unwrap_or(1e-6 * bound);

    let (k, at_cap) = find_horizon_k(spec, bound, opts.t0, opts.k_max)?;
    let mut synth_opts = opts.synthesis.clone();
    synth_opts.warm_start = Some(at_cap.minimizer.phi_hat_t.clone());
    let mut latest: Option<NormOptResult> = None;
    let core = bisect_core(
        bound,
        k as f64 * opts.t0,
        tol_t,
        tol_m,
        opts.n_max,
        |t| -> Result<f64, TimeOptError> {
            let res = synthesize_norm_optimal_warm(spec, t, &synth_opts)?;
            synth_opts.warm_start = Some(res.minimizer.phi_hat_t.clone());
            let m = res.m_tilde;
            latest = Some(res);
            Ok(m)
        },
    )?;
    if !core.converged {
        return Err(TimeOptError::MaxIterations { n_max: opts.n_max });
    }
    let t_n = core.t_star;
    let (entries, converged) = (core.entries, core.converged);

    let norm_result = latest.expect("at least one iterate");
    let m_check = norm_result.m_tilde;
    // Equivalence theorem: the norm-optimal control at t*, with levels read
    // as k_i·M, is the time-optimal control.
    let mut control = norm_result.control.clone();
    for (i, ch) in control.channels.iter_mut().enumerate() {
        ch.level = spec.k[i] * bound;
    }
    control.provenance = Provenance::TimeOptimal;

    Ok(TimeOptResult {
        bound,
        t_star: t_n,
        control,
        trace: BisectionTrace {
            t0: opts.t0,
            horizon_multiplier: k,
            entries,
            converged,
        },
        m_check,
        norm_result,
        verification: None,
    })
}

/// [`bisect_optimal_time`] plus the optimality checker on the output; the
/// report is embedded and a rejection is an error.
pub fn solve_time_optimal(
    spec: &ProblemSpec,
    bound: f64,
    opts: &TimeOptOptions,
) -> Result<TimeOptResult, TimeOptError> {
    let mut result = bisect_optimal_time(spec, bound, opts)?;
    let report = check_time_optimality(spec, bound, result.t_star, &result.control)?;
    let accepted = report.verdict == Verdict::Accept;
    result.verification = Some(report);
    if !accepted {
        let report = result.verification.clone().unwrap();
        return Err(TimeOptError::VerificationFailed {
            report: Box::new(report),
            result: Box::new(result),
        });
    }
    Ok(result)
}

/// Round-trip deviations of the mutually inverse maps: `t*(M̃(T))` against
/// `T` and `M̃(t*(M))` against `M`.
#[derive(Debug, Clone)]
pub struct RoundTripReport {
    pub per_horizon: Vec<RoundTripHorizon>,
    pub per_bound: Vec<RoundTripBound>,
    pub max_horizon_dev: f64,
    pub max_bound_dev: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RoundTripHorizon {
    pub horizon: f64,
    pub m_tilde: f64,
    pub t_back: f64,
    pub rel_dev: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RoundTripBound {
    pub bound: f64,
    pub t_star: f64,
    pub m_back: f64,
    pub rel_dev: f64,
}

pub fn roundtrip_check(
    spec: &ProblemSpec,
    horizons: &[f64],
    bounds: &[f64],
    opts: &TimeOptOptions,
) -> Result<RoundTripReport, TimeOptError> {
    let mut per_horizon = Vec::with_capacity(horizons.len());
    let mut max_horizon_dev = 0.0f64;
    for &horizon in horizons {
        let m_tilde =
            synthesize_norm_optimal_warm(spec, horizon, &opts.synthesis)?.m_tilde;
        let t_back = bisect_optimal_time(spec, m_tilde, opts)?.t_star;
        let rel_dev = (t_back - horizon).abs() / horizon;
        max_horizon_dev = max_horizon_dev.max(rel_dev);
        per_horizon.push(RoundTripHorizon {
            horizon,
            m_tilde,
            t_back,
            rel_dev,
        });
    }
    let mut per_bound = Vec::with_capacity(bounds.len());
    let mut max_bound_dev = 0.0f64;
    for &bound in bounds {
        let t_star = bisect_optimal_time(spec, bound, opts)?.t_star;
        let m_back = synthesize_norm_optimal_warm(spec, t_star, &opts.synthesis)?.m_tilde;
        let rel_dev = (m_back - bound).abs() / bound;
        max_bound_dev = max_bound_dev.max(rel_dev);
        per_bound.push(RoundTripBound {
            bound,
            t_star,
            m_back,
            rel_dev,
        });
    }
    Ok(RoundTripReport {
        per_horizon,
        per_bound,
        max_horizon_dev,
        max_bound_dev,
    })
}
