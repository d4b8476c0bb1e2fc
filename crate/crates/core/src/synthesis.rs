//! Synthesis of the norm-optimal control from a minimizer of `J^T`.
//!
//! With `φ̂` the dual solution of a minimizer and `M̃(T) = ‖φ̂_T‖_*`, the
//! optimal control is `ū^i(t) = M̃(T) · k_i · sign(⟨b_i, φ̂(t)⟩)` — exactly
//! piecewise constant under analyticity, so controls are stored
//! structurally as a level, an initial sign, and the switching times, never
//! as samples. The optimal control is unique even though the minimizer
//! need not be.

use nalgebra::DVector;
use thiserror::Error;

use crate::dualopt::{
    minimize_jt_on, DualOptError, MinimizeOptions, MinimizerResult,
};
use crate::model::{validate_spec, ProblemSpec};
use crate::odeflow::{
    locate_sign_changes, propagate_primal, solve_dual_opts, ControlSignal, DualBasis,
    DualTrajectory, OdeError, OdeOptions, KINK_WIDTH_REL,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("channel {channel}: pairing is numerically zero everywhere (|p| < 1e-14)")]
    DegeneratePairing { channel: usize },
    #[error(
        "M-tilde not strictly decreasing: M({t_lo}) = {m_lo} vs M({t_hi}) = {m_hi}"
    )]
    Monotonicity {
        t_lo: f64,
        t_hi: f64,
        m_lo: f64,
        m_hi: f64,
    },
    #[error("terminal residual {value:.3e} above tolerance {tol:.3e}")]
    TerminalResidual { value: f64, tol: f64 },
    #[error(transparent)]
    DualOpt(#[from] DualOptError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// How a control came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    NormOptimal,
    TimeOptimal,
    Manual,
}

/// One channel of a piecewise-constant control: magnitude `level`, sign
/// `initial_sign` on the first interval, alternating across `switch_times`.
#[derive(Debug, Clone)]
pub struct ChannelControl {
    pub level: f64,
    pub initial_sign: f64,
    pub switch_times: Vec<f64>,
}

/// A structural bang-bang control on `(0, horizon)`, extended by zero
/// beyond the horizon.
#[derive(Debug, Clone)]
pub struct BangBangControl {
    pub horizon: f64,
    pub channels: Vec<ChannelControl>,
    pub provenance: Provenance,
}

impl BangBangControl {
    pub fn channel_value(&self, channel: usize, t: f64) -> f64 {
        if t > self.horizon {
            return 0.0;
        }
        let ch = &self.channels[channel];
        let flips = ch.switch_times.iter().take_while(|&&s| s <= t).count();
        let sign = if flips % 2 == 0 { 1.0 } else { -1.0 };
        ch.level * ch.initial_sign * sign
    }

    /// All interior discontinuities, merged over channels.
    pub fn all_switch_times(&self) -> Vec<f64> {
        let mut cuts: Vec<f64> = self
            .channels
            .iter()
            .flat_map(|ch| ch.switch_times.iter().copied())
            .collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        cuts
    }

    /// Exact `L²(0, t_end)` distance to another control of the same channel
    /// count, both read as zero beyond their horizons.
    pub fn l2_distance(&self, other: &BangBangControl, t_end: f64) -> f64 {
        assert_eq!(self.channels.len(), other.channels.len());
        let mut cuts = vec![0.0, t_end, self.horizon.min(t_end), other.horizon.min(t_end)];
        cuts.extend(self.all_switch_times().into_iter().filter(|&t| t < t_end));
        cuts.extend(other.all_switch_times().into_iter().filter(|&t| t < t_end));
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut sq = 0.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (a + b);
            for i in 0..self.channels.len() {
                let delta = self.channel_value(i, mid) - other.channel_value(i, mid);
                sq += delta * delta * (b - a);
            }
        }
        sq.sqrt()
    }
}

impl ControlSignal for BangBangControl {
    fn dim(&self) -> usize {
        self.channels.len()
    }
    fn value(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.channels.len(), |i, _| self.channel_value(i, t))
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.all_switch_times()
    }
}

/// Non-fatal conditions observed during synthesis.
#[derive(Debug, Clone)]
pub enum SynthesisWarning {
    /// A pairing stayed below `1e-9·max|pairing|` over an interval wider
    /// than `1e-3·T`; its sign (hence the control) is ill-conditioned there.
    Normality { channel: usize, span: f64 },
    /// Halving the sample grid changes the detected switch count.
    SwitchCountUnstable {
        channel: usize,
        coarse: usize,
        fine: usize,
    },
}

/// Result of norm-optimal synthesis at a fixed horizon.
#[derive(Debug, Clone)]
pub struct NormOptResult {
    pub m_tilde: f64,
    pub control: BangBangControl,
    pub minimizer: MinimizerResult,
    pub terminal_residual: f64,
    pub warnings: Vec<SynthesisWarning>,
}

/// Options for [`synthesize_norm_optimal`].
#[derive(Debug, Clone, Default)]
pub struct SynthesisOptions {
    pub tol_el: Option<f64>,
    /// Terminal-residual acceptance; defaults to `1e-6·(1 + ‖y0‖)`.
    pub tol_terminal: Option<f64>,
    pub warm_start: Option<DVector<f64>>,
    pub ode: OdeOptions,
}

pub fn default_tol_terminal(spec: &ProblemSpec) -> f64 {
    1e-6 * (1.0 + spec.y0.norm())
}

/// Sign-change structure of one channel pairing: the sign on the first
/// panel and the refined switching times.
pub fn extract_switchings(
    spec: &ProblemSpec,
    traj: &DualTrajectory,
    channel: usize,
) -> Result<(f64, Vec<f64>), SynthesisError> {
    let samples = &traj.pairings[channel];
    let max_abs = samples.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max_abs < 1e-14 {
        return Err(SynthesisError::DegeneratePairing { channel });
    }
    let width = KINK_WIDTH_REL * traj.horizon;
    let refine = |t: f64| traj.pairing_at(spec, channel, t);
    let crossings: Vec<f64> = locate_sign_changes(&traj.grid, samples, &refine, width)
        .into_iter()
        .filter(|&t| t > width && t < traj.horizon - width)
        .collect();
    let first_cross = crossings.first().copied().unwrap_or(traj.horizon);
    let mut initial_sign = 0.0;
    let mut best = 0.0;
    for (j, &t) in traj.grid.iter().enumerate() {
        if t >= first_cross {
            break;
        }
        if samples[j].abs() > best {
            best = samples[j].abs();
            initial_sign = samples[j].signum();
        }
    }
    if initial_sign == 0.0 {
        // First panel is numerically flat; fall back to the dominant sample.
        let j_max = (0..samples.len())
            .max_by(|&a, &b| samples[a].abs().partial_cmp(&samples[b].abs()).unwrap())
            .unwrap();
        let flips_before = crossings.iter().filter(|&&s| s <= traj.grid[j_max]).count();
        initial_sign = samples[j_max].signum() * if flips_before % 2 == 0 { 1.0 } else { -1.0 };
    }
    Ok((initial_sign, crossings))
}

fn normality_warnings(traj: &DualTrajectory, d: usize) -> Vec<SynthesisWarning> {
    let mut out = Vec::new();
    for i in 0..d {
        let samples = &traj.pairings[i];
        let max_abs = samples.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let zeta = 1e-9 * max_abs;
        let mut run_start: Option<usize> = None;
        let mut worst_span = 0.0f64;
        for j in 0..=samples.len() {
            let quiet = j < samples.len() && samples[j].abs() <= zeta;
            match (quiet, run_start) {
                (true, None) => run_start = Some(j),
                (false, Some(s)) => {
                    worst_span = worst_span.max(traj.grid[j - 1] - traj.grid[s]);
                    run_start = None;
                }
                _ => {}
            }
        }
        if worst_span > 1e-3 * traj.horizon {
            out.push(SynthesisWarning::Normality {
                channel: i,
                span: worst_span,
            });
        }
    }
    out
}

fn switch_stability_warnings(
    spec: &ProblemSpec,
    traj: &DualTrajectory,
    fine_counts: &[usize],
) -> Vec<SynthesisWarning> {
    // Compare against the half-resolution subgrid: if coarsening changes the
    // detected switch count, the grid is too coarse to trust it.
    let mut out = Vec::new();
    let half_grid: Vec<f64> = traj.grid.iter().copied().step_by(2).collect();
    for i in 0..spec.d {
        let half_samples: Vec<f64> = traj.pairings[i].iter().copied().step_by(2).collect();
        let refine = |t: f64| traj.pairing_at(spec, i, t);
        let coarse = locate_sign_changes(
            &half_grid,
            &half_samples,
            &refine,
            KINK_WIDTH_REL * traj.horizon,
        )
        .len();
        if coarse != fine_counts[i] {
            out.push(SynthesisWarning::SwitchCountUnstable {
                channel: i,
                coarse,
                fine: fine_counts[i],
            });
        }
    }
    out
}

/// Synthesizes the norm-optimal control at horizon `T`: levels `k_i·M̃(T)`,
/// signs from the minimizer's pairings, terminal admissibility verified by
/// re-propagation.
pub fn synthesize_norm_optimal(
    spec: &ProblemSpec,
    horizon: f64,
) -> Result<NormOptResult, SynthesisError> {
    synthesize_norm_optimal_opts(spec, horizon, &SynthesisOptions::default())
}

pub fn synthesize_norm_optimal_opts(
    spec: &ProblemSpec,
    horizon: f64,
    opts: &SynthesisOptions,
) -> Result<NormOptResult, SynthesisError> {
    assert!(horizon > 0.0, "horizon must be positive");
    debug_assert!(validate_spec(spec).ok, "spec failed validation");
    let basis = DualBasis::build(spec, horizon, &opts.ode)?;
    synthesize_on(spec, &basis, opts)
}

/// Synthesis over a prebuilt dual basis (shared with the bisection loop).
pub(crate) fn synthesize_on(
    spec: &ProblemSpec,
    basis: &DualBasis,
    opts: &SynthesisOptions,
) -> Result<NormOptResult, SynthesisError> {
    let horizon = basis.horizon();
    let min_opts = MinimizeOptions {
        tol_el: opts.tol_el,
        warm_start: opts.warm_start.clone(),
        ode: opts.ode,
    };
    let minimizer = minimize_jt_on(spec, basis, &min_opts)?;
    let m_tilde = minimizer.dual_norm_value;
    let traj = solve_dual_opts(spec, horizon, &minimizer.phi_hat_t, &opts.ode)?;

    let mut channels = Vec::with_capacity(spec.d);
    let mut fine_counts = Vec::with_capacity(spec.d);
    for i in 0..spec.d {
        let (initial_sign, switch_times) = extract_switchings(spec, &traj, i)?;
        fine_counts.push(switch_times.len());
        channels.push(ChannelControl {
            level: spec.k[i] * m_tilde,
            initial_sign,
            switch_times,
        });
    }
    let control = BangBangControl {
        horizon,
        channels,
        provenance: Provenance::NormOptimal,
    };

    let mut warnings = normality_warnings(&traj, spec.d);
    warnings.extend(switch_stability_warnings(spec, &traj, &fine_counts));

    let prop = propagate_primal(spec, &spec.y0, &control, horizon)?;
    let tol_terminal = opts
        .tol_terminal
        .unwrap_or_else(|| default_tol_terminal(spec));
    if prop.terminal_norm > tol_terminal {
        return Err(SynthesisError::TerminalResidual {
            value: prop.terminal_norm,
            tol: tol_terminal,
        });
    }

    Ok(NormOptResult {
        m_tilde,
        control,
        minimizer,
        terminal_residual: prop.terminal_norm,
        warnings,
    })
}

/// Samples `T ↦ M̃(T)` over increasing horizons, failing if the sampled
/// curve is not strictly decreasing. Evaluations fan out over threads when
/// `CHRONOTACT_THREADS` allows (0 or 1 forces sequential); output order is
/// by horizon either way.
pub fn mtilde_curve(
    spec: &ProblemSpec,
    horizons: &[f64],
) -> Result<Vec<(f64, f64)>, SynthesisError> {
    mtilde_curve_opts(spec, horizons, &SynthesisOptions::default())
}

pub fn mtilde_curve_opts(
    spec: &ProblemSpec,
    horizons: &[f64],
    opts: &SynthesisOptions,
) -> Result<Vec<(f64, f64)>, SynthesisError> {
    let workers = curve_workers(horizons.len());
    let mut results: Vec<Option<Result<NormOptResult, SynthesisError>>> =
        (0..horizons.len()).map(|_| None).collect();
    if workers <= 1 {
        for (slot, &t) in results.iter_mut().zip(horizons) {
            *slot = Some(synthesize_norm_optimal_opts(spec, t, opts));
        }
    } else {
        let chunk = horizons.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slice, ts) in results.chunks_mut(chunk).zip(horizons.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &t) in slice.iter_mut().zip(ts) {
                        *slot = Some(synthesize_norm_optimal_opts(spec, t, opts));
                    }
                });
            }
        });
    }
    let mut curve = Vec::with_capacity(horizons.len());
    for (slot, &t) in results.into_iter().zip(horizons) {
        curve.push((t, slot.expect("worker filled slot")?.m_tilde));
    }
    for w in curve.windows(2) {
        let ((t_lo, m_lo), (t_hi, m_hi)) = (w[0], w[1]);
        if m_hi >= m_lo {
            return Err(SynthesisError::Monotonicity {
                t_lo,
                t_hi,
                m_lo,
                m_hi,
            });
        }
    }
    Ok(curve)
}

fn curve_workers(jobs: usize) -> usize {
    let cap = match std::env::var("CHRONOTACT_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()).min(8),
    };
    cap.max(1).min(jobs.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EntryExpression;
    use crate::odeflow::solve_dual;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_4;

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

    fn rotation() -> ProblemSpec {
        ProblemSpec::new(
            2,
            1,
            vec![
                vec![EntryExpression::constant(0.0), EntryExpression::constant(-1.0)],
                vec![EntryExpression::constant(1.0), EntryExpression::constant(0.0)],
            ],
            vec![vec![1.0, 0.0]],
            vec![1.0],
            vec![1.0, 1.0],
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
    fn bang_bang_values_alternate() {
        let control = BangBangControl {
            horizon: 2.0,
            channels: vec![ChannelControl {
                level: 0.5,
                initial_sign: -1.0,
                switch_times: vec![1.0],
            }],
            provenance: Provenance::Manual,
        };
        assert_eq!(control.channel_value(0, 0.3), -0.5);
        assert_eq!(control.channel_value(0, 1.7), 0.5);
        assert_eq!(control.channel_value(0, 2.5), 0.0); // beyond horizon
    }

    #[test]
    fn l2_distance_of_shifted_switch() {
        let mk = |s: f64| BangBangControl {
            horizon: 2.0,
            channels: vec![ChannelControl {
                level: 1.0,
                initial_sign: -1.0,
                switch_times: vec![s],
            }],
            provenance: Provenance::Manual,
        };
        // Controls differ by 2 on an interval of length 0.1.
        let d = mk(1.0).l2_distance(&mk(1.1), 2.0);
        assert_relative_eq!(d, (4.0f64 * 0.1).sqrt(), epsilon = 1e-12);
        assert_eq!(mk(1.0).l2_distance(&mk(1.0), 2.0), 0.0);
    }

    #[test]
    fn extract_positive_cosine_has_no_switch() {
        let spec = rotation();
        let traj = solve_dual(&spec, FRAC_PI_4, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let (sign, switches) = extract_switchings(&spec, &traj, 0).unwrap();
        assert_eq!(sign, 1.0);
        assert!(switches.is_empty());
    }

    #[test]
    fn extract_affine_pairing_switch() {
        // Pairing q − c(t−2) with c = 1, q = −1 crosses zero at t = 1.
        let spec = double_integrator();
        let traj = solve_dual(&spec, 2.0, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let (sign, switches) = extract_switchings(&spec, &traj, 0).unwrap();
        assert_eq!(switches.len(), 1);
        assert_relative_eq!(switches[0], 1.0, epsilon = 1e-9);
        assert_eq!(sign, 1.0); // p(0) = −1 − (0−2) = 1 > 0
    }

    #[test]
    fn extract_constant_pairing() {
        let spec = scalar();
        let traj = solve_dual(&spec, 1.0, &DVector::from_vec(vec![-0.7])).unwrap();
        let (sign, switches) = extract_switchings(&spec, &traj, 0).unwrap();
        assert_eq!(sign, -1.0);
        assert!(switches.is_empty());
    }

    #[test]
    fn extract_rejects_zero_pairing() {
        let spec = double_integrator();
        let mut traj = solve_dual(&spec, 1.0, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        traj.pairings[0].iter_mut().for_each(|v| *v = 0.0);
        match extract_switchings(&spec, &traj, 0) {
            Err(SynthesisError::DegeneratePairing { channel: 0 }) => {}
            other => panic!("expected degenerate pairing, got {other:?}"),
        }
    }

    #[test]
    fn synthesize_scalar_t1() {
        let spec = scalar();
        let res = synthesize_norm_optimal(&spec, 1.0).unwrap();
        assert_relative_eq!(res.m_tilde, 1.0, epsilon = 1e-6);
        assert_eq!(res.control.channels[0].switch_times.len(), 0);
        assert_eq!(res.control.channels[0].initial_sign, -1.0);
        assert_relative_eq!(res.control.channels[0].level, res.m_tilde);
        assert!(res.terminal_residual <= 1e-8);
        assert!(res.warnings.is_empty());
    }

    #[test]
    fn synthesize_scalar_t2() {
        let spec = scalar();
        let res = synthesize_norm_optimal(&spec, 2.0).unwrap();
        assert_relative_eq!(res.m_tilde, 0.5, epsilon = 1e-6);
        assert_eq!(res.control.channel_value(0, 0.5), -res.m_tilde);
    }

    #[test]
    fn synthesize_double_integrator_t2() {
        let spec = double_integrator();
        let res = synthesize_norm_optimal(&spec, 2.0).unwrap();
        assert_relative_eq!(res.m_tilde, 1.0, epsilon = 1e-4);
        let ch = &res.control.channels[0];
        assert_eq!(ch.switch_times.len(), 1, "switches {:?}", ch.switch_times);
        assert_relative_eq!(ch.switch_times[0], 1.0, epsilon = 1e-3);
        assert_eq!(ch.initial_sign, -1.0);
        assert!(res.terminal_residual <= default_tol_terminal(&spec));
    }

    #[test]
    fn repeated_synthesis_agrees() {
        let spec = double_integrator();
        let a = synthesize_norm_optimal(&spec, 2.0).unwrap();
        let b = synthesize_norm_optimal(&spec, 2.0).unwrap();
        assert!((a.m_tilde - b.m_tilde).abs() <= 1e-9);
        assert!(a.control.l2_distance(&b.control, 2.0) <= 1e-5);
    }

    #[test]
    fn curve_scalar_is_reciprocal() {
        let spec = scalar();
        let ts = [0.25, 0.5, 1.0, 2.0, 4.0];
        let curve = mtilde_curve(&spec, &ts).unwrap();
        for (t, m) in curve {
            assert_relative_eq!(m, 1.0 / t, epsilon = 1e-6);
        }
    }

    #[test]
    fn curve_single_sample_is_trivially_monotone() {
        let spec = scalar();
        let curve = mtilde_curve(&spec, &[1.5]).unwrap();
        assert_eq!(curve.len(), 1);
    }
}
