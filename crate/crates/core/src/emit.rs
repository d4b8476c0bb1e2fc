//! Plot-ready CSV and JSON result records.
//!
//! CSV floats carry 17 significant digits so every value round-trips
//! exactly; JSON uses the shortest representation that parses back to the
//! same double. Records contain no timestamps, so identical runs produce
//! byte-identical files.

use serde::{Deserialize, Serialize};

use crate::odeflow::Trajectory;
use crate::steering::SteerResult;
use crate::synthesis::{BangBangControl, NormOptResult};
use crate::timeopt::TimeOptResult;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// `t,y1,...,ym` rows over the propagation grid.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let m = traj.y.first().map_or(0, |y| y.len());
    let mut out = String::from("t");
    for i in 1..=m {
        out.push_str(&format!(",y{i}"));
    }
    out.push('\n');
    for (t, y) in traj.grid.iter().zip(&traj.y) {
        out.push_str(&fmt(*t));
        for v in y.iter() {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    out
}

/// `t,u1,...,ud` rows on a uniform grid of at least `min_samples` points
/// with every switch time inserted.
pub fn control_csv(control: &BangBangControl, min_samples: usize) -> String {
    let d = control.channels.len();
    let n = min_samples.max(2);
    let mut times: Vec<f64> = (0..n)
        .map(|j| j as f64 * control.horizon / (n - 1) as f64)
        .collect();
    times.extend(control.all_switch_times());
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let mut out = String::from("t");
    for i in 1..=d {
        out.push_str(&format!(",u{i}"));
    }
    out.push('\n');
    for &t in &times {
        out.push_str(&fmt(t));
        for i in 0..d {
            out.push(',');
            out.push_str(&fmt(control.channel_value(i, t)));
        }
        out.push('\n');
    }
    out
}

/// `T,M_tilde` rows.
pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("T,M_tilde\n");
    for &(t, m) in curve {
        out.push_str(&format!("{},{}\n", fmt(t), fmt(m)));
    }
    out
}

/// `t,u` rows of a steering control.
pub fn steer_csv(steer: &SteerResult) -> String {
    let mut out = String::from("t,u\n");
    for (t, u) in steer.grid.iter().zip(&steer.samples) {
        out.push_str(&format!("{},{}\n", fmt(*t), fmt(*u)));
    }
    out
}

/// `n,t,M_tilde,a,b` rows of a bisection trace.
pub fn trace_csv(result: &TimeOptResult) -> String {
    let mut out = String::from("n,t,M_tilde,a,b\n");
    for e in &result.trace.entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.n,
            fmt(e.t),
            fmt(e.m_tilde),
            fmt(e.a),
            fmt(e.b)
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormOptRecord {
    #[serde(rename = "M_tilde")]
    pub m_tilde: f64,
    pub switch_times: Vec<Vec<f64>>,
    pub initial_signs: Vec<f64>,
    pub levels: Vec<f64>,
    pub terminal_residual: f64,
    pub el_residual: f64,
}

impl From<&NormOptResult> for NormOptRecord {
    fn from(res: &NormOptResult) -> Self {
        NormOptRecord {
            m_tilde: res.m_tilde,
            switch_times: res
                .control
                .channels
                .iter()
                .map(|ch| ch.switch_times.clone())
                .collect(),
            initial_signs: res
                .control
                .channels
                .iter()
                .map(|ch| ch.initial_sign)
                .collect(),
            levels: res.control.channels.iter().map(|ch| ch.level).collect(),
            terminal_residual: res.terminal_residual,
            el_residual: res.minimizer.el_residual,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: usize,
    pub t: f64,
    #[serde(rename = "M_tilde")]
    pub m_tilde: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub eq27_ok: bool,
    pub eq28_residual: f64,
    pub terminal_residual: f64,
    pub el_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeOptRecord {
    #[serde(rename = "M")]
    pub bound: f64,
    pub t_star: f64,
    #[serde(rename = "K")]
    pub horizon_multiplier: usize,
    pub t0: f64,
    pub trace: Vec<TraceRow>,
    pub switch_times: Vec<Vec<f64>>,
    pub initial_signs: Vec<f64>,
    pub levels: Vec<f64>,
    pub verification: Option<VerificationRecord>,
}

impl From<&TimeOptResult> for TimeOptRecord {
    fn from(res: &TimeOptResult) -> Self {
        TimeOptRecord {
            bound: res.bound,
            t_star: res.t_star,
            horizon_multiplier: res.trace.horizon_multiplier,
            t0: res.trace.t0,
            trace: res
                .trace
                .entries
                .iter()
                .map(|e| TraceRow {
                    n: e.n,
                    t: e.t,
                    m_tilde: e.m_tilde,
                    a: e.a,
                    b: e.b,
                })
                .collect(),
            switch_times: res
                .control
                .channels
                .iter()
                .map(|ch| ch.switch_times.clone())
                .collect(),
            initial_signs: res
                .control
                .channels
                .iter()
                .map(|ch| ch.initial_sign)
                .collect(),
            levels: res.control.channels.iter().map(|ch| ch.level).collect(),
            verification: res.verification.as_ref().map(|rep| VerificationRecord {
                eq27_ok: rep.eq27_ok,
                eq28_residual: rep.eq28_residual,
                terminal_residual: rep.terminal_residual,
                el_residual: res.norm_result.minimizer.el_residual,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerRecord {
    pub tau: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub channel: usize,
    pub sup_norm: f64,
    pub bound_c: f64,
    pub terminal_norm: f64,
}

impl From<&SteerResult> for SteerRecord {
    fn from(res: &SteerResult) -> Self {
        SteerRecord {
            tau: res.tau,
            horizon: res.horizon,
            channel: res.channel,
            sup_norm: res.sup_norm,
            bound_c: res.bound_c,
            terminal_norm: res.terminal_norm,
        }
    }
}
