//! Problem data model: parsing, validation, and evaluation of the system
//! matrix `A(t)`.
//!
//! A problem is the tuple `(m, d, A(·), {b_i}, {k_i}, y0)` describing the
//! controlled system `y'(t) + A(t) y(t) = Σ_i b_i u^i(t)`, `y(0) = y0`,
//! with per-channel bounds `|u^i(t)| ≤ k_i · M`. Entries of `A` are finite
//! sums of polynomial and sinusoidal terms, so `A(·)` is real analytic by
//! construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wire format and structural errors raised while reading a problem file.
#[derive(Debug, Error)]
pub enum ModelError {
    /// The document is not well-formed JSON.
    #[error("syntax error: {0}")]
    Syntax(String),
    /// The document is valid JSON but violates the problem schema
    /// (missing field, wrong arity, bad term kind).
    #[error("schema error: {0}")]
    Schema(String),
}

/// One additive term of an analytic matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `c0 + c1·t + c2·t² + …`
    Poly { coeffs: Vec<f64> },
    /// `amplitude · sin(omega·t + phase)` or `… cos(…)`.
    Sinusoid {
        amplitude: f64,
        omega: f64,
        phase: f64,
        kind: SinusoidKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinusoidKind {
    Sin,
    Cos,
}

impl Term {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Term::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
            Term::Sinusoid {
                amplitude,
                omega,
                phase,
                kind,
            } => {
                let arg = omega * t + phase;
                match kind {
                    SinusoidKind::Sin => amplitude * arg.sin(),
                    SinusoidKind::Cos => amplitude * arg.cos(),
                }
            }
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Term::Poly { coeffs } => coeffs.len() <= 1,
            Term::Sinusoid { amplitude, .. } => *amplitude == 0.0,
        }
    }
}

/// A finite sum of [`Term`]s; an empty sum evaluates to zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntryExpression {
    pub terms: Vec<Term>,
}

impl EntryExpression {
    pub fn constant(c: f64) -> Self {
        if c == 0.0 {
            return EntryExpression { terms: Vec::new() };
        }
        EntryExpression {
            terms: vec![Term::Poly { coeffs: vec![c] }],
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.terms.iter().map(|term| term.eval(t)).sum()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(Term::is_constant)
    }
}

/// The full problem definition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// State dimension.
    pub m: usize,
    /// Number of control channels.
    pub d: usize,
    /// `m × m` matrix of analytic entry expressions, row major.
    pub a: Vec<Vec<EntryExpression>>,
    /// Input vectors `b_i`, one per channel.
    pub b: Vec<DVector<f64>>,
    /// Channel weights, `1 = k_1 ≥ k_2 ≥ … ≥ k_d > 0`.
    pub k: Vec<f64>,
    /// Initial state (nonzero).
    pub y0: DVector<f64>,
}

impl ProblemSpec {
    /// Builds a spec from raw parts, checking arity only (semantic checks
    /// live in [`validate_spec`]).
    pub fn new(
        m: usize,
        d: usize,
        a: Vec<Vec<EntryExpression>>,
        b: Vec<Vec<f64>>,
        k: Vec<f64>,
        y0: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if m == 0 {
            return Err(ModelError::Schema("m must be positive".into()));
        }
        if d == 0 {
            return Err(ModelError::Schema("d must be positive".into()));
        }
        if a.len() != m || a.iter().any(|row| row.len() != m) {
            return Err(ModelError::Schema(format!("A must be {m}x{m}")));
        }
        if b.len() != d {
            return Err(ModelError::Schema(format!("b must have {d} vectors")));
        }
        if let Some(bad) = b.iter().position(|bi| bi.len() != m) {
            return Err(ModelError::Schema(format!(
                "b[{bad}] has length {}, expected {m}",
                b[bad].len()
            )));
        }
        if k.len() != d {
            return Err(ModelError::Schema(format!("k must have {d} entries")));
        }
        if y0.len() != m {
            return Err(ModelError::Schema(format!(
                "y0 has length {}, expected {m}",
                y0.len()
            )));
        }
        Ok(ProblemSpec {
            m,
            d,
            a,
            b: b.into_iter().map(DVector::from_vec).collect(),
            k,
            y0: DVector::from_vec(y0),
        })
    }

    /// Evaluates `A(t)` entrywise.
    pub fn eval_a(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |r, c| self.a[r][c].eval(t))
    }

    /// The `m × d` matrix whose columns are the input vectors.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let mut mat = DMatrix::zeros(self.m, self.d);
        for (i, bi) in self.b.iter().enumerate() {
            mat.set_column(i, bi);
        }
        mat
    }

    /// True when every entry of `A` is constant in `t`.
    pub fn a_is_constant(&self) -> bool {
        self.a
            .iter()
            .all(|row| row.iter().all(EntryExpression::is_constant))
    }
}

/// Evaluates the system matrix at time `t` (entrywise term sums).
pub fn eval_a(spec: &ProblemSpec, t: f64) -> DMatrix<f64> {
    spec.eval_a(t)
}

/// Violation and warning codes used by [`validate_spec`].
pub mod codes {
    pub const Y0_ZERO: &str = "Y0_ZERO";
    pub const K_FIRST: &str = "K_FIRST";
    pub const K_ORDER: &str = "K_ORDER";
    pub const CONTI_HEURISTIC_FAIL: &str = "CONTI_HEURISTIC_FAIL";
}

/// Outcome of semantic validation. `ok` holds exactly when there are no
/// violations; warnings never make a spec invalid.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<(String, String)>,
    pub warnings: Vec<(String, String)>,
}

/// Checks the weight chain, the nonzero initial state, and the per-channel
/// rank heuristic (warning only — the rank check is a finite proxy for an
/// infinite-horizon controllability condition and cannot decide it).
pub fn validate_spec(spec: &ProblemSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();

    if spec.y0.norm() == 0.0 {
        violations.push((codes::Y0_ZERO.to_string(), "y0 must be nonzero".to_string()));
    }
    if spec.k.first().copied() != Some(1.0) {
        violations.push((
            codes::K_FIRST.to_string(),
            format!("k[0] must equal 1, got {:?}", spec.k.first()),
        ));
    }
    for i in 0..spec.k.len() {
        let broken = spec.k[i] <= 0.0 || (i > 0 && spec.k[i] > spec.k[i - 1]);
        if broken {
            violations.push((
                codes::K_ORDER.to_string(),
                format!("weights must satisfy k[0] >= ... >= k[d-1] > 0; broken at index {i}"),
            ));
            break;
        }
    }
    for channel in 0..spec.d {
        let check = kalman_rank_check(spec, channel);
        if !check.passes {
            let approx = if check.approximate {
                " (A sampled at t=0; heuristic only)"
            } else {
                ""
            };
            warnings.push((
                codes::CONTI_HEURISTIC_FAIL.to_string(),
                format!(
                    "channel {channel}: controllability block rank {} < {}{approx}",
                    check.rank, spec.m
                ),
            ));
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
        warnings,
    }
}

/// Result of the per-channel Kalman rank heuristic.
#[derive(Debug, Clone, Copy)]
pub struct RankCheck {
    pub rank: usize,
    pub passes: bool,
    /// Set when `A` is time-varying and the check sampled `A` at `t = 0`.
    pub approximate: bool,
}

/// Rank of the controllability block `[b_i, Âb_i, …, Â^{m−1}b_i]` with
/// `Â = −A(0)` (the system matrix of `y' = −A(t)y + …` at `t = 0`).
pub fn kalman_rank_check(spec: &ProblemSpec, channel: usize) -> RankCheck {
    assert!(channel < spec.d, "channel {channel} out of range");
    let a_hat = -spec.eval_a(0.0);
    let mut block = DMatrix::zeros(spec.m, spec.m);
    let mut col = spec.b[channel].clone();
    for j in 0..spec.m {
        block.set_column(j, &col);
        col = &a_hat * col;
    }
    let scale = block.amax().max(1.0);
    let rank = block.rank(1e-12 * scale * spec.m as f64);
    RankCheck {
        rank,
        passes: rank == spec.m,
        approximate: !spec.a_is_constant(),
    }
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawProblem {
    m: usize,
    d: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<RawEntry>>,
    b: Vec<Vec<f64>>,
    k: Vec<f64>,
    y0: Vec<f64>,
}

/// A bare number is shorthand for a degree-0 polynomial.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawEntry {
    Number(f64),
    Expression { terms: Vec<RawTerm> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RawTerm {
    Poly {
        coeffs: Vec<f64>,
    },
    Sin {
        amplitude: f64,
        omega: f64,
        phase: f64,
    },
    Cos {
        amplitude: f64,
        omega: f64,
        phase: f64,
    },
}

impl From<RawTerm> for Term {
    fn from(raw: RawTerm) -> Self {
        match raw {
            RawTerm::Poly { coeffs } => Term::Poly { coeffs },
            RawTerm::Sin {
                amplitude,
                omega,
                phase,
            } => Term::Sinusoid {
                amplitude,
                omega,
                phase,
                kind: SinusoidKind::Sin,
            },
            RawTerm::Cos {
                amplitude,
                omega,
                phase,
            } => Term::Sinusoid {
                amplitude,
                omega,
                phase,
                kind: SinusoidKind::Cos,
            },
        }
    }
}

impl From<&Term> for RawTerm {
    fn from(term: &Term) -> Self {
        match term {
            Term::Poly { coeffs } => RawTerm::Poly {
                coeffs: coeffs.clone(),
            },
            Term::Sinusoid {
                amplitude,
                omega,
                phase,
                kind,
            } => match kind {
                SinusoidKind::Sin => RawTerm::Sin {
                    amplitude: *amplitude,
                    omega: *omega,
                    phase: *phase,
                },
                SinusoidKind::Cos => RawTerm::Cos {
                    amplitude: *amplitude,
                    omega: *omega,
                    phase: *phase,
                },
            },
        }
    }
}

impl From<RawEntry> for EntryExpression {
    fn from(raw: RawEntry) -> Self {
        match raw {
            RawEntry::Number(c) => EntryExpression::constant(c),
            RawEntry::Expression { terms } => EntryExpression {
                terms: terms.into_iter().map(Term::from).collect(),
            },
        }
    }
}

/// Parses a problem file. Structural checks only; run [`validate_spec`]
/// afterwards for the semantic ones.
pub fn parse_problem(text: &str) -> Result<ProblemSpec, ModelError> {
    let raw: RawProblem = serde_json::from_str(text).map_err(|err| {
        use serde_json::error::Category;
        match err.classify() {
            Category::Syntax | Category::Eof => ModelError::Syntax(err.to_string()),
            _ => ModelError::Schema(err.to_string()),
        }
    })?;
    let a = raw
        .a
        .into_iter()
        .map(|row| row.into_iter().map(EntryExpression::from).collect())
        .collect();
    ProblemSpec::new(raw.m, raw.d, a, raw.b, raw.k, raw.y0)
}

/// Serializes a spec back to the problem-file format (entries always in
/// object form). `parse ∘ serialize ∘ parse` is the identity on values.
pub fn serialize_problem(spec: &ProblemSpec) -> String {
    let raw = RawProblem {
        m: spec.m,
        d: spec.d,
        a: spec
            .a
            .iter()
            .map(|row| {
                row.iter()
                    .map(|entry| RawEntry::Expression {
                        terms: entry.terms.iter().map(RawTerm::from).collect(),
                    })
                    .collect()
            })
            .collect(),
        b: spec.b.iter().map(|bi| bi.iter().copied().collect()).collect(),
        k: spec.k.clone(),
        y0: spec.y0.iter().copied().collect(),
    };
    serde_json::to_string_pretty(&raw).expect("problem serialization cannot fail")
}
