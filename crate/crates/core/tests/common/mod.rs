//! Shared fixtures: the closed-form benchmark systems and a generator of
//! random two-dimensional analytic systems.

use chronotact::model::{kalman_rank_check, EntryExpression, ProblemSpec, SinusoidKind, Term};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar integrator: m = 1, A = 0, b = 1, y0 = 1. Closed forms:
/// `M̃(T) = 1/T`, `t*(M) = 1/M`.
pub fn scalar_integrator() -> ProblemSpec {
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

/// Double integrator (`y1' = y2`, `y2' = u`), y0 = (1, 0). Closed forms:
/// `M̃(T) = 4/T²`, `t*(M) = 2/√M`, one switch at `t*/2`.
pub fn double_integrator() -> ProblemSpec {
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

/// Planar rotation with forcing on the first coordinate.
pub fn rotation(y0: [f64; 2]) -> ProblemSpec {
    ProblemSpec::new(
        2,
        1,
        vec![
            vec![EntryExpression::constant(0.0), EntryExpression::constant(-1.0)],
            vec![EntryExpression::constant(1.0), EntryExpression::constant(0.0)],
        ],
        vec![vec![1.0, 0.0]],
        vec![1.0],
        y0.to_vec(),
    )
    .unwrap()
}

fn random_entry(rng: &mut ChaCha8Rng) -> EntryExpression {
    let mut terms = vec![Term::Poly {
        coeffs: vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)],
    }];
    if rng.gen_bool(0.5) {
        terms.push(Term::Sinusoid {
            amplitude: rng.gen_range(-0.4..0.4),
            omega: rng.gen_range(0.5..2.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            kind: if rng.gen_bool(0.5) {
                SinusoidKind::Sin
            } else {
                SinusoidKind::Cos
            },
        });
    }
    EntryExpression { terms }
}

fn random_unit_pair(rng: &mut ChaCha8Rng, floor: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if (v[0] * v[0] + v[1] * v[1]).sqrt() >= floor {
            return v;
        }
    }
}

/// A random two-dimensional analytic single-channel system that passes the
/// controllability rank heuristic.
pub fn random_analytic_2d(rng: &mut ChaCha8Rng) -> ProblemSpec {
    loop {
        let a = vec![
            vec![random_entry(rng), random_entry(rng)],
            vec![random_entry(rng), random_entry(rng)],
        ];
        let b = vec![random_unit_pair(rng, 0.4)];
        let y0 = random_unit_pair(rng, 0.4);
        let spec = ProblemSpec::new(2, 1, a, b, vec![1.0], y0).unwrap();
        if kalman_rank_check(&spec, 0).passes {
            return spec;
        }
    }
}
