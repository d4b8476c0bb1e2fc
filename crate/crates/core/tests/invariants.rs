//! Property suites across modules: flow identities, norm axioms, convexity,
//! synthesis certificates, and serialization round-trips.

mod common;

use approx::assert_relative_eq;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chronotact::dualopt::{dual_norm, eval_jt, minimize_jt, MinimizeOptions};
use chronotact::model::{parse_problem, serialize_problem};
use chronotact::odeflow::{
    propagate_primal, solve_dual, transition, FlowKind, ZeroControl,
};
use chronotact::synthesis::{
    synthesize_norm_optimal, BangBangControl, ChannelControl, Provenance,
};
use chronotact::verify::{brute_force_norm_opt, terminal_residual, BruteForceOptions};

use common::{double_integrator, random_analytic_2d, rotation, scalar_integrator};

#[test]
fn flow_pairing_and_semigroup_on_random_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..6 {
        let spec = random_analytic_2d(&mut rng);
        let s = rng.gen_range(0.0..1.5);
        let r = s + rng.gen_range(0.1..1.0);
        let t = r + rng.gen_range(0.1..1.0);
        let phi = transition(&spec, s, t, FlowKind::Primal).unwrap().value;
        let psi = transition(&spec, s, t, FlowKind::Dual).unwrap().value;
        let eye = nalgebra::DMatrix::identity(2, 2);
        assert!((phi.transpose() * psi - &eye).amax() <= 1e-9);
        let phi_rs = transition(&spec, s, r, FlowKind::Primal).unwrap().value;
        let phi_tr = transition(&spec, r, t, FlowKind::Primal).unwrap().value;
        assert!((phi_tr * phi_rs - phi).amax() <= 1e-9);
    }
}

#[test]
fn dual_pairing_constant_along_uncontrolled_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..6 {
        let spec = random_analytic_2d(&mut rng);
        let horizon = rng.gen_range(0.5..2.0);
        let phi_t = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let dual = solve_dual(&spec, horizon, &phi_t).unwrap();
        let traj = propagate_primal(&spec, &spec.y0, &ZeroControl { dim: 1 }, horizon).unwrap();
        let start = dual.phi[0].dot(&traj.y[0]);
        let end = dual.phi.last().unwrap().dot(traj.terminal());
        let mid_t = 0.5 * horizon;
        let y_mid = transition(&spec, 0.0, mid_t, FlowKind::Primal).unwrap().value * &spec.y0;
        let mid = dual.phi_at(&spec, mid_t).dot(&y_mid);
        assert!((start - end).abs() <= 1e-9 * (1.0 + start.abs()));
        assert!((start - mid).abs() <= 1e-9 * (1.0 + start.abs()));
    }
}

#[test]
fn dual_norm_homogeneity_and_triangle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..4 {
        let spec = random_analytic_2d(&mut rng);
        let horizon = rng.gen_range(0.5..1.5);
        let a = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let b = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let norm_a = dual_norm(&spec, horizon, &a).unwrap();
        let norm_b = dual_norm(&spec, horizon, &b).unwrap();
        for c in [-2.0, 0.5, 3.0] {
            let scaled = dual_norm(&spec, horizon, &(&a * c)).unwrap();
            assert_relative_eq!(scaled, c.abs() * norm_a, max_relative = 1e-9);
        }
        let norm_sum = dual_norm(&spec, horizon, &(&a + &b)).unwrap();
        assert!(norm_sum <= norm_a + norm_b + 1e-9 * (1.0 + norm_a + norm_b));
    }
}

#[test]
fn jt_convexity_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..4 {
        let spec = random_analytic_2d(&mut rng);
        let horizon = rng.gen_range(0.5..1.5);
        let a = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let b = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let ja = eval_jt(&spec, horizon, &a).unwrap();
        let jb = eval_jt(&spec, horizon, &b).unwrap();
        for _ in 0..3 {
            let lambda: f64 = rng.gen_range(0.05..0.95);
            let mix = &a * lambda + &b * (1.0 - lambda);
            let j_mix = eval_jt(&spec, horizon, &mix).unwrap();
            assert!(
                j_mix <= lambda * ja + (1.0 - lambda) * jb + 1e-9,
                "convexity violated: {} > {}",
                j_mix,
                lambda * ja + (1.0 - lambda) * jb
            );
        }
    }
}

#[test]
fn minimizer_value_negative_on_random_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..5 {
        let spec = random_analytic_2d(&mut rng);
        let res = minimize_jt(&spec, 1.0, &MinimizeOptions::default()).unwrap();
        assert!(res.j_value < 0.0, "J at minimizer must be negative");
        assert!(res.phi_hat_t.amax() > 0.0);
    }
}

#[test]
fn control_unique_despite_minimizer_nonuniqueness() {
    // Flat-segment case: different starts may end at different minimizers,
    // but the synthesized control is unique.
    let spec = rotation([1.0, 1.0]);
    let horizon = std::f64::consts::FRAC_PI_4;
    let base = synthesize_norm_optimal(&spec, horizon).unwrap();
    for warm in [
        DVector::from_vec(vec![2.0, 0.1]),
        DVector::from_vec(vec![0.5, 0.6]),
    ] {
        let alt = chronotact::synthesis::synthesize_norm_optimal_opts(
            &spec,
            horizon,
            &chronotact::synthesis::SynthesisOptions {
                warm_start: Some(warm),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((alt.m_tilde - base.m_tilde).abs() <= 1e-7);
        assert!(
            alt.control.l2_distance(&base.control, horizon) <= 1e-5,
            "controls differ in L2 by {}",
            alt.control.l2_distance(&base.control, horizon)
        );
    }
}

#[test]
fn synthesized_control_flat_and_dual_certified() {
    for (spec, horizon) in [
        (scalar_integrator(), 1.0),
        (double_integrator(), 2.0),
        (rotation([1.0, 1.0]), 1.2),
    ] {
        let res = synthesize_norm_optimal(&spec, horizon).unwrap();
        // Flatness away from switches is structural; guard the
        // representation at random sample points.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..200 {
            let t = rng.gen_range(0.0..horizon);
            for (i, ch) in res.control.channels.iter().enumerate() {
                if ch.switch_times.iter().any(|&s| (t - s).abs() <= 1e-3 * horizon) {
                    continue;
                }
                let dev = (res.control.channel_value(i, t).abs() - spec.k[i] * res.m_tilde).abs();
                assert!(dev <= 1e-9 * res.m_tilde);
            }
        }
        // Duality certificate doubles as an admissibility cross-check.
        let residual = terminal_residual(&spec, &res.control, horizon, &spec.y0).unwrap();
        assert!(
            residual <= 1e-6 * (1.0 + spec.y0.norm()),
            "duality residual {residual}"
        );
    }
}

#[test]
fn oracle_competitors_cannot_beat_m_tilde() {
    // Competitors solved to a tight terminal residual must pay at least
    // M-tilde in sup norm.
    let tight = BruteForceOptions {
        residual_tol: Some(1e-8),
        ..Default::default()
    };
    for (spec, horizon, switches, density) in [
        (scalar_integrator(), 1.0, 0, 64),
        (double_integrator(), 2.0, 1, 200),
    ] {
        let opt = synthesize_norm_optimal(&spec, horizon).unwrap();
        let oracle = brute_force_norm_opt(&spec, horizon, switches, density, &tight).unwrap();
        assert!(
            oracle.m_est >= opt.m_tilde - 1e-6,
            "oracle undercut: {} < {}",
            oracle.m_est,
            opt.m_tilde
        );
        // The oracle's best schedule at its own level is a genuine
        // admissible competitor.
        let control = BangBangControl {
            horizon,
            channels: oracle
                .best_schedule
                .iter()
                .enumerate()
                .map(|(i, sched)| ChannelControl {
                    level: spec.k[i] * oracle.m_est,
                    initial_sign: sched.initial_sign,
                    switch_times: sched.switch_times.clone(),
                })
                .collect(),
            provenance: Provenance::Manual,
        };
        let residual = terminal_residual(&spec, &control, horizon, &spec.y0).unwrap();
        assert!(residual <= 1e-6 * (1.0 + spec.y0.norm()), "residual {residual}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn eval_a_continuous_in_t(seed in 0u64..1000, t in 0.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_analytic_2d(&mut rng);
        let h = 1e-7;
        let a0 = spec.eval_a(t);
        let a1 = spec.eval_a(t + h);
        prop_assert!((a1 - a0).amax() <= 1e-5);
    }

    #[test]
    fn problem_serialization_roundtrips(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_analytic_2d(&mut rng);
        let text = serialize_problem(&spec);
        let reparsed = parse_problem(&text).unwrap();
        prop_assert_eq!(&spec, &reparsed);
        prop_assert_eq!(serialize_problem(&reparsed), text);
    }

    #[test]
    fn bang_bang_sign_alternation(
        level in 0.1f64..3.0,
        first in prop::bool::ANY,
        s1 in 0.2f64..0.9,
        gap in 0.05f64..0.5,
    ) {
        let control = BangBangControl {
            horizon: 2.0,
            channels: vec![ChannelControl {
                level,
                initial_sign: if first { 1.0 } else { -1.0 },
                switch_times: vec![s1, s1 + gap],
            }],
            provenance: Provenance::Manual,
        };
        let v0 = control.channel_value(0, 0.5 * s1);
        let v1 = control.channel_value(0, s1 + 0.5 * gap);
        let v2 = control.channel_value(0, (s1 + gap + 2.0) * 0.5);
        prop_assert_eq!(v0.abs(), level);
        prop_assert_eq!(v0, -v1);
        prop_assert_eq!(v1, -v2);
    }
}
