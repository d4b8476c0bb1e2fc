use chronotact::dualopt::{minimize_jt, MinimizeOptions};
use chronotact::model::{kalman_rank_check, EntryExpression, ProblemSpec, SinusoidKind, Term};
use chronotact::odeflow::{solve_dual, DualBasis, OdeOptions};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_entry(rng: &mut ChaCha8Rng) -> EntryExpression {
    let mut terms = vec![Term::Poly { coeffs: vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)] }];
    if rng.gen_bool(0.5) {
        terms.push(Term::Sinusoid {
            amplitude: rng.gen_range(-0.4..0.4),
            omega: rng.gen_range(0.5..2.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            kind: if rng.gen_bool(0.5) { SinusoidKind::Sin } else { SinusoidKind::Cos },
        });
    }
    EntryExpression { terms }
}
fn random_unit_pair(rng: &mut ChaCha8Rng, floor: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if (v[0] * v[0] + v[1] * v[1]).sqrt() >= floor { return v; }
    }
}
fn random_analytic_2d(rng: &mut ChaCha8Rng) -> ProblemSpec {
    loop {
        let a = vec![vec![random_entry(rng), random_entry(rng)], vec![random_entry(rng), random_entry(rng)]];
        let b = vec![random_unit_pair(rng, 0.4)];
        let y0 = random_unit_pair(rng, 0.4);
        let spec = ProblemSpec::new(2, 1, a, b, vec![1.0], y0).unwrap();
        if kalman_rank_check(&spec, 0).passes { return spec; }
    }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..5 {
        let spec = random_analytic_2d(&mut rng);
        match minimize_jt(&spec, 1.0, &MinimizeOptions::default()) {
            Ok(res) => println!("trial {trial}: ok el={:.3e} x={:?}", res.el_residual, res.phi_hat_t.as_slice()),
            Err(chronotact::dualopt::DualOptError::MaxIterations { best, .. }) => {
                println!("trial {trial}: STALL el={:.3e} x={:?} N={:.6}", best.el_residual, best.phi_hat_t.as_slice(), best.dual_norm_value);
                let x = &best.phi_hat_t;
                let traj = solve_dual(&spec, 1.0, x).unwrap();
                // pairing profile
                let n = traj.grid.len();
                let maxp = traj.pairings[0].iter().fold(0.0f64, |a,v| a.max(v.abs()));
                println!("  pairing p(0)={:.6e} p(h)={:.6e} p(mid)={:.6e} p(T-h)={:.6e} p(T)={:.6e} max={:.3e}",
                    traj.pairings[0][0], traj.pairings[0][1], traj.pairings[0][n/2], traj.pairings[0][n-2], traj.pairings[0][n-1], maxp);
                // count sign changes on samples
                let mut sc = 0;
                for j in 0..n-1 { if traj.pairings[0][j] * traj.pairings[0][j+1] < 0.0 { sc += 1; println!("  crossing near t={:.9}", traj.grid[j]); } }
                println!("  sample sign changes: {sc}");
                let basis = DualBasis::build(&spec, 1.0, &OdeOptions::default()).unwrap();
                let c = basis.end_matrix().transpose() * &spec.y0;
                println!("  c = {:?}", c.as_slice());
                // gradient around the stall: scan small perturbations
                for scale in [1e-6, 1e-4, 1e-2] {
                    for dir in [[1.0,0.0],[0.0,1.0],[-1.0,0.0],[0.0,-1.0]] {
                        let dx = DVector::from_vec(vec![dir[0]*scale*x.norm(), dir[1]*scale*x.norm()]);
                        let xp = x + &dx;
                        let tr = solve_dual(&spec, 1.0, &xp).unwrap();
                        let nn = chronotact::odeflow::kink_integral(&spec, &tr, &spec.k);
                        let j = 0.5*nn*nn + tr.phi[0].dot(&spec.y0);
                        print!(" J{:+.1e}", j - best.j_value);
                    }
                    println!("  (scale {scale:.0e})");
                }
            }
            Err(e) => println!("trial {trial}: ERR {e}"),
        }
    }
}
