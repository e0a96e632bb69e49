mod common;

use common::{gd_oracle, norm, rel_err, DenseProblem};
use dismec::sparse::CsrMatrix;
use dismec::tron::{self, SignVector, SolverConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tight(c: f64) -> SolverConfig {
    SolverConfig {
        c,
        eps: 1e-10,
        ..Default::default()
    }
}

fn problem_strategy() -> impl Strategy<Value = (DenseProblem, Vec<f64>, Vec<f64>)> {
    (any::<u64>(), prop::sample::select(vec![0.1, 1.0, 10.0])).prop_map(|(seed, c)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DenseProblem::random(&mut rng, 20, 10, c);
        let w = (0..p.d()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = (0..p.d()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (p, w, v)
    })
}

fn away_from_kink(p: &DenseProblem, w: &[f64]) -> bool {
    p.margins(w).iter().all(|m| m.abs() > 1e-4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradient_matches_central_differences((p, w, _) in problem_strategy()) {
        prop_assume!(away_from_kink(&p, &w));
        let g = tron::gradient(&w, &p.csr(), &p.signs(), p.c).unwrap();
        let h = 1e-6;
        for j in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            let fd = (p.objective(&wp) - p.objective(&wm)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() / g[j].abs().max(1.0) <= 1e-5, "coord {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn hessian_vec_matches_gradient_differences((p, w, v) in problem_strategy()) {
        prop_assume!(away_from_kink(&p, &w));
        let x = p.csr();
        let s = p.signs();
        let hv = tron::hessian_vec(&w, &v, &x, &s, p.c).unwrap();
        let h = 1e-6;
        let wp: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let wm: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let gp = p.gradient(&wp);
        let gm = p.gradient(&wm);
        for j in 0..w.len() {
            let fd = (gp[j] - gm[j]) / (2.0 * h);
            prop_assert!((fd - hv[j]).abs() / hv[j].abs().max(1.0) <= 1e-4, "coord {j}: fd {fd} vs {}", hv[j]);
        }
    }

    #[test]
    fn objective_and_gradient_match_dense_reference((p, w, _) in problem_strategy()) {
        let f = tron::objective(&w, &p.csr(), &p.signs(), p.c).unwrap();
        prop_assert!(rel_err(f, p.objective(&w)) < 1e-12);
        let g = tron::gradient(&w, &p.csr(), &p.signs(), p.c).unwrap();
        for (a, b) in g.iter().zip(p.gradient(&w)) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn accepted_objectives_never_increase((p, _, _) in problem_strategy()) {
        let r = tron::solve(&p.csr(), &p.signs(), &SolverConfig { c: p.c, ..Default::default() }, None).unwrap();
        prop_assert!(r.history.windows(2).all(|h| h[1] <= h[0]));
        prop_assert_eq!(*r.history.last().unwrap(), r.objective);
    }

    #[test]
    fn warm_start_from_optimum_stops_immediately((p, _, _) in problem_strategy()) {
        let cfg = SolverConfig { c: p.c, eps: 1e-3, ..Default::default() };
        let x = p.csr();
        let s = p.signs();
        let first = tron::solve(&x, &s, &tight(p.c), None).unwrap();
        let again = tron::solve(&x, &s, &cfg, Some(&first.w)).unwrap();
        prop_assert!(again.outer_iters <= 1, "{} iterations", again.outer_iters);
        prop_assert!(again.converged);
    }
}

#[test]
fn solve_agrees_with_gradient_descent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..30 {
        let c = [0.1, 1.0, 10.0][i % 3];
        let p = DenseProblem::random(&mut rng, 50, 20, c);
        let r = tron::solve(&p.csr(), &p.signs(), &tight(c), None).unwrap();
        let (w_gd, f_gd) = gd_oracle(&p, 1e-10, 2_000_000);
        assert!(norm(&p.gradient(&w_gd)) <= 1e-10, "oracle did not converge");
        assert!(
            rel_err(r.objective, f_gd) <= 1e-6,
            "case {i}: tron {} vs oracle {f_gd}",
            r.objective
        );
    }
}

#[test]
fn converged_result_meets_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = DenseProblem::random(&mut rng, 40, 15, 1.0);
    let cfg = SolverConfig::default();
    let r = tron::solve(&p.csr(), &p.signs(), &cfg, None).unwrap();
    let g0 = norm(&p.gradient(&vec![0.0; p.d()]));
    assert!(r.converged);
    assert!(r.grad_norm <= cfg.eps * g0);
    assert!((r.grad_norm - norm(&p.gradient(&r.w))).abs() <= 1e-9 * g0);
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = DenseProblem::random(&mut rng, 50, 20, 10.0);
    let cfg = SolverConfig {
        c: 10.0,
        eps: 1e-14,
        max_outer_iter: 1,
        max_cg_iter: 1,
        ..Default::default()
    };
    let r = tron::solve(&p.csr(), &p.signs(), &cfg, None).unwrap();
    assert!(!r.converged);
    assert!(r.objective <= p.objective(&vec![0.0; p.d()]));
}

#[test]
fn zero_matrix_gives_zero_weights() {
    let x = CsrMatrix::from_dense(&[vec![0.0; 3], vec![0.0; 3]], 3);
    let s = SignVector::new(2, vec![0, 1]).unwrap();
    let r = tron::solve(&x, &s, &SolverConfig::default(), None).unwrap();
    assert!(r.w.iter().all(|&v| v == 0.0));
}
