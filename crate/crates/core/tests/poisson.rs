mod common;

use common::{gauss_legendre, time_derivative_at, Forcing};
use proptest::prelude::*;
use qsa_core::poisson::solve_poisson;
use qsa_core::probing::default_basis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_forcings_solve_exactly() {
    let basis = default_basis(4).unwrap();
    for seed in 0..20 {
        let forcing = Forcing::random(seed);
        let u = forcing.field();
        let uh = solve_poisson(&u, &basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for _ in 0..100 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let t = rng.gen_range(0.0..1000.0);
            let u_val = forcing.value(&basis, x[0], t);
            assert!((u.eval_at(&x, &basis, t)[0] - u_val).abs() < 1e-12);
            let r = time_derivative_at(&uh, &basis, &x, t) + u_val;
            assert!(r.abs() < 1e-10, "seed {seed}: residual {r}");
        }
    }
}

#[test]
fn telescoping_matches_quadrature() {
    let basis = default_basis(4).unwrap();
    for seed in 0..20 {
        let forcing = Forcing::random(seed);
        let uh = solve_poisson(&forcing.field(), &basis).unwrap();
        let theta = 0.3 * seed as f64 - 2.0;
        let x = [theta, 0.0];
        let (t0, t1) = (1.7 * seed as f64, 1.7 * seed as f64 + 10.0);
        let integral = gauss_legendre(|t| forcing.value(&basis, theta, t), t0, t1, 4000);
        let jump = uh.eval_at(&x, &basis, t1)[0] - uh.eval_at(&x, &basis, t0)[0];
        assert!((jump + integral).abs() < 1e-8, "seed {seed}: {jump} vs {}", -integral);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solution_has_zero_mean_and_is_real(seed in 0u64..1_000_000, theta in -3.0..3.0f64) {
        let basis = default_basis(4).unwrap();
        let uh = solve_poisson(&Forcing::random(seed).field(), &basis).unwrap();
        prop_assert!(uh.coefficient(&[0, 0, 0, 0]).is_none());
        prop_assert!(uh.reality_defect(&[vec![theta, 0.0]]) < 1e-12);
    }

    #[test]
    fn solution_is_linear_in_forcing(s1 in 0u64..1000, s2 in 0u64..1000, scale in -2.0..2.0f64, t in 0.0..500.0f64) {
        let basis = default_basis(4).unwrap();
        let (u1, u2) = (Forcing::random(s1).field(), Forcing::random(s2).field());
        let combined = solve_poisson(&u1.add(&u2.scale(scale)).unwrap(), &basis);
        let x = [0.7, 0.0];
        // Exact cancellation leaves an empty field, which is still solvable.
        let combined = combined.unwrap().eval_at(&x, &basis, t)[0];
        let parts = solve_poisson(&u1, &basis).unwrap().eval_at(&x, &basis, t)[0]
            + scale * solve_poisson(&u2, &basis).unwrap().eval_at(&x, &basis, t)[0];
        prop_assert!((combined - parts).abs() < 1e-10 * (1.0 + parts.abs()));
    }
}
