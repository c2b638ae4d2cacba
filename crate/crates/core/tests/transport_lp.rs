use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
use pathmfg_core::{wasserstein1, ParticleMeasure};
use proptest::prelude::*;

fn lp_w1(mu: &ParticleMeasure, nu: &ParticleMeasure) -> f64 {
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let mut vars = Vec::with_capacity(mu.len() * nu.len());
    for (x, _) in mu.iter() {
        for (y, _) in nu.iter() {
            let c = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            vars.push(problem.add_var(c, (0.0, f64::INFINITY)));
        }
    }
    for i in 0..mu.len() {
        let mut e = LinearExpr::empty();
        for j in 0..nu.len() {
            e.add(vars[i * nu.len() + j], 1.0);
        }
        problem.add_constraint(e, ComparisonOp::Eq, mu.weight(i));
    }
    // The last column constraint is implied by the others.
    for j in 0..nu.len() - 1 {
        let mut e = LinearExpr::empty();
        for i in 0..mu.len() {
            e.add(vars[i * nu.len() + j], 1.0);
        }
        problem.add_constraint(e, ComparisonOp::Eq, nu.weight(j));
    }
    problem.solve().unwrap().objective()
}

fn measure(dim: usize, max_len: usize) -> impl Strategy<Value = ParticleMeasure> {
    (1..=max_len).prop_flat_map(move |n| {
        (
            prop::collection::vec(-3.0f64..3.0, n * dim),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(move |(points, raw)| {
                let total: f64 = raw.iter().sum();
                ParticleMeasure::new(dim, points, raw.iter().map(|w| w / total).collect()).unwrap()
            })
    })
}

fn triple() -> impl Strategy<Value = (ParticleMeasure, ParticleMeasure, ParticleMeasure)> {
    (1usize..=3).prop_flat_map(|d| (measure(d, 10), measure(d, 10), measure(d, 10)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_linear_program(
        (mu, nu) in (1usize..=3).prop_flat_map(|d| (measure(d, 15), measure(d, 15)))
    ) {
        let w = wasserstein1(&mu, &nu).unwrap();
        let lp = lp_w1(&mu, &nu);
        prop_assert!((w - lp).abs() <= 1e-9 * (1.0 + lp), "w1 {w} lp {lp}");
    }

    #[test]
    fn is_a_metric((a, b, c) in triple()) {
        let ab = wasserstein1(&a, &b).unwrap();
        let ba = wasserstein1(&b, &a).unwrap();
        let bc = wasserstein1(&b, &c).unwrap();
        let ac = wasserstein1(&a, &c).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-10 * (1.0 + ab));
        prop_assert!(ac <= ab + bc + 1e-10);
        prop_assert!(wasserstein1(&a, &a).unwrap() <= 1e-12);
    }

    #[test]
    fn translation_moves_diracs_by_the_shift(x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let a = ParticleMeasure::dirac(&[x, 0.0]).unwrap();
        let b = ParticleMeasure::dirac(&[y, 0.0]).unwrap();
        prop_assert!((wasserstein1(&a, &b).unwrap() - (x - y).abs()).abs() <= 1e-12);
    }
}
