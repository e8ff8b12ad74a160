use asgd::problems::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point_in_box(spec: &ProblemSpec, dir: &[f64], frac: f64) -> Vec<f64> {
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    spec.x_star
        .iter()
        .zip(dir)
        .map(|(s, v)| s + v / norm * frac * spec.radius)
        .collect()
}

fn dataset(dim: usize, rows: &[f64], labels: &[f64]) -> Dataset {
    let points = rows.chunks(dim).map(<[f64]>::to_vec).collect();
    Dataset::new(points, labels.to_vec()).unwrap()
}

fn regression_strategy() -> impl Strategy<Value = (ProblemSpec, Vec<f64>, Vec<f64>, f64)> {
    (1usize..4, 2usize..12).prop_flat_map(|(d, m)| {
        (
            prop::collection::vec(-2.0f64..2.0, d * m),
            prop::collection::vec(-3.0f64..3.0, m),
            0.1f64..1.0,
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
            0.0f64..1.0,
        )
            .prop_map(move |(rows, labels, ridge, u, v, frac)| {
                let spec = regression_problem(&dataset(d, &rows, &labels), ridge).unwrap();
                (spec, u, v, frac)
            })
    })
}

fn quadratic_strategy() -> impl Strategy<Value = (ProblemSpec, Vec<f64>, Vec<f64>, f64)> {
    (1usize..5, 0.0f64..2.0).prop_flat_map(|(d, sigma)| {
        (
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
            0.0f64..1.0,
        )
            .prop_map(move |(u, v, frac)| (quadratic_problem(d, sigma).unwrap(), u, v, frac))
    })
}

fn any_problem() -> impl Strategy<Value = (ProblemSpec, Vec<f64>, Vec<f64>, f64)> {
    prop_oneof![quadratic_strategy(), regression_strategy()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oracle_is_unbiased((spec, dir, _, frac) in any_problem(), seed in any::<u64>()) {
        let x = point_in_box(&spec, &dir, frac);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = vec![0.0; spec.dim];
        let mut sum = vec![0.0; spec.dim];
        let mut sum_sq = vec![0.0; spec.dim];
        for _ in 0..n {
            spec.gradient_into(&x, &mut rng, &mut g);
            for j in 0..spec.dim {
                sum[j] += g[j];
                sum_sq[j] += g[j] * g[j];
            }
        }
        let exact = spec.full_gradient(&x);
        for j in 0..spec.dim {
            let mean = sum[j] / n as f64;
            let sd = (sum_sq[j] / n as f64 - mean * mean).max(0.0).sqrt();
            prop_assert!((mean - exact[j]).abs() <= 4.0 * sd / (n as f64).sqrt() + 1e-9 * (1.0 + exact[j].abs()),
                "coordinate {}: mean {} vs {}", j, mean, exact[j]);
        }
    }

    #[test]
    fn second_moment_bound_holds((spec, dir, _, frac) in any_problem(), seed in any::<u64>()) {
        let x = point_in_box(&spec, &dir, frac);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = vec![0.0; spec.dim];
        let mut total = 0.0;
        for _ in 0..n {
            spec.gradient_into(&x, &mut rng, &mut g);
            total += g.iter().map(|v| v * v).sum::<f64>();
        }
        prop_assert!(total / n as f64 <= spec.second_moment);
    }
}

proptest! {
    #[test]
    fn expected_lipschitz((spec, u, v, frac) in any_problem(), seed in any::<u64>()) {
        let x = point_in_box(&spec, &u, frac);
        let y = point_in_box(&spec, &v, 1.0 - frac);
        let mut gx = vec![0.0; spec.dim];
        let mut gy = vec![0.0; spec.dim];
        let n = 2000;
        let mut rx = ChaCha8Rng::seed_from_u64(seed);
        let mut ry = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..n {
            spec.gradient_into(&x, &mut rx, &mut gx);
            spec.gradient_into(&y, &mut ry, &mut gy);
            total += dist_sq(&gx, &gy).sqrt();
        }
        let bound = spec.lipschitz * dist_sq(&x, &y).sqrt();
        prop_assert!(total / n as f64 <= bound * 1.05 + 1e-12);
    }

    #[test]
    fn strong_convexity((spec, u, v, frac) in any_problem()) {
        let x = point_in_box(&spec, &u, frac);
        let y = point_in_box(&spec, &v, 1.0 - frac);
        let gx = spec.full_gradient(&x);
        let gy = spec.full_gradient(&y);
        let inner: f64 = x.iter().zip(&y).zip(gx.iter().zip(&gy)).map(|((a, b), (p, q))| (a - b) * (p - q)).sum();
        let d2 = dist_sq(&x, &y);
        prop_assert!(inner >= spec.strong_convexity * d2 - 1e-9 * (1.0 + d2));
        prop_assert!(spec.strong_convexity <= spec.lipschitz);
    }

    #[test]
    fn minimizer_has_zero_gradient((spec, _, _, _) in regression_strategy()) {
        let g = spec.full_gradient(&spec.x_star);
        prop_assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn sample_gradient_is_finite_and_sized((spec, dir, _, frac) in any_problem(), seed in any::<u64>()) {
        let x = point_in_box(&spec, &dir, frac);
        let s = spec.sample_gradient(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.value.len(), spec.dim);
        prop_assert!(s.value.iter().all(|v| v.is_finite()));
        prop_assert_eq!(s.source_view, x);
        if let RngDraw::Index(i) = s.draw {
            if let Objective::Regression { data, .. } = &spec.objective {
                prop_assert!(i < data.len());
            }
        }
    }
}

#[test]
fn regression_examples() {
    let one = regression_problem(&dataset(1, &[1.0], &[2.0]), 0.0).unwrap();
    assert!((one.x_star[0] - 2.0).abs() < 1e-12);
    assert!((one.strong_convexity - 1.0).abs() < 1e-12 && (one.lipschitz - 1.0).abs() < 1e-12);
    let two = regression_problem(&dataset(1, &[1.0, -1.0], &[1.0, -1.0]), 0.0).unwrap();
    assert!((two.x_star[0] - 1.0).abs() < 1e-12);
    assert!(matches!(Dataset::new(vec![], vec![]), Err(ProblemError::EmptyDataset)));
    let collinear = dataset(2, &[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0]);
    assert!(matches!(regression_problem(&collinear, 0.0), Err(ProblemError::Unidentifiable)));
}

#[test]
fn radius_restates_second_moment() {
    let spec = quadratic_problem(4, 0.1).unwrap();
    assert!((spec.second_moment - (10.0f64 + 0.3 * 2.0).powi(2)).abs() < 1e-12);
    let small = spec.with_radius(2.0).unwrap();
    assert!((small.second_moment - (2.0f64 + 0.6).powi(2)).abs() < 1e-12);
    assert!(quadratic_problem(1, 0.0).unwrap().with_radius(0.0).is_err());
}
