use adass::bspline::{gram, product_integral, BasisSystem, Domain, SubIntervalGrid};
use adass::estimator::{predict, CoefficientSurface, DerivOrders, PenaltySystem};
use adass::fdata::{center, project, FunctionalSample};
use adass::quadrature::linspace;
use adass::tuning::{evolve, EaassConfig, ParamRange};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn basis() -> impl Strategy<Value = BasisSystem> {
    (1usize..=5, 0usize..=8, -2.0f64..2.0, 0.5f64..3.0)
        .prop_map(|(order, interior, a, len)| BasisSystem::new(order, interior, Domain::new(a, a + len).unwrap()).unwrap())
}

fn unit_cubic(interior: usize) -> BasisSystem {
    BasisSystem::new(4, interior, Domain::unit()).unwrap()
}

fn sample(n: usize, grid: usize, seed: Vec<f64>) -> FunctionalSample {
    let g = linspace(0.0, 1.0, grid);
    let values = DMatrix::from_fn(n, grid, |i, j| {
        let c = &seed[i % seed.len()..];
        c[0] * (3.0 * g[j]).sin() + c.get(1).copied().unwrap_or(0.5) * g[j] * g[j] - 0.3
    });
    FunctionalSample::on_grid(g, values).unwrap()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_of_unity(b in basis(), u in 0.0f64..=1.0) {
        let d = b.domain();
        let x = d.start + u * d.length();
        let sum: f64 = b.eval(x, 0).unwrap().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences(interior in 0usize..=10, order in 2usize..=5, u in 0.02f64..0.98) {
        let b = BasisSystem::new(order, interior, Domain::unit()).unwrap();
        prop_assume!(b.breakpoints().iter().all(|k| (u - k).abs() > 1e-4));
        let h = 1e-6;
        for d in 1..order {
            let exact = b.eval(u, d).unwrap();
            let (hi, lo) = (b.eval(u + h, d - 1).unwrap(), b.eval(u - h, d - 1).unwrap());
            let scale = exact.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            for p in 0..exact.len() {
                let fd = (hi[p] - lo[p]) / (2.0 * h);
                prop_assert!((fd - exact[p]).abs() <= 1e-6 * scale, "d={d} p={p} fd={fd} exact={}", exact[p]);
            }
        }
    }

    #[test]
    fn product_integral_is_additive(b in basis(), da in 0usize..3, db in 0usize..3, mut cuts in proptest::collection::vec(0.0f64..=1.0, 3)) {
        prop_assume!(da < b.order() && db < b.order());
        cuts.sort_by(f64::total_cmp);
        let d = b.domain();
        let [c, m, e] = [0, 1, 2].map(|i| d.start + cuts[i] * d.length());
        let whole = product_integral(&b, da, &b, db, c, e).unwrap();
        let parts = product_integral(&b, da, &b, db, c, m).unwrap() + product_integral(&b, da, &b, db, m, e).unwrap();
        prop_assert!((whole - parts).amax() < 1e-12 * (1.0 + 1e3 * (b.order() as f64)));
    }

    #[test]
    fn gram_is_symmetric_semidefinite(b in basis(), deriv in 0usize..3) {
        prop_assume!(deriv < b.order());
        let d = b.domain();
        let g = gram(&b, deriv, d.start, d.end).unwrap();
        prop_assert!((&g - g.transpose()).amax() <= 1e-12 * g.amax().max(1.0));
        prop_assert!(min_eigenvalue(&g) > -1e-10 * g.amax().max(1.0));
    }

    #[test]
    fn blocks_sum_to_whole_domain_gram(interior in 0usize..8, mut inner in proptest::collection::vec(0.01f64..0.99, 0..5)) {
        let b = unit_cubic(interior);
        inner.sort_by(f64::total_cmp);
        inner.dedup_by(|a, c| (*a - *c).abs() < 1e-6);
        let mut bp = vec![0.0];
        bp.extend(inner);
        bp.push(1.0);
        let grid = SubIntervalGrid::new(bp, Domain::unit()).unwrap();
        let ps = PenaltySystem::new(&b, &b, grid.clone(), grid, DerivOrders::default()).unwrap();
        let sum = ps.w_s().iter().fold(DMatrix::zeros(b.dimension(), b.dimension()), |acc, w| acc + w);
        let sum_r = ps.r_s().iter().fold(DMatrix::zeros(b.dimension(), b.dimension()), |acc, r| acc + r);
        prop_assert!((sum - gram(&b, 0, 0.0, 1.0).unwrap()).amax() < 1e-12);
        prop_assert!((sum_r - gram(&b, 2, 0.0, 1.0).unwrap()).amax() < 1e-12 * (1.0 + interior as f64).powi(3) * 10.0);
    }

    #[test]
    fn projection_is_linear(a in -3.0f64..3.0, c in -3.0f64..3.0, s1 in proptest::collection::vec(-2.0f64..2.0, 2..6), s2 in proptest::collection::vec(-2.0f64..2.0, 2..6)) {
        let b = unit_cubic(5);
        let (f, g) = (sample(4, 51, s1), sample(4, 51, s2));
        let combo = FunctionalSample::on_grid(f.grid().to_vec(), f.values() * a + g.values() * c).unwrap();
        let lhs = project(&combo, &b).unwrap();
        let rhs = project(&f, &b).unwrap() * a + project(&g, &b).unwrap() * c;
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn centering_is_idempotent(seed in proptest::collection::vec(-5.0f64..5.0, 2..8), n in 1usize..7) {
        let s = sample(n, 21, seed);
        let (once, _) = center(&s).unwrap();
        let (twice, mean) = center(&once).unwrap();
        prop_assert!((once.values() - twice.values()).amax() < 1e-12);
        prop_assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn assembled_penalty_is_semidefinite(ms in 0usize..4, mt in 0usize..4, w in proptest::collection::vec(0.05f64..20.0, 50), ls in 1e-4f64..10.0, lt in 1e-4f64..10.0) {
        let (bs, bt) = (unit_cubic(ms), unit_cubic(mt));
        let mut ps = PenaltySystem::on_knots(&bs, &bt, DerivOrders::default()).unwrap();
        let (r, c) = (ps.grid_s().cell_count(), ps.grid_t().cell_count());
        let ws = DMatrix::from_fn(r, c, |i, j| w[(i * c + j) % w.len()]);
        let wt = DMatrix::from_fn(r, c, |i, j| w[(i * c + j + 7) % w.len()]);
        ps.set_weights(ws, wt).unwrap();
        let p = ps.assemble(ls, lt);
        prop_assert!((&p - p.transpose()).amax() <= 1e-12 * p.amax());
        prop_assert!(min_eigenvalue(&p) > -1e-10 * p.amax());
    }

    #[test]
    fn prediction_is_linear_in_coefficients(a in -2.0f64..2.0, seed in proptest::collection::vec(-1.0f64..1.0, 36)) {
        let b = unit_cubic(2);
        let dim = b.dimension();
        let m1 = DMatrix::from_fn(dim, dim, |i, j| seed[i * dim + j]);
        let m2 = DMatrix::from_fn(dim, dim, |i, j| seed[j * dim + i] - 0.5);
        let x = sample(3, 41, seed.clone());
        let t = linspace(0.0, 1.0, 17);
        let surf = |m: DMatrix<f64>| CoefficientSurface::new(m, b.clone(), b.clone()).unwrap();
        let lhs = predict(&surf(&m1 * a + &m2), &x, &t).unwrap();
        let rhs = predict(&surf(m1) , &x, &t).unwrap() * a + predict(&surf(m2), &x, &t).unwrap();
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }
}

fn bumpy(p: &[f64], centre: &[f64]) -> f64 {
    p.iter().zip(centre).map(|(v, c)| (v - c).powi(2) + 0.1 * (7.0 * v).sin()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evolution_keeps_the_elite(seed in any::<u64>(), size in 2usize..12, frac in 0.05f64..0.9, iters in 0usize..12, centre in proptest::collection::vec(0.0f64..1.0, 3)) {
        let config = EaassConfig { population_size: size, truncation_fraction: frac, max_iterations: iters, seed, ..Default::default() };
        let ranges = vec![ParamRange::linear(0.0, 1.0), ParamRange::log(1e-3, 1.0), ParamRange::linear(0.0, 1.0)];
        let run = evolve(&config, &ranges, |p| Ok(bumpy(p, &centre))).unwrap();
        prop_assert_eq!(run.history.len(), iters + 1);
        prop_assert!(run.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(run.best_error, *run.history.last().unwrap());
        prop_assert_eq!(run.best_error, bumpy(&run.best, &centre));
        let replaced = config.replaced_count();
        prop_assert!((1..size).contains(&replaced));
        prop_assert_eq!(run.records.len(), size + iters * replaced);
        for r in &run.records {
            prop_assert!(r.member < size);
            prop_assert!(r.params.iter().zip(&ranges).all(|(v, rg)| *v >= rg.lo && *v <= rg.hi));
        }
        // the returned error was actually computed for some member
        prop_assert!(run.records.iter().any(|r| r.error == Some(run.best_error)));
        let again = evolve(&config, &ranges, |p| Ok(bumpy(p, &centre))).unwrap();
        prop_assert_eq!(again.best, run.best);
        prop_assert_eq!(again.records, run.records);
    }
}

#[test]
fn cross_vector_is_vectorized_cross_product() {
    let b = unit_cubic(3);
    let x = sample(5, 31, vec![0.3, -1.2, 0.8]);
    let y = sample(5, 31, vec![1.1, 0.2]);
    let d = adass::DesignMatrices::new(&x, &y, &b, &b).unwrap();
    let xty = d.x.transpose() * &d.y;
    assert_eq!(d.cross(), DVector::from_column_slice(xty.as_slice()));
}
