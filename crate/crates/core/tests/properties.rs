use hjframe::coupling::{CouplingMatrix, ProbabilityVector, StochasticMatrix};
use hjframe::grid::{TorusGrid, VelocityGrid};
use hjframe::hamiltonian::{HamiltonianSpec, Potential};
use hjframe::paths::{cylinder_probability, read_path, sample_index_path, write_path, Cylinder};
use hjframe::solver::{lagrangian_for, pinned_value, DppOptions};
use hjframe::stopping::{decompose_simple, dyadic_approximation, dyadic_ceiling, StoppingRule};
use proptest::prelude::*;

/// Generator from off-diagonal rates; the cycle `i → i+1` is kept positive.
fn coupling_from(m: usize, rates: &[f64]) -> CouplingMatrix {
    let mut rows = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let r = rates[i * 4 + j];
                rows[i][j] = if j == (i + 1) % m { -(r + 0.05) } else { -r };
            }
        }
        rows[i][i] = -rows[i].iter().sum::<f64>();
    }
    CouplingMatrix::new(&rows).unwrap()
}

fn distribution(w: &[f64], m: usize) -> ProbabilityVector {
    let s: f64 = w[..m].iter().sum();
    ProbabilityVector::new(w[..m].iter().map(|v| v / s).collect()).unwrap()
}

fn cylinder(gaps: &[f64], idx: &[usize], m: usize) -> Cylinder {
    let mut t = 0.0;
    let times = gaps
        .iter()
        .map(|g| {
            t += g;
            t
        })
        .collect();
    Cylinder::new(times, idx.iter().map(|j| j % m).collect()).unwrap()
}

fn system() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (
        1usize..=4,
        prop::collection::vec(0.0f64..2.0, 16),
        prop::collection::vec(0.05f64..1.0, 4),
    )
}

/// `(λ₂, π, e^{-(k/λ₂)Λ})` with `λ₂` the smallest nonzero |Re λ|.
fn perron_data(c: &CouplingMatrix, k: f64) -> (f64, ProbabilityVector, StochasticMatrix) {
    let gap = c
        .entries()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re.abs())
        .filter(|r| *r > 1e-9)
        .fold(f64::INFINITY, f64::min);
    let pi = c.stationary_distribution().unwrap();
    let p = c.semigroup(k / gap).unwrap();
    (gap, pi, p)
}

fn max_deviation(p: &StochasticMatrix, pi: &ProbabilityVector, m: usize) -> f64 {
    (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (p.get(i, j) - pi.get(j)).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn semigroup_is_stochastic_and_multiplicative((m, rates, _) in system(), t in 0.0f64..6.0, s in 0.0f64..6.0) {
        let c = coupling_from(m, &rates);
        let pt = c.semigroup(t).unwrap();
        let ps = c.semigroup(s).unwrap();
        let pts = c.semigroup(t + s).unwrap();
        for i in 0..m {
            prop_assert!((pt.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            for j in 0..m {
                prop_assert!(pt.get(i, j) >= -1e-12);
            }
        }
        prop_assert!((pt.mul(&ps) - pts.matrix()).abs().max() <= 1e-9);
    }

    #[test]
    fn symmetric_semigroup_reaches_stationary_law((m, rates, _) in system()) {
        prop_assume!(m >= 2);
        let mut rows = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in (i + 1)..m {
                let r = rates[i * 4 + j] + 0.05;
                rows[i][j] = -r;
                rows[j][i] = -r;
            }
        }
        for i in 0..m {
            rows[i][i] = -rows[i].iter().sum::<f64>();
        }
        let c = CouplingMatrix::new(&rows).unwrap();
        let (gap, pi, p) = perron_data(&c, 10.0);
        prop_assert!(pi.as_slice().iter().all(|v| (v - 1.0 / m as f64).abs() < 1e-12));
        prop_assert!(max_deviation(&p, &pi, m) <= 1e-4, "gap {gap}");
    }

    #[test]
    fn semigroup_rows_approach_stationary_law((m, rates, _) in system()) {
        prop_assume!(m >= 2);
        let c = coupling_from(m, &rates);
        // non-normal generators carry a prefactor on e^{-λ₂t}; see the ledger
        let (gap, pi, p) = perron_data(&c, 12.0);
        prop_assert!(max_deviation(&p, &pi, m) <= 1e-4, "gap {gap}");
    }

    #[test]
    fn kolmogorov_consistency(
        (m, rates, w) in system(),
        gaps in prop::collection::vec(0.01f64..1.0, 1..5),
        idx in prop::collection::vec(0usize..4, 5),
        split in 0.05f64..0.95,
        pos_seed in 0usize..8,
    ) {
        let c = coupling_from(m, &rates);
        let a = distribution(&w, m);
        let cyl = cylinder(&gaps, &idx[..gaps.len()], m);
        let base = cylinder_probability(&c, &a, &cyl).unwrap();
        let pos = pos_seed % (cyl.times.len() + 1);
        let lo = if pos == 0 { 0.0 } else { cyl.times[pos - 1] };
        let hi = if pos == cyl.times.len() { lo + 1.0 } else { cyl.times[pos] };
        let t = lo + split * (hi - lo);
        let total: f64 = (0..m).map(|j| {
            let mut times = cyl.times.clone();
            let mut ind = cyl.indices.clone();
            times.insert(pos, t);
            ind.insert(pos, j);
            cylinder_probability(&c, &a, &Cylinder::new(times, ind).unwrap()).unwrap()
        }).sum();
        prop_assert!((total - base).abs() <= 1e-12);
    }

    #[test]
    fn measure_is_linear_in_initial_law(
        (m, rates, w) in system(),
        w2 in prop::collection::vec(0.05f64..1.0, 4),
        lam in 0.0f64..1.0,
        gaps in prop::collection::vec(0.01f64..1.0, 1..4),
        idx in prop::collection::vec(0usize..4, 4),
    ) {
        let c = coupling_from(m, &rates);
        let a = distribution(&w, m);
        let b = distribution(&w2, m);
        let mix = ProbabilityVector::new(
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| lam * x + (1.0 - lam) * y).collect(),
        ).unwrap();
        let cyl = cylinder(&gaps, &idx[..gaps.len()], m);
        let lhs = cylinder_probability(&c, &mix, &cyl).unwrap();
        let rhs = lam * cylinder_probability(&c, &a, &cyl).unwrap()
            + (1.0 - lam) * cylinder_probability(&c, &b, &cyl).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn restricted_measure_propagates_by_semigroup(
        (m, rates, w) in system(),
        gaps in prop::collection::vec(0.01f64..1.0, 1..4),
        idx in prop::collection::vec(0usize..4, 4),
        extra in 0.01f64..1.0,
        later in 0.01f64..2.0,
    ) {
        let c = coupling_from(m, &rates);
        let a = distribution(&w, m);
        let cyl = cylinder(&gaps, &idx[..gaps.len()], m);
        let t = cyl.last_time() + extra;
        let s = t + later;
        let d_at = |time: f64| -> Vec<f64> {
            (0..m).map(|i| {
                let mut times = cyl.times.clone();
                let mut ind = cyl.indices.clone();
                times.push(time);
                ind.push(i);
                cylinder_probability(&c, &a, &Cylinder::new(times, ind).unwrap()).unwrap()
            }).collect()
        };
        let propagated = c.semigroup(s - t).unwrap().left_apply(&d_at(t));
        for (p, q) in propagated.iter().zip(d_at(s)) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn dyadic_ceiling_is_strictly_above_and_close(tau in 0.0f64..20.0, level in 0u32..12) {
        let d = dyadic_ceiling(tau, level);
        let step = 0.5f64.powi(level as i32);
        prop_assert!(d > tau);
        prop_assert!(d <= tau + step + 1e-12);
        prop_assert!(((d / step) - (d / step).round()).abs() < 1e-9);
    }

    #[test]
    fn level_sets_and_tails_agree(
        (m, rates, _) in system(),
        t in 0.05f64..3.0,
        level in 1u32..6,
        seed in 0u64..1000,
    ) {
        prop_assume!(m >= 2);
        let c = coupling_from(m, &rates);
        let rule = dyadic_approximation(&StoppingRule::hitting(vec![m - 1], t), level);
        let dec = decompose_simple(&rule).unwrap();
        let path = sample_index_path(&c, &ProbabilityVector::basis(m, 0), t + 2.0, seed);
        let (lhs, rhs) = dec.identity_sides(&path).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn path_text_round_trip((m, rates, w) in system(), horizon in 0.1f64..5.0, seed in 0u64..1000) {
        let c = coupling_from(m, &rates);
        let path = sample_index_path(&c, &distribution(&w, m), horizon, seed);
        let mut buf = Vec::new();
        write_path(&mut buf, m, 1, &path).unwrap();
        let (m2, dim, back) = read_path(std::io::Cursor::new(buf)).unwrap();
        prop_assert_eq!(m2, m);
        prop_assert_eq!(dim, 1);
        prop_assert_eq!(back.initial(), path.initial());
        prop_assert_eq!(back.jumps().len(), path.jumps().len());
        for (a, b) in back.jumps().iter().zip(path.jumps()) {
            prop_assert_eq!(a.1, b.1);
            prop_assert!((a.0 - b.0).abs() <= 1e-12 * (1.0 + b.0));
        }
    }

    #[test]
    fn velocity_mirror_is_an_involution(q_max in 0.5f64..5.0, half in 1usize..12, dim in 1usize..=2) {
        let v = VelocityGrid::new(dim, q_max, 2 * half + 1).unwrap();
        for k in 0..v.len() {
            let m = v.mirror(k);
            prop_assert_eq!(v.mirror(m), k);
            for (a, b) in v.velocity(k).iter().zip(v.velocity(m)) {
                prop_assert!((a + b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_nodes(n in 8usize..40, dim in 1usize..=2, node_seed in 0usize..10_000) {
        let g = TorusGrid::new(dim, n).unwrap();
        let values: Vec<f64> = (0..g.len()).map(|k| (k as f64 * 0.37).sin()).collect();
        let node = node_seed % g.len();
        prop_assert!((g.interpolate(&values, &g.coords(node)) - values[node]).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pinned_value_shifts_exactly(b0 in -2.0f64..2.0, b1 in -2.0f64..2.0, mu in -5.0f64..5.0) {
        let spec = HamiltonianSpec::quadratic(1, vec![Potential::cosine(1.0, 1.0), Potential::cosine(0.5, 2.0)]).unwrap();
        let c = CouplingMatrix::new(&[vec![1.0, -1.0], vec![-2.0, 2.0]]).unwrap();
        let grid = TorusGrid::new(1, 24).unwrap();
        let (t, _) = lagrangian_for(&spec, &c, &grid, 2.0, 4.0, None).unwrap();
        let opts = DppOptions { dt: 0.02, tol: 1e-10, max_iter: 100_000 };
        let base = pinned_value(&t, &c, &[0.0], &[b0, b1], 2.0, &opts).unwrap();
        let moved = pinned_value(&t, &c, &[0.0], &[b0 + mu, b1 + mu], 2.0, &opts).unwrap();
        prop_assert!(moved.field.max_abs_diff(&base.field.shifted(&[mu, mu])) <= 1e-12);
        // the pin condition: v(y) ≤ b
        for i in 0..2 {
            prop_assert!(base.report.pin_values[i] <= [b0, b1][i] + 1e-12);
        }
    }
}
