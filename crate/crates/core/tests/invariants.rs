use std::sync::Arc;

use proptest::prelude::*;
use qfbsde::array::PathArray;
use qfbsde::bsde::{
    exp_transform, inverse_exp_transform, mrp_transform, Driver, TerminalCondition,
};
use qfbsde::forward::{simulate_forward, simulate_variational, SdeCoefficients, StartPoint};
use qfbsde::markov::{representation_check, RepresentationCell};
use qfbsde::martingale::{generate_paths, MartingaleModel, TimeGrid};
use qfbsde::regression::{regress_conditional, RegressionBasis};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(24)
}

fn model(dim: usize, diffusion: bool) -> MartingaleModel<f64> {
    if diffusion {
        MartingaleModel::diffusion(
            dim,
            Arc::new(|_t, m: &[f64], out: &mut [f64]| {
                let d = m.len();
                out.fill(0.0);
                for k in 0..d {
                    out[k * d + k] = (1.0 + m[k] * m[k]).sqrt();
                }
                if d > 1 {
                    out[1] = 0.3;
                }
            }),
        )
    } else {
        MartingaleModel::brownian(dim)
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn grids_are_strictly_increasing(horizon in 0.1f64..5.0, steps in 1usize..200) {
        let g = TimeGrid::uniform(horizon, steps).unwrap();
        prop_assert_eq!(g.t(0), 0.0);
        prop_assert_eq!(g.t(steps), horizon);
        prop_assert!(g.points().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bundles_satisfy_clock_and_bracket_invariants(
        dim in 1usize..4,
        diffusion in any::<bool>(),
        seed in any::<u64>(),
        m0 in -1.0f64..1.0,
    ) {
        let grid = TimeGrid::uniform(1.0, 12).unwrap();
        let mdl = model(dim, diffusion).with_initial(vec![m0; dim]);
        let b = generate_paths(&mdl, &grid, 40, seed).unwrap();
        let dd = dim * dim;
        let mut db = vec![0.0; dd];
        for p in 0..40 {
            prop_assert!(b.m.at(p, 0).iter().all(|v| *v == m0));
            let tr0: f64 = (0..dim).map(|k| b.bracket.at(p, 0)[k * dim + k]).sum();
            prop_assert!((b.clock.get(p, 0) - tr0.atan()).abs() < 1e-15);
            for i in 0..=12 {
                let c = b.clock.get(p, i);
                prop_assert!((0.0..std::f64::consts::FRAC_PI_2).contains(&c));
                let br = b.bracket.at(p, i);
                for r in 0..dim {
                    prop_assert!(br[r * dim + r] >= 0.0);
                    for s in 0..dim {
                        prop_assert_eq!(br[r * dim + s], br[s * dim + r]);
                    }
                }
            }
            for i in 0..12 {
                let dc = b.dclock(p, i);
                prop_assert!(dc >= 0.0);
                b.dbracket(p, i, &mut db);
                let q = b.q.at(p, i);
                for r in 0..dim {
                    prop_assert!(db[r * dim + r] >= 0.0);
                    for s in 0..dim {
                        let qq: f64 = (0..dim).map(|k| q[r * dim + k] * q[s * dim + k]).sum();
                        let scale = db.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
                        prop_assert!((qq * dc - db[r * dim + s]).abs() <= 1e-10 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn orthogonal_weights_sum_to_one(seed in any::<u64>(), vol in 0.1f64..3.0, dim in 1usize..3) {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(dim).with_orthogonal(vol), &grid, 30, seed).unwrap();
        let tr = mrp_transform(&b).unwrap();
        for (a, c) in tr.phi1.data().iter().zip(tr.phi2.data()) {
            prop_assert!((a + c - 1.0).abs() <= 1e-12);
            prop_assert!(*a >= 0.0 && *c >= 0.0);
        }
    }

    #[test]
    fn flows_start_at_identity(seed in any::<u64>(), x0 in -2.0f64..2.0, start in 0usize..8) {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, 20, seed).unwrap();
        let c = SdeCoefficients::linear(0.3, 0.05);
        let sp = StartPoint::new(start, vec![x0], vec![0.0]);
        let fw = simulate_forward(&c, &b, &sp).unwrap();
        let (dx, dm) = simulate_variational(&c, &b, &fw).unwrap();
        for p in 0..20 {
            prop_assert_eq!(fw.x.get(p, start), x0);
            prop_assert_eq!(dx.get(p, start), 1.0);
            prop_assert_eq!(dm.get(p, start), 0.0);
        }
    }

    #[test]
    fn bounded_terminals_respect_their_bound(x in -50.0f64..50.0, level in 0.1f64..5.0) {
        for f in [TerminalCondition::smooth_clip(level), TerminalCondition::clipped_identity(-level, level / 2.0)] {
            prop_assert!((f.f)(&[x], &[0.0]).abs() <= f.bound);
        }
    }

    #[test]
    fn entropic_driver_passes_its_growth_audit(
        gamma in 0.1f64..4.0,
        y in -10.0f64..10.0,
        z in prop::collection::vec(-10.0f64..10.0, 2),
    ) {
        let d = Driver::entropic(gamma);
        let q = vec![1.0, 0.0, 0.0, 1.0];
        let sample = (0.5, vec![0.0], vec![0.0, 0.0], y, z, q);
        prop_assert!(d.audit_growth(&[sample]).is_empty());
    }

    #[test]
    fn exponential_transform_round_trips(
        ys in prop::collection::vec(-3.0f64..3.0, 6),
        zs in prop::collection::vec(-3.0f64..3.0, 12),
        kappa in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
    ) {
        let y = PathArray::from_vec(2, 3, 1, ys).unwrap();
        let z = PathArray::from_vec(2, 3, 2, zs).unwrap();
        let (u, v) = exp_transform(&y, &z, kappa).unwrap();
        prop_assert!(u.data().iter().all(|v| *v > 0.0));
        let (y2, z2) = inverse_exp_transform(&u, &v, kappa).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()).chain(z.data().iter().zip(z2.data())) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn constants_are_reproduced_by_regression(
        c in -100.0f64..100.0,
        degree in 0usize..4,
        xs in prop::collection::vec(-3.0f64..3.0, 120),
    ) {
        let targets = vec![c; 60];
        let basis = RegressionBasis { degree, ridge: 0.0 };
        let (_, fitted) = regress_conditional(&xs, 2, &targets, &basis).unwrap();
        prop_assert!(fitted.iter().all(|f| (f - c).abs() <= 1e-9 * (1.0 + c.abs())));
    }

    #[test]
    fn residual_quantiles_are_ordered(
        zs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 100..160),
    ) {
        let cells = zs
            .iter()
            .map(|&(z, p)| RepresentationCell { t: 0.0, x: vec![0.0], m: vec![0.0], z: vec![z], pred: vec![p] })
            .collect();
        let r = representation_check(cells, 0).unwrap();
        prop_assert!(r.q25 <= r.median && r.median <= r.q75);
    }
}
