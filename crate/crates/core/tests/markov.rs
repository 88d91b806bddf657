use std::sync::Arc;

use qfbsde::bsde::{Driver, PicardOptions, TerminalCondition};
use qfbsde::forward::SdeCoefficients;
use qfbsde::markov::{estimate_surface, estimate_u, MarkovProblem, SolveMethod};
use qfbsde::martingale::{MartingaleModel, TimeGrid};

fn problem(terminal: TerminalCondition<f64>, drift: f64) -> MarkovProblem<f64> {
    MarkovProblem {
        model: MartingaleModel::brownian(1),
        grid: TimeGrid::uniform(1.0, 10).unwrap(),
        coeffs: SdeCoefficients::constant(1, 1, vec![0.5], vec![drift]),
        driver: Driver::zero(),
        terminal,
        paths: 4000,
        seed: 17,
        method: SolveMethod::Lipschitz(PicardOptions::default()),
    }
}

/// `E[g(m + W_τ)]` by Simpson's rule.
fn heat(g: impl Fn(f64) -> f64, m: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return g(m);
    }
    let n = 4000;
    let h = 20.0 / n as f64;
    let mut s = 0.0;
    for k in 0..=n {
        let z = -10.0 + k as f64 * h;
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        s += w * g(m + tau.sqrt() * z) * (-0.5 * z * z).exp();
    }
    s * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn identity_payoff_surface_is_affine_in_x() {
    let terminal = TerminalCondition::new(Arc::new(|x: &[f64], _: &[f64]| x[0]), f64::INFINITY);
    let p = problem(terminal, 0.2);
    let s = estimate_surface(&p, &[0.0, 0.5], &[-1.0, 0.0, 1.0], &[-0.5, 0.0, 0.5]).unwrap();
    let mut k = 0;
    for &t in &s.times {
        for &x in &s.xs {
            for _ in &s.ms {
                // The drift runs on the clock C = arctan(t).
                let exact = x + 0.2 * (1.0f64.atan() - t.atan());
                assert!(
                    (s.u[k] - exact).abs() <= 5.0 * s.stderr[k] + 1e-9,
                    "u = {} vs {exact}",
                    s.u[k]
                );
                k += 1;
            }
        }
    }
    let interior = s.d2u.iter().flatten().count();
    assert!(interior > 0);
    for v in s.d2u.iter().flatten() {
        assert!((v - 1.0).abs() < 0.05, "d2u {v}");
    }
    for v in s.d3u.iter().flatten() {
        assert!(v.abs() < 0.05, "d3u {v}");
    }
}

#[test]
fn martingale_dependent_payoff_matches_the_heat_kernel() {
    let terminal = TerminalCondition::new(Arc::new(|_: &[f64], m: &[f64]| m[0].tanh()), 1.0);
    let p = problem(terminal, 0.0);
    let nodes = vec![
        (0.0, vec![0.0], vec![0.4]),
        (0.5, vec![1.0], vec![-0.8]),
        (1.0, vec![0.0], vec![0.3]),
    ];
    let est = estimate_u(&p, &nodes).unwrap();
    for (e, (t, _, m)) in est.iter().zip(&nodes) {
        let exact = heat(f64::tanh, m[0], 1.0 - t);
        assert!(
            (e.u - exact).abs() <= 5.0 * e.stderr + 1e-12,
            "t = {t}: {} ± {} vs {exact}",
            e.u,
            e.stderr
        );
    }
    assert!(est[2].stderr <= 1e-12);
}

#[test]
fn nodes_off_the_grid_are_rejected() {
    let p = problem(TerminalCondition::constant(1.0), 0.0);
    assert!(estimate_u(&p, &[(0.33, vec![0.0], vec![0.0])]).is_err());
}
