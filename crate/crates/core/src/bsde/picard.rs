//! Picard iteration with least-squares regression on every timestep.

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::linalg;
use crate::martingale::PathBundle;
use crate::parallel;
use crate::real::Real;
use crate::regression::{RegressionBasis, Regressor, StepFit};

use super::{
    mean_and_stderr, BsdeSolution, Driver, ForwardFeatures, Generator, Noise, PathDriver,
    PicardReport, StateFeatures, TerminalCondition,
};

/// Regressors are kept between iterations while they fit in this many bytes.
const CACHE_BYTES: usize = 512 << 20;

/// Iteration controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardOptions {
    pub basis: RegressionBasis,
    /// Stop once `sup |Y^{k+1} − Y^k| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Also report per-step standard errors of the fitted controls.
    pub control_stderr: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            tol: 1e-6,
            max_iter: 50,
            control_stderr: false,
        }
    }
}

/// Everything the backward sweep needs: noise, regression state, generator and terminal values.
pub struct BackwardProblem<'a, T, N, S, G> {
    pub noise: &'a N,
    pub features: &'a S,
    pub generator: &'a G,
    /// `Y_T` per path.
    pub terminal: &'a [T],
    /// First grid index of the solve.
    pub start: usize,
    /// A-priori range of `Y`; fitted values are projected onto it before reuse.
    pub y_bounds: Option<(T, T)>,
}

struct Sweep<T> {
    y: Vec<Vec<T>>,
    z: Vec<Vec<T>>,
    fits: Vec<Option<StepFit>>,
    start_targets: Vec<T>,
    max_condition: f64,
    clamped: usize,
    control_stderr: Option<Vec<Vec<f64>>>,
}

fn step_features<T: Real, S: StateFeatures<T>>(features: &S, paths: usize, i: usize) -> Vec<T> {
    let w = features.width();
    let mut buf = vec![T::zero(); paths * w];
    parallel::for_each_block(&mut buf, w, |range, block| {
        for (r, p) in range.enumerate() {
            features.fill(p, i, &mut block[r * w..(r + 1) * w]);
        }
    });
    buf
}

/// Per path the rows `ΔM_i (Δ⟨M⟩_i)⁻¹`, zero where the increment vanishes.
fn weighted_increments<T: Real, N: Noise<T>>(noise: &N, i: usize) -> Result<Vec<T>> {
    let paths = noise.n_paths();
    let d = noise.dim();
    let mut out = vec![T::zero(); paths * d];
    parallel::try_for_each_block(&mut out, d, |range, block| {
        let mut dm = vec![T::zero(); d];
        let mut br = vec![T::zero(); d * d];
        let mut inv = vec![T::zero(); d * d];
        for (r, p) in range.enumerate() {
            noise.increment(p, i, &mut dm);
            if dm.iter().all(|v| *v == T::zero()) {
                continue;
            }
            noise.bracket_increment(p, i, &mut br);
            if !linalg::invert(&br, d, &mut inv) {
                return Err(Error::Inconsistent(format!(
                    "singular bracket increment with nonzero martingale increment on path {p} at step {i}"
                )));
            }
            linalg::row_times(&dm, &inv, d, d, &mut block[r * d..(r + 1) * d]);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Solves the discretized backward equation `Y_i = Y_{i+1} + g(Y_i, Z_i) ΔC_i − Z_i ΔM_i`.
pub fn solve_backward<T, N, S, G>(
    problem: &BackwardProblem<'_, T, N, S, G>,
    opts: &PicardOptions,
) -> Result<BsdeSolution<T>>
where
    T: Real,
    N: Noise<T>,
    S: StateFeatures<T>,
    G: Generator<T>,
{
    let noise = problem.noise;
    let paths = noise.n_paths();
    let steps = noise.n_steps();
    let d = noise.dim();
    let start = problem.start;
    if problem.terminal.len() != paths {
        return Err(Error::Shape(format!(
            "{} terminal values for {paths} paths",
            problem.terminal.len()
        )));
    }
    if start > steps {
        return Err(Error::Config(format!(
            "start index {start} beyond grid of {steps} steps"
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }

    let mut y: Vec<Vec<T>> = vec![vec![T::zero(); paths]; steps + 1];
    let mut z: Vec<Vec<T>> = vec![vec![T::zero(); paths * d]; steps + 1];
    y[steps].copy_from_slice(problem.terminal);

    let mut cache: Vec<Option<Regressor>> = (0..=steps).map(|_| None).collect();
    let mut caching = true;
    let mut weights: Vec<Option<Vec<T>>> = (0..=steps).map(|_| None).collect();
    let mut report = PicardReport::default();
    let mut last: Option<Sweep<T>> = None;

    for _ in 0..opts.max_iter {
        let sweep = sweep(
            problem,
            opts,
            &y,
            &z,
            &mut cache,
            &mut caching,
            &mut weights,
        )?;
        let mut diff = 0.0f64;
        for i in start..=steps {
            for (a, b) in sweep.y[i].iter().zip(&y[i]) {
                diff = diff.max((a.f64() - b.f64()).abs());
            }
        }
        report.push(diff);
        y = sweep.y.clone();
        z = sweep.z.clone();
        last = Some(sweep);
        if problem.generator.is_zero() || diff < opts.tol {
            report.converged = true;
            break;
        }
    }
    let sweep = last.expect("at least one sweep");
    report.max_condition = sweep.max_condition;
    report.clamped_estimates = sweep.clamped;
    if !report.converged {
        return Err(Error::IterationLimit {
            iterations: report.iterations,
            last: *report.sup_diffs.last().unwrap_or(&f64::NAN),
            history: report.sup_diffs.clone(),
        });
    }

    let times = steps + 1;
    let mut ya = PathArray::filled(paths, times, 1, T::nan());
    let mut za = PathArray::filled(paths, times, d, T::nan());
    let mut bound = T::zero();
    for i in start..=steps {
        for p in 0..paths {
            let v = y[i][p];
            ya.set(p, i, v);
            bound = bound.max(v.abs());
            za.at_mut(p, i).copy_from_slice(&z[i][p * d..(p + 1) * d]);
        }
    }
    let (start_value, start_stderr) = mean_and_stderr(&sweep.start_targets);
    Ok(BsdeSolution {
        y: ya,
        z: za,
        u_orth: None,
        report,
        y_fits: sweep.fits,
        start,
        start_value,
        start_stderr,
        start_targets: sweep.start_targets,
        control_stderr: sweep.control_stderr,
        bound,
        truncation: None,
        transform_kappa: None,
        orthogonal_residual: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn sweep<T, N, S, G>(
    problem: &BackwardProblem<'_, T, N, S, G>,
    opts: &PicardOptions,
    y_prev: &[Vec<T>],
    z_prev: &[Vec<T>],
    cache: &mut [Option<Regressor>],
    caching: &mut bool,
    weights: &mut [Option<Vec<T>>],
) -> Result<Sweep<T>>
where
    T: Real,
    N: Noise<T>,
    S: StateFeatures<T>,
    G: Generator<T>,
{
    let noise = problem.noise;
    let paths = noise.n_paths();
    let steps = noise.n_steps();
    let d = noise.dim();
    let start = problem.start;
    let gen = problem.generator;

    let mut y: Vec<Vec<T>> = vec![Vec::new(); steps + 1];
    let mut z: Vec<Vec<T>> = vec![Vec::new(); steps + 1];
    y[steps] = problem.terminal.to_vec();
    let mut fits: Vec<Option<StepFit>> = (0..=steps).map(|_| None).collect();
    let mut control = opts.control_stderr.then(|| vec![Vec::new(); steps + 1]);
    let mut max_condition = 0.0f64;
    let mut clamped = 0usize;
    let mut sums = problem.terminal.to_vec();

    for i in (start..steps).rev() {
        if !gen.is_zero() {
            let (yp, zp) = (&y_prev[i], &z_prev[i]);
            parallel::for_each_block(&mut sums, 1, |range, block| {
                for (r, p) in range.enumerate() {
                    let g = gen.value(p, i, yp[p], &zp[p * d..(p + 1) * d]);
                    block[r] = block[r] + g * noise.clock_increment(p, i);
                }
            });
        }

        let owned;
        let reg: &Regressor = match &cache[i] {
            Some(r) => r,
            None => {
                let feats = step_features(problem.features, paths, i);
                let r = Regressor::new(&feats, problem.features.width(), &opts.basis)?;
                if *caching && paths * r.dim() * (steps - start) * 8 > CACHE_BYTES {
                    *caching = false;
                }
                if *caching {
                    cache[i] = Some(r);
                    cache[i].as_ref().expect("just stored")
                } else {
                    owned = r;
                    &owned
                }
            }
        };
        max_condition = max_condition.max(reg.condition());

        let (coef, fitted) = reg.fit(&sums)?;
        fits[i] = Some(StepFit {
            design: reg.design().clone(),
            coefficients: coef,
        });
        y[i] = fitted;
        if let Some((lo, hi)) = problem.y_bounds {
            for v in y[i].iter_mut() {
                if *v < lo || *v > hi {
                    *v = v.max(lo).min(hi);
                    clamped += 1;
                }
            }
        }

        if weights[i].is_none() {
            weights[i] = Some(weighted_increments(noise, i)?);
        }
        let w = weights[i].as_ref().expect("computed above");
        let (y_next, y_here) = (&y[i + 1], &y[i]);
        let mut zi = vec![T::zero(); paths * d];
        let mut target = vec![T::zero(); paths];
        let mut se = Vec::new();
        for k in 0..d {
            for p in 0..paths {
                target[p] = (y_next[p] - y_here[p]) * w[p * d + k];
            }
            let (_, fitted) = reg.fit(&target)?;
            if control.is_some() {
                se.push(reg.max_fitted_stderr(&target, &fitted));
            }
            for p in 0..paths {
                zi[p * d + k] = fitted[p];
            }
        }
        if let Some(c) = control.as_mut() {
            c[i] = se;
        }
        z[i] = zi;
    }
    if start < steps {
        z[steps] = z[steps - 1].clone();
    } else {
        z[steps] = vec![T::zero(); paths * d];
        fits[steps] = None;
    }
    for i in 0..start {
        y[i] = vec![T::nan(); paths];
        z[i] = vec![T::nan(); paths * d];
    }

    Ok(Sweep {
        y,
        z,
        fits,
        start_targets: sums,
        max_condition,
        clamped,
        control_stderr: control,
    })
}

/// Picard-regression solve of a Lipschitz backward equation along a forward solution.
pub fn solve_lipschitz<T: Real>(
    driver: &Driver<T>,
    terminal: &TerminalCondition<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    opts: &PicardOptions,
) -> Result<BsdeSolution<T>> {
    if !driver.meta.lipschitz {
        return Err(Error::Config(
            "driver is not flagged Lipschitz; use the quadratic solver".into(),
        ));
    }
    let values = terminal.evaluate(bundle, forward)?;
    let features = ForwardFeatures { bundle, forward };
    let generator = PathDriver {
        driver,
        bundle,
        forward,
    };
    let problem = BackwardProblem {
        noise: bundle,
        features: &features,
        generator: &generator,
        terminal: &values,
        start: forward.start.index,
        y_bounds: None,
    };
    solve_backward(&problem, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_forward, SdeCoefficients, StartPoint};
    use crate::martingale::{generate_paths, MartingaleModel, TimeGrid};

    fn setup(paths: usize, steps: usize, horizon: f64) -> (PathBundle<f64>, ForwardSolution<f64>) {
        let grid = TimeGrid::uniform(horizon, steps).unwrap();
        let bundle = generate_paths(&MartingaleModel::brownian(1), &grid, paths, 11).unwrap();
        let coeffs = SdeCoefficients::constant(1, 1, vec![1.0], vec![0.0]);
        let fw =
            simulate_forward(&coeffs, &bundle, &StartPoint::new(0, vec![0.0], vec![0.0])).unwrap();
        (bundle, fw)
    }

    #[test]
    fn zero_driver_constant_terminal_is_exact_after_one_sweep() {
        let (bundle, fw) = setup(2000, 20, 1.0);
        let sol = solve_lipschitz(
            &Driver::zero(),
            &TerminalCondition::constant(1.5),
            &fw,
            &bundle,
            &PicardOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.report.iterations, 1);
        assert!(sol.y.data().iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert!(sol.z.data().iter().all(|v| v.abs() < 1e-12));
        assert!(sol.bound <= 1.5 + 1e-12);
    }

    #[test]
    fn terminal_values_are_kept_exactly() {
        let (bundle, fw) = setup(3000, 10, 1.0);
        let term = TerminalCondition::clipped_identity(-1.0, 1.0);
        let sol = solve_lipschitz(
            &Driver::linear(0.5, vec![0.1]),
            &term,
            &fw,
            &bundle,
            &PicardOptions::default(),
        )
        .unwrap();
        let exact = term.evaluate(&bundle, &fw).unwrap();
        for p in 0..bundle.n_paths() {
            assert_eq!(sol.y.get(p, 10), exact[p]);
        }
    }

    #[test]
    fn identity_terminal_gives_unit_control() {
        let (bundle, fw) = setup(4000, 10, 1.0);
        let term = TerminalCondition::new(
            std::sync::Arc::new(|x: &[f64], _: &[f64]| x[0]),
            f64::INFINITY,
        );
        let sol = solve_lipschitz(
            &Driver::zero(),
            &term,
            &fw,
            &bundle,
            &PicardOptions::default(),
        )
        .unwrap();
        for i in 0..10 {
            let mean = (0..4000).map(|p| sol.z.get(p, i)).sum::<f64>() / 4000.0;
            assert!((mean - 1.0).abs() < 0.1, "mean Z at step {i} is {mean}");
            for p in 0..100 {
                assert!((sol.z.get(p, i) - 1.0).abs() < 0.5, "Z at step {i}");
            }
        }
        assert!(sol.start_value.abs() < 4.0 * sol.start_stderr + 1e-12);
    }

    #[test]
    fn fitted_values_are_projected_onto_the_bounds() {
        let (bundle, fw) = setup(2000, 10, 1.0);
        let values: Vec<f64> = (0..2000).map(|p| fw.x.at(p, 10)[0]).collect();
        let features = ForwardFeatures {
            bundle: &bundle,
            forward: &fw,
        };
        let driver = Driver::zero();
        let generator = PathDriver {
            driver: &driver,
            bundle: &bundle,
            forward: &fw,
        };
        let problem = BackwardProblem {
            noise: &bundle,
            features: &features,
            generator: &generator,
            terminal: &values,
            start: 0,
            y_bounds: Some((-0.5, 0.5)),
        };
        let sol = solve_backward(&problem, &PicardOptions::default()).unwrap();
        assert!(sol.report.clamped_estimates > 0);
        for i in 0..10 {
            for p in 0..2000 {
                assert!(sol.y.get(p, i).abs() <= 0.5);
            }
        }
        assert!(sol.start_value.abs() < 4.0 * sol.start_stderr + 1e-12);
    }

    #[test]
    fn non_lipschitz_flag_is_rejected() {
        let (bundle, fw) = setup(100, 4, 1.0);
        let err = solve_lipschitz(
            &Driver::entropic(1.0),
            &TerminalCondition::constant(0.0),
            &fw,
            &bundle,
            &PicardOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn iteration_limit_carries_history() {
        let (bundle, fw) = setup(500, 10, 1.0);
        let opts = PicardOptions {
            max_iter: 2,
            tol: 1e-300,
            ..PicardOptions::default()
        };
        let err = solve_lipschitz(
            &Driver::linear(1.0, vec![0.0]),
            &TerminalCondition::constant(1.0),
            &fw,
            &bundle,
            &opts,
        )
        .unwrap_err();
        match err {
            Error::IterationLimit {
                iterations,
                history,
                ..
            } => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 2);
            }
            e => panic!("unexpected {e:?}"),
        }
    }
}
