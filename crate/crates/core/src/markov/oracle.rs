//! The explicit example `dX = σ(t, X) dM`, `σ = (1 + x)·1{t ≥ T/2}`, `F(x) = log(1 + x)`,
//! `f ≡ 0`, for which `u(t, x, m) = log(1 + x) − ½ E[M_T² − M_{t∨T/2}² | M_t = m]`.

use std::sync::Arc;

use crate::bsde::{Driver, PicardOptions, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward::SdeCoefficients;
use crate::martingale::{generate_paths_from, MartingaleKind, MartingaleModel, TimeGrid};
use crate::real::Real;

use super::{MarkovProblem, SolveMethod};

/// Oracle value with its Monte Carlo standard error (zero for closed forms).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleValue<T> {
    pub value: T,
    pub stderr: T,
}

/// Forward coefficients of the example; the switch time `T/2` must be a grid point.
pub fn appendix_a3_coefficients<T: Real>(horizon: T) -> SdeCoefficients<T> {
    let half = horizon * T::lit(0.5);
    let tol = horizon * T::lit(1e-9);
    let on = move |t: T| t >= half - tol;
    let sigma = Arc::new(move |t: T, x: &[T], _: &[T], out: &mut [T]| {
        out[0] = if on(t) { T::one() + x[0] } else { T::zero() };
    });
    let drift = Arc::new(|_: T, _: &[T], _: &[T], out: &mut [T]| out[0] = T::zero());
    let dsx = Arc::new(move |t: T, _: &[T], _: &[T], out: &mut [T]| {
        out[0] = if on(t) { T::one() } else { T::zero() };
    });
    let zero = Arc::new(|_: T, _: &[T], _: &[T], out: &mut [T]| out.fill(T::zero()));
    SdeCoefficients::new(1, 1, sigma, drift)
        .with_partials(dsx, zero.clone(), zero.clone(), zero)
        .with_lipschitz(T::one())
        .with_discontinuities(vec![half])
}

/// `F(x) = log(1 + x)`; unbounded, and not finite for `x ≤ −1`.
pub fn appendix_a3_terminal<T: Real>() -> TerminalCondition<T> {
    TerminalCondition::new(Arc::new(|x: &[T], _: &[T]| x[0].ln_1p()), T::infinity()).with_grad(
        Arc::new(|x: &[T], _: &[T], gx: &mut [T], gm: &mut [T]| {
            gx[0] = T::one() / (T::one() + x[0]);
            gm[0] = T::zero();
        }),
    )
}

/// The example as a restartable problem with `f ≡ 0`.
pub fn appendix_a3_problem<T: Real>(
    model: MartingaleModel<T>,
    grid: TimeGrid<T>,
    paths: usize,
    seed: u64,
    picard: PicardOptions,
) -> MarkovProblem<T> {
    let horizon = grid.horizon();
    MarkovProblem {
        model,
        grid,
        coeffs: appendix_a3_coefficients(horizon),
        driver: Driver::zero(),
        terminal: appendix_a3_terminal(),
        paths,
        seed,
        method: SolveMethod::Lipschitz(picard),
    }
}

/// `u(t, x, m)` of the example. Brownian models use the closed form
/// `log(1 + x) − (T − max(t, T/2))/2`; diffusion models estimate
/// `E[M_T² − M_s² | M_t = m]` by an inner simulation on `inner_grid` (which must contain
/// `t` and `T/2`).
pub fn appendix_a3_oracle<T: Real>(
    model: &MartingaleModel<T>,
    inner_grid: &TimeGrid<T>,
    t: T,
    x: T,
    m: T,
    inner_paths: usize,
    seed: u64,
) -> Result<OracleValue<T>> {
    if x <= -T::one() {
        return Err(Error::Domain(format!("log(1 + x) undefined at x = {x}")));
    }
    let horizon = inner_grid.horizon();
    if t < T::zero() || t > horizon {
        return Err(Error::Config(format!("t = {t} outside [0, {horizon}]")));
    }
    let s = t.max(horizon * T::lit(0.5));
    let base = x.ln_1p();
    match &model.kind {
        MartingaleKind::Brownian => Ok(OracleValue {
            value: base - T::lit(0.5) * (horizon - s),
            stderr: T::zero(),
        }),
        MartingaleKind::Diffusion(_) => {
            if model.dim != 1 {
                return Err(Error::Config("the example uses a scalar martingale".into()));
            }
            let start = inner_grid
                .index_of(t)
                .ok_or_else(|| Error::Config(format!("t = {t} is not on the inner grid")))?;
            let mid = inner_grid
                .index_of(s)
                .ok_or_else(|| Error::Config(format!("{s} is not on the inner grid")))?;
            let b = generate_paths_from(model, inner_grid, inner_paths, seed, start, &[m])?;
            let n = inner_grid.n_steps();
            let vals: Vec<f64> = (0..inner_paths)
                .map(|p| {
                    let (mt, ms) = (b.m.get(p, n).f64(), b.m.get(p, mid).f64());
                    mt * mt - ms * ms
                })
                .collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            Ok(OracleValue {
                value: base - T::lit(0.5 * mean),
                stderr: T::lit(0.5 * (var / k).sqrt()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_closed_form_values() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let bm = MartingaleModel::<f64>::brownian(1);
        let v = appendix_a3_oracle(&bm, &grid, 0.0, 0.0, 0.0, 0, 0).unwrap();
        assert!((v.value + 0.25).abs() < 1e-15);
        let v = appendix_a3_oracle(&bm, &grid, 0.8, 0.0, 0.3, 0, 0).unwrap();
        assert!((v.value + 0.1).abs() < 1e-12);
        let v = appendix_a3_oracle(&bm, &grid, 1.0, 0.5, 0.0, 0, 0).unwrap();
        assert_eq!(v.value, 0.5f64.ln_1p());
        assert!(matches!(
            appendix_a3_oracle(&bm, &grid, 0.0, -1.0, 0.0, 0, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn diffusion_inner_simulation_matches_second_moment_formula() {
        // a(m) = √(1+m²) gives E[M_T² − M_s² | M_t = m] = (1+m²)(e^{T−t} − e^{s−t}).
        let model = MartingaleModel::diffusion(
            1,
            Arc::new(|_: f64, m: &[f64], out: &mut [f64]| out[0] = (1.0 + m[0] * m[0]).sqrt()),
        );
        let grid = TimeGrid::uniform(1.0, 400).unwrap();
        let v = appendix_a3_oracle(&model, &grid, 0.0, 0.0, 1.0, 40_000, 8).unwrap();
        let exact = -0.5 * 2.0 * (1f64.exp() - 0.5f64.exp());
        assert!(
            (v.value - exact).abs() < 5.0 * v.stderr + 0.01,
            "{} vs {exact} ± {}",
            v.value,
            v.stderr
        );
    }
}
