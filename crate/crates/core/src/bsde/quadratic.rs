//! Quadratic-growth drivers: truncation in `y` and `z`, the exponential change of
//! variables `U = e^{κY}`, and the audit that none of the clamps bind at convergence.

use std::sync::Arc;

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::linalg;
use crate::martingale::PathBundle;
use crate::real::{clamp_sym, Real};

use super::picard::{solve_backward, BackwardProblem, PicardOptions};
use super::{
    BsdeSolution, Driver, DriverArgs, DriverMeta, DriverPartials, ForwardFeatures, Generator,
    Noise, PathDriver, StateFeatures, TerminalCondition,
};

/// `f_K(·, y, z) = f(·, ρ_K(y), z)`.
pub fn truncate_driver<T: Real>(driver: &Driver<T>, k_level: T) -> Result<Driver<T>> {
    if !(k_level > T::zero()) {
        return Err(Error::Config(format!(
            "truncation level must be positive, got {k_level}"
        )));
    }
    let f = driver.f.clone();
    let mut out = Driver::new(
        Arc::new(move |a: &DriverArgs<T>| {
            let args = DriverArgs {
                y: clamp_sym(a.y, k_level),
                ..*a
            };
            f(&args)
        }),
        driver.meta,
    );
    if let Some(grad) = driver.grad.clone() {
        out = out.with_grad(Arc::new(
            move |a: &DriverArgs<T>, g: &mut DriverPartials<T>| {
                let args = DriverArgs {
                    y: clamp_sym(a.y, k_level),
                    ..*a
                };
                grad(&args, g);
                if a.y.abs() > k_level {
                    g.dy = T::zero();
                }
            },
        ));
    }
    Ok(out)
}

/// `U = e^{κY}`, `V = κ U Z`.
pub fn exp_transform<T: Real>(
    y: &PathArray<T>,
    z: &PathArray<T>,
    kappa: T,
) -> Result<(PathArray<T>, PathArray<T>)> {
    if kappa == T::zero() {
        return Err(Error::Config("exponential transform needs κ ≠ 0".into()));
    }
    check_pair(y, z)?;
    let mut u = y.clone();
    let mut v = z.clone();
    for p in 0..y.paths() {
        for i in 0..y.times() {
            let ui = (kappa * y.get(p, i)).exp();
            u.set(p, i, ui);
            for c in v.at_mut(p, i) {
                *c = kappa * ui * *c;
            }
        }
    }
    Ok((u, v))
}

/// `Y = ln(U)/κ`, `Z = V/(κU)`; non-positive `U` is a domain error.
pub fn inverse_exp_transform<T: Real>(
    u: &PathArray<T>,
    v: &PathArray<T>,
    kappa: T,
) -> Result<(PathArray<T>, PathArray<T>)> {
    if kappa == T::zero() {
        return Err(Error::Config("exponential transform needs κ ≠ 0".into()));
    }
    check_pair(u, v)?;
    let mut y = u.clone();
    let mut z = v.clone();
    for p in 0..u.paths() {
        for i in 0..u.times() {
            let ui = u.get(p, i);
            if ui <= T::zero() {
                return Err(Error::Domain(format!(
                    "U = {ui} is not positive on path {p} at step {i}"
                )));
            }
            y.set(p, i, ui.ln() / kappa);
            for c in z.at_mut(p, i) {
                *c = *c / (kappa * ui);
            }
        }
    }
    Ok((y, z))
}

fn check_pair<T: Real>(a: &PathArray<T>, b: &PathArray<T>) -> Result<()> {
    if a.width() != 1 || a.paths() != b.paths() || a.times() != b.times() {
        return Err(Error::Shape("value and control arrays do not match".into()));
    }
    Ok(())
}

/// `g(u, v) = κ ρ_{c2}(u) f_K(ln(u∨c1)/κ, v/(κ(u∨c1))) − |v q*|²/(2(u∨c1))` at the driver level.
pub fn transformed_driver_g<T: Real>(f_k: &Driver<T>, kappa: T, c1: T, c2: T) -> Result<Driver<T>> {
    if kappa == T::zero() {
        return Err(Error::Config("transformed driver needs κ ≠ 0".into()));
    }
    if !(c1 > T::zero() && c1 <= c2) {
        return Err(Error::Config(format!(
            "need 0 < c1 ≤ c2, got c1 = {c1}, c2 = {c2}"
        )));
    }
    let f = f_k.f.clone();
    let half = T::lit(0.5);
    Ok(Driver::new(
        Arc::new(move |a: &DriverArgs<T>| {
            let uc = a.y.max(c1);
            let scale = T::one() / (kappa * uc);
            let zq: Vec<T> = a.zq.iter().map(|v| *v * scale).collect();
            let inner = DriverArgs {
                y: uc.ln() / kappa,
                zq: &zq,
                ..*a
            };
            let v2 = a.zq.iter().fold(T::zero(), |s, v| s + *v * *v);
            kappa * clamp_sym(a.y, c2) * f(&inner) - half * v2 / uc
        }),
        DriverMeta {
            lipschitz: false,
            kappa: T::zero(),
            ..f_k.meta
        },
    ))
}

/// How the quadratic equation is reduced to Lipschitz solves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuadraticMode {
    /// Truncate in `y`, pass to `U = e^{κY}`, truncate the control, invert.
    #[default]
    Transform,
    /// Picard directly on the control-truncated driver.
    Direct,
}

/// Options of [`solve_quadratic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticOptions {
    pub mode: QuadraticMode,
    pub picard: PicardOptions,
    /// `y`-truncation level; defaults to `2(‖F‖∞ + a)`.
    pub k_level: Option<f64>,
    /// Control truncation level `R` for `|Z q*|`.
    pub z_level: f64,
    /// Overrides the transform exponent.
    pub kappa: Option<f64>,
    /// Override the lower and upper clamps of the transformed `Y`.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    /// Turn a binding truncation into an error.
    pub strict: bool,
}

impl Default for QuadraticOptions {
    fn default() -> Self {
        Self {
            mode: QuadraticMode::Transform,
            picard: PicardOptions::default(),
            k_level: None,
            z_level: 100.0,
            kappa: None,
            c1: None,
            c2: None,
            strict: false,
        }
    }
}

/// Counts of samples where a clamp was active in the converged solution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TruncationAudit {
    pub k_level: f64,
    pub z_level: f64,
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    pub y_active: usize,
    pub z_active: usize,
    pub u_active: usize,
    pub max_abs_y: f64,
    pub max_z_norm: f64,
    /// Regression estimates projected back into the truncation band during the final sweep.
    pub clamped_estimates: usize,
}

impl TruncationAudit {
    pub fn binding(&self) -> bool {
        self.y_active + self.z_active + self.u_active > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "|Y| > K={:.4e} on {} samples, |Zq*| > R={:.4e} on {} samples, U outside [c1, c2] on {} samples, {} estimates clamped",
            self.k_level, self.y_active, self.z_level, self.z_active, self.u_active, self.clamped_estimates
        )
    }
}

/// Generator with its value argument clamped to `[−K, K]`.
pub struct YTruncated<G, T> {
    pub inner: G,
    pub k_level: T,
}

impl<T: Real, G: Generator<T>> Generator<T> for YTruncated<G, T> {
    #[inline]
    fn value(&self, p: usize, i: usize, y: T, z: &[T]) -> T {
        self.inner.value(p, i, clamp_sym(y, self.k_level), z)
    }
    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
}

/// `|Z q*|` from the bracket and clock increments of the noise, `None` when the clock is flat.
#[inline]
pub(crate) fn control_norm<T: Real, N: Noise<T>>(
    noise: &N,
    p: usize,
    i: usize,
    z: &[T],
    br: &mut [T],
) -> Option<T> {
    let dc = noise.clock_increment(p, i);
    if dc <= T::zero() {
        return None;
    }
    noise.bracket_increment(p, i, br);
    Some((linalg::quad_form(z, br, noise.dim()).max(T::zero()) / dc).sqrt())
}

/// Generator with the control projected on the ball `|Z q*| ≤ R`.
pub struct ZTruncated<'a, G, N, T> {
    pub inner: G,
    pub noise: &'a N,
    pub level: T,
}

impl<T: Real, G: Generator<T>, N: Noise<T>> Generator<T> for ZTruncated<'_, G, N, T> {
    fn value(&self, p: usize, i: usize, y: T, z: &[T]) -> T {
        let d = self.noise.dim();
        let mut br = vec![T::zero(); d * d];
        match control_norm(self.noise, p, i, z, &mut br) {
            Some(norm) if norm > self.level => {
                let s = self.level / norm;
                let zs: Vec<T> = z.iter().map(|v| *v * s).collect();
                self.inner.value(p, i, y, &zs)
            }
            _ => self.inner.value(p, i, y, z),
        }
    }
    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
}

/// Driver of `(U, V) = (e^{κY}, κ U Z)` built from a generator in the `Y` scale.
pub struct ExpTransformed<'a, G, N, T> {
    pub inner: G,
    pub noise: &'a N,
    pub kappa: T,
    pub c1: T,
    pub c2: T,
}

impl<T: Real, G: Generator<T>, N: Noise<T>> Generator<T> for ExpTransformed<'_, G, N, T> {
    fn value(&self, p: usize, i: usize, u: T, v: &[T]) -> T {
        let d = self.noise.dim();
        let uc = u.max(self.c1);
        let scale = T::one() / (self.kappa * uc);
        let z: Vec<T> = v.iter().map(|c| *c * scale).collect();
        let first =
            self.kappa * clamp_sym(u, self.c2) * self.inner.value(p, i, uc.ln() / self.kappa, &z);
        let dc = self.noise.clock_increment(p, i);
        if dc <= T::zero() {
            return first;
        }
        let mut br = vec![T::zero(); d * d];
        self.noise.bracket_increment(p, i, &mut br);
        let v2 = linalg::quad_form(v, &br, d) / dc;
        first - T::lit(0.5) * v2 / uc
    }
}

/// Constants of the transform derived from the growth metadata.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TransformConstants<T> {
    pub kappa: T,
    pub c1: T,
    pub c2: T,
    pub k_level: T,
}

pub(crate) fn transform_constants<T: Real>(
    meta: &DriverMeta<T>,
    f_bound: T,
    horizon: T,
    opts: &QuadraticOptions,
) -> Result<TransformConstants<T>> {
    if !f_bound.is_finite() {
        return Err(Error::Config(
            "quadratic solves need a bounded terminal condition".into(),
        ));
    }
    let kappa = match opts.kappa {
        Some(k) => T::lit(k),
        None if meta.kappa != T::zero() => meta.kappa,
        None => -meta.gamma,
    };
    let level = f_bound + meta.a * (meta.b * horizon).exp();
    let e = (kappa.abs() * level).exp();
    let k_level = match opts.k_level {
        Some(k) if k > 0.0 => T::lit(k),
        Some(k) => {
            return Err(Error::Config(format!(
                "truncation level must be positive, got {k}"
            )))
        }
        None => T::lit(2.0) * (f_bound + meta.a),
    };
    let k_level = if k_level > T::zero() {
        k_level
    } else {
        T::one()
    };
    let c1 = opts.c1.map_or(T::lit(0.5) / e, T::lit);
    let c2 = opts.c2.map_or(T::lit(2.0) * e, T::lit);
    if !(c1 > T::zero() && c1 <= c2) {
        return Err(Error::Config(format!(
            "need 0 < c1 ≤ c2, got c1 = {c1}, c2 = {c2}"
        )));
    }
    Ok(TransformConstants {
        kappa,
        c1,
        c2,
        k_level,
    })
}

/// Quadratic pipeline on an arbitrary noise, state and `Y`-scale generator.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_quadratic_on<T, N, S, G>(
    noise: &N,
    features: &S,
    generator: &G,
    terminal: &[T],
    start: usize,
    consts: TransformConstants<T>,
    opts: &QuadraticOptions,
) -> Result<BsdeSolution<T>>
where
    T: Real,
    N: Noise<T>,
    S: StateFeatures<T>,
    G: Generator<T>,
{
    if !(opts.z_level > 0.0) {
        return Err(Error::Config(
            "control truncation level must be positive".into(),
        ));
    }
    let r = T::lit(opts.z_level);
    let kappa = consts.kappa;
    let k_level = consts.k_level;
    let mut sol = if opts.mode == QuadraticMode::Direct {
        let g = ZTruncated {
            inner: generator,
            noise,
            level: r,
        };
        solve_backward(
            &BackwardProblem {
                noise,
                features,
                generator: &g,
                terminal,
                start,
                y_bounds: Some((-k_level, k_level)),
            },
            &opts.picard,
        )?
    } else if kappa == T::zero() {
        let g = ZTruncated {
            inner: YTruncated {
                inner: generator,
                k_level: consts.k_level,
            },
            noise,
            level: r,
        };
        solve_backward(
            &BackwardProblem {
                noise,
                features,
                generator: &g,
                terminal,
                start,
                y_bounds: Some((-k_level, k_level)),
            },
            &opts.picard,
        )?
    } else {
        let ut: Vec<T> = terminal.iter().map(|f| (kappa * *f).exp()).collect();
        let g = ZTruncated {
            inner: ExpTransformed {
                inner: YTruncated {
                    inner: generator,
                    k_level: consts.k_level,
                },
                noise,
                kappa,
                c1: consts.c1,
                c2: consts.c2,
            },
            noise,
            level: kappa.abs() * consts.c2 * r,
        };
        let mut s = solve_backward(
            &BackwardProblem {
                noise,
                features,
                generator: &g,
                terminal: &ut,
                start,
                y_bounds: Some((consts.c1, consts.c2)),
            },
            &opts.picard,
        )?;
        let mut u_active = 0usize;
        for i in start..s.y.times() {
            for p in 0..s.y.paths() {
                let u = s.y.get(p, i);
                if u < consts.c1 || u > consts.c2 {
                    u_active += 1;
                }
            }
        }
        let (y, z) = inverse_exp_transform(&s.y, &s.z, kappa)?;
        let mean_u = s.start_value;
        if mean_u <= T::zero() {
            return Err(Error::Domain(format!("mean of U at the start is {mean_u}")));
        }
        let slope = T::one() / (kappa * mean_u);
        s.start_value = mean_u.ln() / kappa;
        s.start_stderr = s.start_stderr * slope.abs();
        for v in s.start_targets.iter_mut() {
            *v = s.start_value + (*v - mean_u) * slope;
        }
        s.y = y;
        s.z = z;
        s.transform_kappa = Some(kappa);
        s.bound = s.y.sup_abs_from(start);
        s.truncation = Some(TruncationAudit {
            u_active,
            ..TruncationAudit::default()
        });
        s
    };

    let mut audit = sol.truncation.take().unwrap_or_default();
    audit.clamped_estimates = sol.report.clamped_estimates;
    audit.k_level = consts.k_level.f64();
    audit.z_level = opts.z_level;
    audit.kappa = kappa.f64();
    audit.c1 = consts.c1.f64();
    audit.c2 = consts.c2.f64();
    let d = noise.dim();
    let mut br = vec![T::zero(); d * d];
    let steps = noise.n_steps();
    for i in start..steps {
        for p in 0..noise.n_paths() {
            let y = sol.y.get(p, i).f64().abs();
            audit.max_abs_y = audit.max_abs_y.max(y);
            if opts.mode == QuadraticMode::Transform && y > audit.k_level {
                audit.y_active += 1;
            }
            if let Some(n) = control_norm(noise, p, i, sol.z.at(p, i), &mut br) {
                let n = n.f64();
                audit.max_z_norm = audit.max_z_norm.max(n);
                if n > opts.z_level {
                    audit.z_active += 1;
                }
            }
        }
    }
    if opts.strict && audit.binding() {
        return Err(Error::TruncationBinding(audit.summary()));
    }
    sol.truncation = Some(audit);
    Ok(sol)
}

/// Quadratic-growth solve along a forward solution, by exponential transform or directly.
pub fn solve_quadratic<T: Real>(
    driver: &Driver<T>,
    terminal: &TerminalCondition<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    opts: &QuadraticOptions,
) -> Result<BsdeSolution<T>> {
    let consts = transform_constants(&driver.meta, terminal.bound, bundle.grid.horizon(), opts)?;
    let values = terminal.evaluate(bundle, forward)?;
    let features = ForwardFeatures { bundle, forward };
    let generator = PathDriver {
        driver,
        bundle,
        forward,
    };
    solve_quadratic_on(
        bundle,
        &features,
        &generator,
        &values,
        forward.start.index,
        consts,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_forward, SdeCoefficients, StartPoint};
    use crate::martingale::{generate_paths, MartingaleModel, TimeGrid};

    fn args<'a>(y: f64, zq: &'a [f64]) -> DriverArgs<'a, f64> {
        DriverArgs {
            t: 0.0,
            x: &[],
            m: &[],
            y,
            zq,
            q: &[1.0],
        }
    }

    #[test]
    fn y_truncation_clamps_the_value_argument() {
        let id = Driver::<f64>::new(Arc::new(|a| a.y), DriverMeta::default());
        let fk = truncate_driver(&id, 2.0).unwrap();
        assert_eq!(fk.eval(&args(1.5, &[])), 1.5);
        assert_eq!(fk.eval(&args(3.0, &[])), 2.0);
        assert_eq!(fk.eval(&args(-7.0, &[])), -2.0);
        assert!(truncate_driver(&id, 0.0).is_err());
    }

    #[test]
    fn truncated_partials_vanish_outside_the_band() {
        let lin = Driver::linear(1.0, vec![0.0]);
        let fk = truncate_driver(&lin, 1.0).unwrap();
        let mut g = DriverPartials::zeros(0, 1);
        (fk.grad.as_ref().unwrap())(&args(2.0, &[0.0]), &mut g);
        assert_eq!(g.dy, 0.0);
        (fk.grad.as_ref().unwrap())(&args(0.5, &[0.0]), &mut g);
        assert_eq!(g.dy, -1.0);
    }

    #[test]
    fn exp_transform_values_and_round_trip() {
        let y = PathArray::from_vec(1, 2, 1, vec![0.0, 0.5]).unwrap();
        let z = PathArray::from_vec(1, 2, 1, vec![3.0, -1.0]).unwrap();
        let (u, v) = exp_transform(&y, &z, 1.0).unwrap();
        assert_eq!(u.get(0, 0), 1.0);
        assert_eq!(v.get(0, 0), 3.0);
        let (u2, _) = exp_transform(&y, &z, 2.0).unwrap();
        assert!((u2.get(0, 1) - std::f64::consts::E).abs() < 1e-15);
        let (y2, z2) =
            inverse_exp_transform(&u2, &exp_transform(&y, &z, 2.0).unwrap().1, 2.0).unwrap();
        for k in 0..2 {
            assert!((y2.get(0, k) - y.get(0, k)).abs() < 1e-15);
            assert!((z2.get(0, k) - z.get(0, k)).abs() < 1e-15);
        }
        let bad = PathArray::from_vec(1, 1, 1, vec![0.0]).unwrap();
        assert!(matches!(
            inverse_exp_transform(&bad, &bad, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn transformed_driver_reductions() {
        let g0 = transformed_driver_g(&Driver::<f64>::zero(), 1.0, 0.1, 10.0).unwrap();
        assert!((g0.eval(&args(1.0, &[2.0])) + 2.0).abs() < 1e-15);
        let lin = Driver::linear(0.3, vec![0.0]);
        let g = transformed_driver_g(&lin, 2.0, 0.1, 10.0).unwrap();
        let u: f64 = 1.7;
        let expect = 2.0 * u * (-0.3 * u.ln() / 2.0);
        assert!((g.eval(&args(u, &[0.0])) - expect).abs() < 1e-14);
        assert!(g.eval(&args(0.0, &[1.0])).is_finite());
        assert!(transformed_driver_g(&lin, 1.0, 2.0, 1.0).is_err());
    }

    fn bm(paths: usize, steps: usize) -> (PathBundle<f64>, ForwardSolution<f64>) {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let bundle = generate_paths(&MartingaleModel::brownian(1), &grid, paths, 5).unwrap();
        let coeffs = SdeCoefficients::constant(1, 1, vec![1.0], vec![0.0]);
        let fw =
            simulate_forward(&coeffs, &bundle, &StartPoint::new(0, vec![0.0], vec![0.0])).unwrap();
        (bundle, fw)
    }

    #[test]
    fn constant_terminal_in_both_modes() {
        let (bundle, fw) = bm(1000, 10);
        for mode in [QuadraticMode::Transform, QuadraticMode::Direct] {
            let opts = QuadraticOptions {
                mode,
                ..QuadraticOptions::default()
            };
            let mut drv = Driver::<f64>::zero();
            drv.meta.gamma = 1.0;
            let sol = solve_quadratic(&drv, &TerminalCondition::constant(0.7), &fw, &bundle, &opts)
                .unwrap();
            assert!(sol.y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
            assert!(!sol.truncation.unwrap().binding());
        }
    }

    #[test]
    fn strict_mode_rejects_binding_truncation() {
        let (bundle, fw) = bm(2000, 10);
        let opts = QuadraticOptions {
            z_level: 0.1,
            strict: true,
            ..QuadraticOptions::default()
        };
        let err = solve_quadratic(
            &Driver::entropic(0.5),
            &TerminalCondition::clipped_identity(-1.0, 1.0),
            &fw,
            &bundle,
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TruncationBinding(_)));
    }
}
