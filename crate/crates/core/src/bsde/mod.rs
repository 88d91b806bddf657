//! Backward equations solved by least-squares Monte Carlo with Picard iteration.
//!
//! The solver core works on three abstractions: a [`Noise`] (martingale increments,
//! their brackets and the clock), [`StateFeatures`] (the regression state per path and
//! step) and a [`Generator`] (the driver evaluated along paths). Drivers in the usual
//! deterministic form `f(t, x, m, y, Z q*)` are lifted into generators by [`PathDriver`].

mod bmo;
mod orthogonal;
mod picard;
mod quadratic;

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::martingale::PathBundle;
use crate::real::Real;
use crate::regression::StepFit;

pub use bmo::{bmo_norm_estimate, tower_residual, TowerResidual};
pub use orthogonal::{
    mrp_transform, original_residual, solve_quadratic_with_orthogonal, AugmentedFeatures,
    AugmentedNoise, MrpGenerator, MrpTransform,
};
pub use picard::{solve_backward, solve_lipschitz, BackwardProblem, PicardOptions};
pub use quadratic::{
    exp_transform, inverse_exp_transform, solve_quadratic, transformed_driver_g, truncate_driver,
    ExpTransformed, QuadraticMode, QuadraticOptions, TruncationAudit, YTruncated, ZTruncated,
};

/// Arguments of a driver evaluation. `zq` is the rotated control `Z q*`, `q` the density.
#[derive(Clone, Copy)]
pub struct DriverArgs<'a, T> {
    pub t: T,
    pub x: &'a [T],
    pub m: &'a [T],
    pub y: T,
    pub zq: &'a [T],
    pub q: &'a [T],
}

/// Partial derivatives of a driver, written by a [`DriverGradFn`].
#[derive(Clone, Debug, PartialEq)]
pub struct DriverPartials<T> {
    pub dx: Vec<T>,
    pub dm: Vec<T>,
    pub dy: T,
    pub dz: Vec<T>,
}

impl<T: Real> DriverPartials<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            dx: vec![T::zero(); n],
            dm: vec![T::zero(); d],
            dy: T::zero(),
            dz: vec![T::zero(); d],
        }
    }
}

pub type DriverFn<T> = Arc<dyn Fn(&DriverArgs<T>) -> T + Send + Sync>;
pub type DriverGradFn<T> = Arc<dyn Fn(&DriverArgs<T>, &mut DriverPartials<T>) + Send + Sync>;

/// Growth metadata of a driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverMeta<T> {
    /// Quadratic coefficient in `z`.
    pub gamma: T,
    /// Coefficient of the orthogonal bracket term `κ/2 ∫ d⟨L,L⟩`.
    pub kappa: T,
    /// Bound `a` for `|f(·, 0, 0)|`.
    pub a: T,
    /// Linear growth in `y`.
    pub b: T,
    /// Bound of the Lipschitz process (metadata only).
    pub c_theta: T,
    /// Globally Lipschitz in `(y, z)`.
    pub lipschitz: bool,
    /// Identically zero.
    pub zero: bool,
    /// Free of `m`.
    pub m_free: bool,
}

impl<T: Real> Default for DriverMeta<T> {
    fn default() -> Self {
        Self {
            gamma: T::zero(),
            kappa: T::zero(),
            a: T::zero(),
            b: T::zero(),
            c_theta: T::zero(),
            lipschitz: true,
            zero: false,
            m_free: true,
        }
    }
}

/// Driver `f(t, x, m, y, Z q*)` with optional partials and metadata.
#[derive(Clone)]
pub struct Driver<T: Real> {
    pub f: DriverFn<T>,
    pub grad: Option<DriverGradFn<T>>,
    pub meta: DriverMeta<T>,
}

impl<T: Real> fmt::Debug for Driver<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("meta", &self.meta)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Real> Driver<T> {
    pub fn new(f: DriverFn<T>, meta: DriverMeta<T>) -> Self {
        Self {
            f,
            grad: None,
            meta,
        }
    }

    pub fn with_grad(mut self, grad: DriverGradFn<T>) -> Self {
        self.grad = Some(grad);
        self
    }

    #[inline]
    pub fn eval(&self, args: &DriverArgs<T>) -> T {
        (self.f)(args)
    }

    pub fn zero() -> Self {
        Self::new(
            Arc::new(|_| T::zero()),
            DriverMeta {
                zero: true,
                ..DriverMeta::default()
            },
        )
        .with_grad(Arc::new(|_, g: &mut DriverPartials<T>| {
            g.dx.fill(T::zero());
            g.dm.fill(T::zero());
            g.dy = T::zero();
            g.dz.fill(T::zero());
        }))
    }

    /// `f = −r·y + μ·(Z q*)`.
    pub fn linear(r: T, mu: Vec<T>) -> Self {
        let mu2 = mu.clone();
        let lip = mu.iter().fold(r.abs(), |s, v| s + v.abs());
        Self::new(
            Arc::new(move |a: &DriverArgs<T>| {
                let mut s = -r * a.y;
                for (m, z) in mu.iter().zip(a.zq) {
                    s = s + *m * *z;
                }
                s
            }),
            DriverMeta {
                b: r.abs(),
                c_theta: lip,
                ..DriverMeta::default()
            },
        )
        .with_grad(Arc::new(move |_, g: &mut DriverPartials<T>| {
            g.dx.fill(T::zero());
            g.dm.fill(T::zero());
            g.dy = -r;
            for (o, m) in g.dz.iter_mut().zip(&mu2) {
                *o = *m;
            }
        }))
    }

    /// Entropic driver `f = −(γ/2)|Z q*|²`.
    pub fn entropic(gamma: T) -> Self {
        let half = T::lit(0.5);
        Self::new(
            Arc::new(move |a: &DriverArgs<T>| {
                -half * gamma * a.zq.iter().fold(T::zero(), |s, z| s + *z * *z)
            }),
            DriverMeta {
                gamma,
                lipschitz: false,
                ..DriverMeta::default()
            },
        )
        .with_grad(Arc::new(
            move |a: &DriverArgs<T>, g: &mut DriverPartials<T>| {
                g.dx.fill(T::zero());
                g.dm.fill(T::zero());
                g.dy = T::zero();
                for (o, z) in g.dz.iter_mut().zip(a.zq) {
                    *o = -gamma * *z;
                }
            },
        ))
    }

    /// Spot-check of the (H2) growth bound `|f| ≤ a + b·a·|y| + (γ/2)|z|²` at sampled
    /// arguments. Returns the sample indices that violate it.
    pub fn audit_growth(&self, samples: &[(T, Vec<T>, Vec<T>, T, Vec<T>, Vec<T>)]) -> Vec<usize> {
        let meta = &self.meta;
        let eta = meta.a.max(T::lit(1e-12));
        samples
            .iter()
            .enumerate()
            .filter_map(|(k, (t, x, m, y, zq, q))| {
                let args = DriverArgs {
                    t: *t,
                    x,
                    m,
                    y: *y,
                    zq,
                    q,
                };
                let v = self.eval(&args).abs();
                let z2 = zq.iter().fold(T::zero(), |s, z| s + *z * *z);
                let bound = eta + meta.b * eta * y.abs() + T::lit(0.5) * meta.gamma * z2;
                let slack = T::lit(1e-9) * (T::one() + bound);
                (v > bound + slack || !v.is_finite()).then_some(k)
            })
            .collect()
    }
}

/// Terminal condition `F(x, m)` with its sup bound.
#[derive(Clone)]
pub struct TerminalCondition<T: Real> {
    pub f: Arc<dyn Fn(&[T], &[T]) -> T + Send + Sync>,
    /// Gradient `(∂ₓF, ∂ₘF)` written into the two output slices.
    pub grad: Option<Arc<dyn Fn(&[T], &[T], &mut [T], &mut [T]) + Send + Sync>>,
    pub bound: T,
}

impl<T: Real> fmt::Debug for TerminalCondition<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCondition")
            .field("bound", &self.bound)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Real> TerminalCondition<T> {
    pub fn new(f: Arc<dyn Fn(&[T], &[T]) -> T + Send + Sync>, bound: T) -> Self {
        Self {
            f,
            grad: None,
            bound,
        }
    }

    pub fn with_grad(
        mut self,
        g: Arc<dyn Fn(&[T], &[T], &mut [T], &mut [T]) + Send + Sync>,
    ) -> Self {
        self.grad = Some(g);
        self
    }

    pub fn constant(c: T) -> Self {
        Self::new(Arc::new(move |_, _| c), c.abs()).with_grad(Arc::new(|_, _, gx, gm| {
            gx.fill(T::zero());
            gm.fill(T::zero());
        }))
    }

    /// `F(x) = clamp(x₀, lo, hi)`.
    pub fn clipped_identity(lo: T, hi: T) -> Self {
        Self::new(
            Arc::new(move |x, _| x[0].max(lo).min(hi)),
            lo.abs().max(hi.abs()),
        )
        .with_grad(Arc::new(move |x, _, gx: &mut [T], gm: &mut [T]| {
            gx.fill(T::zero());
            gm.fill(T::zero());
            if x[0] > lo && x[0] < hi {
                gx[0] = T::one();
            }
        }))
    }

    /// Smooth clip `F(x) = L·tanh(x₀/L)`.
    pub fn smooth_clip(level: T) -> Self {
        Self::new(Arc::new(move |x, _| level * (x[0] / level).tanh()), level).with_grad(Arc::new(
            move |x, _, gx: &mut [T], gm: &mut [T]| {
                gx.fill(T::zero());
                gm.fill(T::zero());
                let c = (x[0] / level).cosh();
                gx[0] = T::one() / (c * c);
            },
        ))
    }

    /// Samples `F(X_T, M^{t,m}_T)` on every path; non-finite values are a domain error.
    pub fn evaluate(&self, bundle: &PathBundle<T>, forward: &ForwardSolution<T>) -> Result<Vec<T>> {
        let n_steps = bundle.n_steps();
        let mut m = vec![T::zero(); bundle.dim];
        let mut out = Vec::with_capacity(bundle.n_paths());
        for p in 0..bundle.n_paths() {
            forward.m_at(bundle, p, n_steps, &mut m);
            let v = (self.f)(forward.x.at(p, n_steps), &m);
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "terminal condition is not finite on path {p} (x = {:?})",
                    forward.x.at(p, n_steps)
                )));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Spot-check of (H1): sampled points where `|F|` exceeds the declared bound.
    pub fn audit_bound(&self, points: &[(Vec<T>, Vec<T>)]) -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter_map(|(k, (x, m))| {
                let v = (self.f)(x, m);
                (!v.is_finite() || v.abs() > self.bound * (T::one() + T::lit(1e-12))).then_some(k)
            })
            .collect()
    }
}

/// Increments of the martingale basis seen by the backward equation.
pub trait Noise<T>: Sync {
    fn n_paths(&self) -> usize;
    fn n_steps(&self) -> usize;
    fn dim(&self) -> usize;
    fn increment(&self, p: usize, i: usize, out: &mut [T]);
    /// Bracket increment, row-major `dim × dim`.
    fn bracket_increment(&self, p: usize, i: usize, out: &mut [T]);
    fn clock_increment(&self, p: usize, i: usize) -> T;
}

impl<T: Real> Noise<T> for PathBundle<T> {
    fn n_paths(&self) -> usize {
        PathBundle::n_paths(self)
    }
    fn n_steps(&self) -> usize {
        PathBundle::n_steps(self)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    #[inline]
    fn increment(&self, p: usize, i: usize, out: &mut [T]) {
        self.dm(p, i, out)
    }
    #[inline]
    fn bracket_increment(&self, p: usize, i: usize, out: &mut [T]) {
        self.dbracket(p, i, out)
    }
    #[inline]
    fn clock_increment(&self, p: usize, i: usize) -> T {
        self.dclock(p, i)
    }
}

/// Raw regression state per path and step.
pub trait StateFeatures<T>: Sync {
    fn width(&self) -> usize;
    fn fill(&self, p: usize, i: usize, out: &mut [T]);
}

/// Features `(X_t, M^{t,m}_t)`.
pub struct ForwardFeatures<'a, T> {
    pub bundle: &'a PathBundle<T>,
    pub forward: &'a ForwardSolution<T>,
}

impl<T: Real> StateFeatures<T> for ForwardFeatures<'_, T> {
    fn width(&self) -> usize {
        self.forward.n() + self.bundle.dim
    }
    #[inline]
    fn fill(&self, p: usize, i: usize, out: &mut [T]) {
        let n = self.forward.n();
        out[..n].copy_from_slice(self.forward.x.at(p, i));
        self.forward.m_at(self.bundle, p, i, &mut out[n..]);
    }
}

/// Driver evaluated along paths.
pub trait Generator<T>: Sync {
    /// Value at path `p`, step `i` for value `y` and control `z` (in basis coordinates).
    fn value(&self, p: usize, i: usize, y: T, z: &[T]) -> T;
    /// True when the generator is identically zero.
    fn is_zero(&self) -> bool {
        false
    }
}

impl<T: Real, G: Generator<T>> Generator<T> for &G {
    #[inline]
    fn value(&self, p: usize, i: usize, y: T, z: &[T]) -> T {
        (**self).value(p, i, y, z)
    }
    fn is_zero(&self) -> bool {
        (**self).is_zero()
    }
}

/// Lifts a [`Driver`] to a generator along a forward solution; computes `Z q*` from the bundle.
pub struct PathDriver<'a, T: Real> {
    pub driver: &'a Driver<T>,
    pub bundle: &'a PathBundle<T>,
    pub forward: &'a ForwardSolution<T>,
}

impl<T: Real> PathDriver<'_, T> {
    /// `Z q*` at `(p, i)`.
    #[inline]
    pub fn rotate(&self, p: usize, i: usize, z: &[T], out: &mut [T]) {
        let d = self.bundle.dim;
        let q = self.bundle.q.at(p, i);
        for a in 0..d {
            let mut s = T::zero();
            for b in 0..d {
                s = s + z[b] * q[a * d + b];
            }
            out[a] = s;
        }
    }

    /// Evaluates the driver at `(p, i)` for an already rotated control.
    #[inline]
    pub fn value_rotated(&self, p: usize, i: usize, y: T, zq: &[T]) -> T {
        let d = self.bundle.dim;
        let mut m = [T::zero(); 8];
        let mut mv;
        let m_slice: &mut [T] = if d <= 8 {
            &mut m[..d]
        } else {
            mv = vec![T::zero(); d];
            &mut mv
        };
        self.forward.m_at(self.bundle, p, i, m_slice);
        let args = DriverArgs {
            t: self.bundle.grid.t(i),
            x: self.forward.x.at(p, i),
            m: m_slice,
            y,
            zq,
            q: self.bundle.q.at(p, i),
        };
        self.driver.eval(&args)
    }
}

impl<T: Real> Generator<T> for PathDriver<'_, T> {
    #[inline]
    fn value(&self, p: usize, i: usize, y: T, z: &[T]) -> T {
        if self.driver.meta.zero {
            return T::zero();
        }
        let d = self.bundle.dim;
        let mut buf = [T::zero(); 8];
        if d <= 8 {
            self.rotate(p, i, z, &mut buf[..d]);
            self.value_rotated(p, i, y, &buf[..d])
        } else {
            let mut v = vec![T::zero(); d];
            self.rotate(p, i, z, &mut v);
            self.value_rotated(p, i, y, &v)
        }
    }

    fn is_zero(&self) -> bool {
        self.driver.meta.zero
    }
}

/// Per-iteration diagnostics of the Picard scheme.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PicardReport {
    /// `sup |Y^{k} − Y^{k−1}|` for `k = 1, 2, …`.
    pub sup_diffs: Vec<f64>,
    /// Ratios of successive differences (first entry has none).
    pub ratios: Vec<Option<f64>>,
    /// Largest observed ratio, the empirical contraction factor.
    pub epsilon_hat: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest regression condition number seen in the final sweep.
    pub max_condition: f64,
    /// Fitted values projected onto the a-priori bounds in the final sweep.
    pub clamped_estimates: usize,
}

impl PicardReport {
    pub(crate) fn push(&mut self, diff: f64) {
        let ratio = self
            .sup_diffs
            .last()
            .map(|&prev| if prev > 0.0 { diff / prev } else { 0.0 });
        self.sup_diffs.push(diff);
        self.ratios.push(ratio);
        self.iterations = self.sup_diffs.len();
        self.epsilon_hat = self.ratios.iter().flatten().cloned().fold(0.0f64, f64::max);
    }

    /// Convergence report CSV `iteration,sup_dY,ratio`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "iteration,sup_dY,ratio")?;
        for (k, (d, r)) in self.sup_diffs.iter().zip(&self.ratios).enumerate() {
            match r {
                Some(r) => writeln!(w, "{},{d},{r}", k + 1)?,
                None => writeln!(w, "{},{d},", k + 1)?,
            }
        }
        Ok(())
    }
}

/// Paths of `(Y, Z, U)` with diagnostics.
#[derive(Clone, Debug)]
pub struct BsdeSolution<T> {
    pub y: PathArray<T>,
    pub z: PathArray<T>,
    pub u_orth: Option<PathArray<T>>,
    pub report: PicardReport,
    /// Fitted `Y` surfaces per step (index `i` for `start ≤ i < N`), final iteration.
    pub y_fits: Vec<Option<StepFit>>,
    pub start: usize,
    /// Estimate of `Y` at the start time.
    pub start_value: T,
    pub start_stderr: T,
    /// Pathwise regression targets at the start, in the scale of `Y` (mean = `start_value`).
    pub start_targets: Vec<T>,
    /// Per step, per control component, the largest fitted-value standard error.
    pub control_stderr: Option<Vec<Vec<f64>>>,
    /// Empirical bound `sup |Y|`.
    pub bound: T,
    pub truncation: Option<TruncationAudit>,
    /// Set when the equation was solved for `U = e^{κY}`; `y_fits` then describe `U`.
    pub transform_kappa: Option<T>,
    /// Mean absolute residual of the original equation telescoped on the grid.
    pub orthogonal_residual: Option<f64>,
}

impl<T: Real> BsdeSolution<T> {
    /// Dump sharing the path schema with trailing `Y,Z_1..Z_d,U` columns.
    pub fn write_csv<W: Write>(
        &self,
        bundle: &PathBundle<T>,
        max_paths: usize,
        w: &mut W,
    ) -> io::Result<()> {
        let mut base = Vec::new();
        bundle.write_csv(max_paths, &mut base)?;
        let text = String::from_utf8_lossy(&base);
        let d = self.z.width();
        let times = self.y.times();
        for (row, line) in text.lines().enumerate() {
            if row == 0 {
                let mut extra = vec!["Y".to_string()];
                extra.extend((1..=d).map(|k| format!("Z_{k}")));
                extra.push("U".into());
                writeln!(w, "{line},{}", extra.join(","))?;
                continue;
            }
            let r = row - 1;
            let (p, i) = (r / times, r % times);
            write!(w, "{line},{}", self.y.get(p, i))?;
            for v in self.z.at(p, i) {
                write!(w, ",{v}")?;
            }
            match &self.u_orth {
                Some(u) => writeln!(w, ",{}", u.get(p, i))?,
                None => writeln!(w, ",")?,
            }
        }
        Ok(())
    }
}

pub(crate) fn mean_and_stderr<T: Real>(v: &[T]) -> (T, T) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|x| x.f64()).sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (T::lit(mean), T::lit((var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args<'a>(y: f64, zq: &'a [f64]) -> DriverArgs<'a, f64> {
        DriverArgs {
            t: 0.0,
            x: &[],
            m: &[],
            y,
            zq,
            q: &[],
        }
    }

    #[test]
    fn preset_drivers_evaluate() {
        assert_eq!(Driver::<f64>::zero().eval(&args(3.0, &[1.0])), 0.0);
        assert_eq!(Driver::linear(2.0, vec![0.5]).eval(&args(1.0, &[4.0])), 0.0);
        assert_eq!(Driver::entropic(2.0).eval(&args(0.0, &[3.0])), -9.0);
    }

    #[test]
    fn growth_audit_flags_violations() {
        let mut drv = Driver::<f64>::entropic(1.0);
        let s = vec![(0.0, vec![], vec![], 0.0, vec![2.0], vec![1.0])];
        assert!(drv.audit_growth(&s).is_empty());
        drv.meta.gamma = 0.5;
        assert_eq!(drv.audit_growth(&s), vec![0]);
    }

    #[test]
    fn terminal_bound_audit() {
        let id = TerminalCondition::<f64>::new(Arc::new(|x, _| x[0]), 1.0);
        assert_eq!(
            id.audit_bound(&[(vec![0.5], vec![]), (vec![5.0], vec![])]),
            vec![1]
        );
        assert!(TerminalCondition::<f64>::smooth_clip(2.0)
            .audit_bound(&[(vec![100.0], vec![])])
            .is_empty());
    }

    #[test]
    fn picard_report_ratios() {
        let mut r = PicardReport::default();
        r.push(1.0);
        r.push(0.5);
        r.push(0.1);
        assert_eq!(r.ratios[0], None);
        assert_eq!(r.epsilon_hat, 0.5);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("iteration,sup_dY,ratio\n1,1,\n2,0.5,0.5"));
    }
}
