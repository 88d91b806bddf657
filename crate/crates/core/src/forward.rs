//! Forward process `X_s = x + ∫σ(u,X,M) dM + ∫b(u,X,M) dC` and its variational flows.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::martingale::PathBundle;
use crate::parallel;
use crate::real::Real;

/// Coefficient handle `(t, x, m, out)`.
pub type CoefFn<T> = Arc<dyn Fn(T, &[T], &[T], &mut [T]) + Send + Sync>;

/// Coefficients of the forward SDE.
///
/// Layouts (row-major): `sigma` is `n × d`; `drift` is `n`; `dsigma_dx[(i·d + α)·n + j] =
/// ∂_{x_j} σ_{iα}`; `dsigma_dm[(i·d + α)·d + k] = ∂_{m_k} σ_{iα}`; `db_dx` is `n × n`;
/// `db_dm` is `n × d`.
#[derive(Clone)]
pub struct SdeCoefficients<T: Real> {
    pub n: usize,
    pub d: usize,
    pub sigma: CoefFn<T>,
    pub drift: CoefFn<T>,
    pub dsigma_dx: Option<CoefFn<T>>,
    pub dsigma_dm: Option<CoefFn<T>>,
    pub db_dx: Option<CoefFn<T>>,
    pub db_dm: Option<CoefFn<T>>,
    pub lipschitz: T,
    /// Times where the coefficients jump; each must be a grid point.
    pub discontinuities: Vec<T>,
    /// The coefficients do not depend on `m`.
    pub m_free: bool,
}

impl<T: Real> fmt::Debug for SdeCoefficients<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeCoefficients")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("has_partials", &self.has_partials())
            .field("lipschitz", &self.lipschitz)
            .field("discontinuities", &self.discontinuities)
            .field("m_free", &self.m_free)
            .finish()
    }
}

fn zero_fn<T: Real>() -> CoefFn<T> {
    Arc::new(|_, _, _, out: &mut [T]| out.fill(T::zero()))
}

impl<T: Real> SdeCoefficients<T> {
    pub fn new(n: usize, d: usize, sigma: CoefFn<T>, drift: CoefFn<T>) -> Self {
        Self {
            n,
            d,
            sigma,
            drift,
            dsigma_dx: None,
            dsigma_dm: None,
            db_dx: None,
            db_dm: None,
            lipschitz: T::zero(),
            discontinuities: Vec::new(),
            m_free: false,
        }
    }

    pub fn with_partials(
        mut self,
        dsigma_dx: CoefFn<T>,
        dsigma_dm: CoefFn<T>,
        db_dx: CoefFn<T>,
        db_dm: CoefFn<T>,
    ) -> Self {
        self.dsigma_dx = Some(dsigma_dx);
        self.dsigma_dm = Some(dsigma_dm);
        self.db_dx = Some(db_dx);
        self.db_dm = Some(db_dm);
        self
    }

    pub fn with_lipschitz(mut self, k: T) -> Self {
        self.lipschitz = k;
        self
    }

    pub fn with_discontinuities(mut self, times: Vec<T>) -> Self {
        self.discontinuities = times;
        self
    }

    pub fn m_free(mut self, flag: bool) -> Self {
        self.m_free = flag;
        self
    }

    /// Constant `σ` (row-major `n × d`) and `b`, with exact zero partials.
    pub fn constant(n: usize, d: usize, sigma: Vec<T>, drift: Vec<T>) -> Self {
        assert_eq!(sigma.len(), n * d, "sigma must have n·d entries");
        assert_eq!(drift.len(), n, "drift must have n entries");
        let s: CoefFn<T> = Arc::new(move |_, _, _, out: &mut [T]| out.copy_from_slice(&sigma));
        let b: CoefFn<T> = Arc::new(move |_, _, _, out: &mut [T]| out.copy_from_slice(&drift));
        Self::new(n, d, s, b)
            .with_partials(zero_fn(), zero_fn(), zero_fn(), zero_fn())
            .m_free(true)
    }

    /// `σ ≡ 0`, `b ≡ 0`.
    pub fn zero(n: usize, d: usize) -> Self {
        Self::constant(n, d, vec![T::zero(); n * d], vec![T::zero(); n])
    }

    /// Scalar geometric coefficients `σ(x) = s·x`, `b(x) = c·x` with `n = d = 1`.
    pub fn linear(s: T, c: T) -> Self {
        let sigma: CoefFn<T> = Arc::new(move |_, x, _, out: &mut [T]| out[0] = s * x[0]);
        let drift: CoefFn<T> = Arc::new(move |_, x, _, out: &mut [T]| out[0] = c * x[0]);
        let dsx: CoefFn<T> = Arc::new(move |_, _, _, out: &mut [T]| out[0] = s);
        let dbx: CoefFn<T> = Arc::new(move |_, _, _, out: &mut [T]| out[0] = c);
        Self::new(1, 1, sigma, drift)
            .with_partials(dsx, zero_fn(), dbx, zero_fn())
            .with_lipschitz(s.abs().max(c.abs()))
            .m_free(true)
    }

    pub fn has_partials(&self) -> bool {
        self.dsigma_dx.is_some()
            && self.dsigma_dm.is_some()
            && self.db_dx.is_some()
            && self.db_dm.is_some()
    }

    /// Compares the supplied partials with central differences at the given `(t, x, m)` points.
    /// Returns the largest relative discrepancy found.
    pub fn spot_check_partials(&self, points: &[(T, Vec<T>, Vec<T>)]) -> Result<T> {
        let (Some(sx), Some(sm), Some(bx), Some(bm)) =
            (&self.dsigma_dx, &self.dsigma_dm, &self.db_dx, &self.db_dm)
        else {
            return Err(Error::Config("coefficient partials not supplied".into()));
        };
        let (n, d) = (self.n, self.d);
        let h = T::lit(1e-6);
        let mut worst = T::zero();
        let mut s_plus = vec![T::zero(); n * d];
        let mut s_minus = vec![T::zero(); n * d];
        let mut b_plus = vec![T::zero(); n];
        let mut b_minus = vec![T::zero(); n];
        let mut gsx = vec![T::zero(); n * d * n];
        let mut gsm = vec![T::zero(); n * d * d];
        let mut gbx = vec![T::zero(); n * n];
        let mut gbm = vec![T::zero(); n * d];
        let mut rel = |analytic: T, numeric: T| {
            let e = (analytic - numeric).abs() / (numeric.abs().max(analytic.abs()) + T::lit(1e-3));
            if e > worst {
                worst = e;
            }
        };
        for (t, x, m) in points {
            sx(*t, x, m, &mut gsx);
            sm(*t, x, m, &mut gsm);
            bx(*t, x, m, &mut gbx);
            bm(*t, x, m, &mut gbm);
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] = xp[j] + h;
                xm[j] = xm[j] - h;
                (self.sigma)(*t, &xp, m, &mut s_plus);
                (self.sigma)(*t, &xm, m, &mut s_minus);
                (self.drift)(*t, &xp, m, &mut b_plus);
                (self.drift)(*t, &xm, m, &mut b_minus);
                for i in 0..n {
                    for a in 0..d {
                        let fd = (s_plus[i * d + a] - s_minus[i * d + a]) / (h + h);
                        rel(gsx[(i * d + a) * n + j], fd);
                    }
                    rel(gbx[i * n + j], (b_plus[i] - b_minus[i]) / (h + h));
                }
            }
            for k in 0..d {
                let mut mp = m.clone();
                let mut mm = m.clone();
                mp[k] = mp[k] + h;
                mm[k] = mm[k] - h;
                (self.sigma)(*t, x, &mp, &mut s_plus);
                (self.sigma)(*t, x, &mm, &mut s_minus);
                (self.drift)(*t, x, &mp, &mut b_plus);
                (self.drift)(*t, x, &mm, &mut b_minus);
                for i in 0..n {
                    for a in 0..d {
                        let fd = (s_plus[i * d + a] - s_minus[i * d + a]) / (h + h);
                        rel(gsm[(i * d + a) * d + k], fd);
                    }
                    rel(gbm[i * d + k], (b_plus[i] - b_minus[i]) / (h + h));
                }
            }
        }
        Ok(worst)
    }
}

/// Initial data `(t_index, x, m)` of a forward solve.
#[derive(Clone, Debug, PartialEq)]
pub struct StartPoint<T> {
    pub index: usize,
    pub x: Vec<T>,
    pub m: Vec<T>,
}

impl<T: Real> StartPoint<T> {
    pub fn new(index: usize, x: Vec<T>, m: Vec<T>) -> Self {
        Self { index, x, m }
    }
}

/// Coordinate perturbed by [`bump_restart`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BumpCoordinate {
    X(usize),
    M(usize),
}

/// Forward paths, optional variational flows, and the restart shift of `M`.
#[derive(Clone, Debug)]
pub struct ForwardSolution<T> {
    pub x: PathArray<T>,
    pub dx: Option<PathArray<T>>,
    pub dm: Option<PathArray<T>>,
    pub start: StartPoint<T>,
    /// Per path `m − M_t`, so that `M^{t,m}_s = M_s + shift`.
    pub m_shift: Vec<T>,
}

impl<T: Real> ForwardSolution<T> {
    pub fn n(&self) -> usize {
        self.x.width()
    }

    /// `M^{t,m}` at `(p, i)`.
    #[inline]
    pub fn m_at(&self, bundle: &PathBundle<T>, p: usize, i: usize, out: &mut [T]) {
        let d = bundle.dim;
        let raw = bundle.m.at(p, i);
        let shift = &self.m_shift[p * d..(p + 1) * d];
        for k in 0..d {
            out[k] = raw[k] + shift[k];
        }
    }

    /// Path dump sharing the bundle schema with trailing `X_1..X_n` columns.
    pub fn write_csv<W: Write>(
        &self,
        bundle: &PathBundle<T>,
        max_paths: usize,
        w: &mut W,
    ) -> io::Result<()> {
        let mut base = Vec::new();
        bundle.write_csv(max_paths, &mut base)?;
        let text = String::from_utf8_lossy(&base);
        let n = self.n();
        for (row, line) in text.lines().enumerate() {
            if row == 0 {
                let extra: Vec<String> = (1..=n).map(|k| format!("X_{k}")).collect();
                writeln!(w, "{line},{}", extra.join(","))?;
                continue;
            }
            let r = row - 1;
            let times = self.x.times();
            let (p, i) = (r / times, r % times);
            write!(w, "{line}")?;
            for v in self.x.at(p, i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_start<T: Real>(
    coeffs: &SdeCoefficients<T>,
    bundle: &PathBundle<T>,
    start: &StartPoint<T>,
) -> Result<()> {
    if coeffs.d != bundle.dim {
        return Err(Error::Shape(format!(
            "coefficients expect d = {}, bundle has d = {}",
            coeffs.d, bundle.dim
        )));
    }
    if start.x.len() != coeffs.n || start.m.len() != coeffs.d {
        return Err(Error::Shape(format!(
            "start point has |x| = {}, |m| = {}; expected {} and {}",
            start.x.len(),
            start.m.len(),
            coeffs.n,
            coeffs.d
        )));
    }
    if start.index > bundle.n_steps() {
        return Err(Error::Config(format!(
            "start index {} beyond grid of {} steps",
            start.index,
            bundle.n_steps()
        )));
    }
    if start.index < bundle.start {
        return Err(Error::Config(format!(
            "start index {} precedes the bundle start {}",
            start.index, bundle.start
        )));
    }
    for &t in &coeffs.discontinuities {
        if t > T::zero() && t < bundle.grid.horizon() && bundle.grid.index_of(t).is_none() {
            return Err(Error::Config(format!(
                "coefficient discontinuity at t = {t} is not a grid point"
            )));
        }
    }
    Ok(())
}

/// Euler scheme for `X` on `[t, T]` from the start point; entries before `t` are NaN.
pub fn simulate_forward<T: Real>(
    coeffs: &SdeCoefficients<T>,
    bundle: &PathBundle<T>,
    start: &StartPoint<T>,
) -> Result<ForwardSolution<T>> {
    check_start(coeffs, bundle, start)?;
    let (n, d) = (coeffs.n, coeffs.d);
    let paths = bundle.n_paths();
    let times = bundle.n_steps() + 1;
    let s0 = start.index;
    let mut m_shift = vec![T::zero(); paths * d];
    for p in 0..paths {
        let raw = bundle.m.at(p, s0);
        for k in 0..d {
            m_shift[p * d + k] = start.m[k] - raw[k];
        }
    }
    let mut x = PathArray::filled(paths, times, n, T::nan());
    parallel::try_for_each_block(x.data_mut(), times * n, |range, block| {
        let mut sig = vec![T::zero(); n * d];
        let mut b = vec![T::zero(); n];
        let mut dm = vec![T::zero(); d];
        let mut m = vec![T::zero(); d];
        for (k, p) in range.enumerate() {
            let xp = &mut block[k * times * n..(k + 1) * times * n];
            xp[s0 * n..(s0 + 1) * n].copy_from_slice(&start.x);
            let shift = &m_shift[p * d..(p + 1) * d];
            for i in s0..times - 1 {
                let raw = bundle.m.at(p, i);
                for c in 0..d {
                    m[c] = raw[c] + shift[c];
                }
                bundle.dm(p, i, &mut dm);
                let dc = bundle.dclock(p, i);
                let t = bundle.grid.t(i);
                let (head, tail) = xp.split_at_mut((i + 1) * n);
                let cur = &head[i * n..];
                let next = &mut tail[..n];
                (coeffs.sigma)(t, cur, &m, &mut sig);
                (coeffs.drift)(t, cur, &m, &mut b);
                for r in 0..n {
                    let mut s = cur[r] + b[r] * dc;
                    for a in 0..d {
                        s = s + sig[r * d + a] * dm[a];
                    }
                    next[r] = s;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp {
                        path: p,
                        step: i + 1,
                    });
                }
            }
        }
        Ok(())
    })?;
    Ok(ForwardSolution {
        x,
        dx: None,
        dm: None,
        start: start.clone(),
        m_shift,
    })
}

/// Euler scheme for the linear variational systems `Dˣ` (`n × n`) and `Dᵐ` (`n × d`),
/// driven by the same increments as the forward pass.
pub fn simulate_variational<T: Real>(
    coeffs: &SdeCoefficients<T>,
    bundle: &PathBundle<T>,
    forward: &ForwardSolution<T>,
) -> Result<(PathArray<T>, PathArray<T>)> {
    let (Some(sx), Some(sm), Some(bx), Some(bm)) = (
        &coeffs.dsigma_dx,
        &coeffs.dsigma_dm,
        &coeffs.db_dx,
        &coeffs.db_dm,
    ) else {
        return Err(Error::Config(
            "variational flows need all coefficient partials".into(),
        ));
    };
    check_start(coeffs, bundle, &forward.start)?;
    let (n, d) = (coeffs.n, coeffs.d);
    let paths = bundle.n_paths();
    let times = bundle.n_steps() + 1;
    let s0 = forward.start.index;
    let width = n * n + n * d;
    // Joint storage per (path, time): Dˣ followed by Dᵐ, split afterwards.
    let mut joint = PathArray::filled(paths, times, width, T::nan());
    parallel::try_for_each_block(joint.data_mut(), times * width, |range, block| {
        let mut gsx = vec![T::zero(); n * d * n];
        let mut gsm = vec![T::zero(); n * d * d];
        let mut gbx = vec![T::zero(); n * n];
        let mut gbm = vec![T::zero(); n * d];
        let mut dmv = vec![T::zero(); d];
        let mut m = vec![T::zero(); d];
        for (k, p) in range.enumerate() {
            let jp = &mut block[k * times * width..(k + 1) * times * width];
            {
                let init = &mut jp[s0 * width..(s0 + 1) * width];
                init.fill(T::zero());
                for i in 0..n {
                    init[i * n + i] = T::one();
                }
            }
            for i in s0..times - 1 {
                forward.m_at(bundle, p, i, &mut m);
                bundle.dm(p, i, &mut dmv);
                let dc = bundle.dclock(p, i);
                let t = bundle.grid.t(i);
                let x = forward.x.at(p, i);
                sx(t, x, &m, &mut gsx);
                sm(t, x, &m, &mut gsm);
                bx(t, x, &m, &mut gbx);
                bm(t, x, &m, &mut gbm);
                let (head, tail) = jp.split_at_mut((i + 1) * width);
                let cur = &head[i * width..];
                let next = &mut tail[..width];
                let (dx_cur, dm_cur) = cur.split_at(n * n);
                for r in 0..n {
                    for c in 0..n {
                        let mut s = dx_cur[r * n + c];
                        for j in 0..n {
                            let mut coef = gbx[r * n + j] * dc;
                            for a in 0..d {
                                coef = coef + gsx[(r * d + a) * n + j] * dmv[a];
                            }
                            s = s + coef * dx_cur[j * n + c];
                        }
                        next[r * n + c] = s;
                    }
                    for c in 0..d {
                        let mut s = dm_cur[r * d + c] + gbm[r * d + c] * dc;
                        for a in 0..d {
                            s = s + gsm[(r * d + a) * d + c] * dmv[a];
                        }
                        for j in 0..n {
                            let mut coef = gbx[r * n + j] * dc;
                            for a in 0..d {
                                coef = coef + gsx[(r * d + a) * n + j] * dmv[a];
                            }
                            s = s + coef * dm_cur[j * d + c];
                        }
                        next[n * n + r * d + c] = s;
                    }
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp {
                        path: p,
                        step: i + 1,
                    });
                }
            }
        }
        Ok(())
    })?;
    let mut dx = PathArray::filled(paths, times, n * n, T::nan());
    let mut dm = PathArray::filled(paths, times, n * d, T::nan());
    for p in 0..paths {
        for i in 0..times {
            let src = joint.at(p, i);
            dx.at_mut(p, i).copy_from_slice(&src[..n * n]);
            dm.at_mut(p, i).copy_from_slice(&src[n * n..]);
        }
    }
    Ok((dx, dm))
}

/// Forward pass plus variational flows stored in the solution.
pub fn simulate_forward_with_flows<T: Real>(
    coeffs: &SdeCoefficients<T>,
    bundle: &PathBundle<T>,
    start: &StartPoint<T>,
) -> Result<ForwardSolution<T>> {
    let mut fwd = simulate_forward(coeffs, bundle, start)?;
    let (dx, dm) = simulate_variational(coeffs, bundle, &fwd)?;
    fwd.dx = Some(dx);
    fwd.dm = Some(dm);
    Ok(fwd)
}

/// Re-simulates from the start point with one coordinate shifted by `h` (signed, nonzero),
/// reusing the bundle's increments.
pub fn bump_restart<T: Real>(
    coeffs: &SdeCoefficients<T>,
    bundle: &PathBundle<T>,
    start: &StartPoint<T>,
    coordinate: BumpCoordinate,
    h: T,
) -> Result<ForwardSolution<T>> {
    if h == T::zero() || !h.is_finite() {
        return Err(Error::Config("bump size must be nonzero and finite".into()));
    }
    let mut bumped = start.clone();
    match coordinate {
        BumpCoordinate::X(j) if j < bumped.x.len() => bumped.x[j] = bumped.x[j] + h,
        BumpCoordinate::M(k) if k < bumped.m.len() => bumped.m[k] = bumped.m[k] + h,
        _ => {
            return Err(Error::Shape(format!(
                "bump coordinate {coordinate:?} out of range"
            )))
        }
    }
    simulate_forward(coeffs, bundle, &bumped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::martingale::{generate_paths, MartingaleModel, TimeGrid};

    fn bundle(paths: usize, steps: usize) -> PathBundle<f64> {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        generate_paths(&MartingaleModel::brownian(1), &grid, paths, 21).unwrap()
    }

    #[test]
    fn zero_coefficients_keep_x_fixed() {
        let b = bundle(10, 20);
        let f = simulate_forward(
            &SdeCoefficients::zero(1, 1),
            &b,
            &StartPoint::new(0, vec![0.7], vec![0.0]),
        )
        .unwrap();
        assert!(f.x.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn unit_sigma_telescopes_martingale_increments() {
        let b = bundle(10, 20);
        let c = SdeCoefficients::constant(1, 1, vec![1.0], vec![0.0]);
        let f = simulate_forward(&c, &b, &StartPoint::new(5, vec![0.0], vec![0.0])).unwrap();
        for p in 0..10 {
            assert!(f.x.get(p, 4).is_nan());
            for i in 5..=20 {
                let expect = b.m.get(p, i) - b.m.get(p, 5);
                assert!((f.x.get(p, i) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn geometric_sde_is_a_martingale() {
        let p = 100_000;
        let b = bundle(p, 50);
        let f = simulate_forward(
            &SdeCoefficients::linear(1.0, 0.0),
            &b,
            &StartPoint::new(0, vec![1.0], vec![0.0]),
        )
        .unwrap();
        let xs: Vec<f64> = (0..p).map(|k| f.x.get(k, 50)).collect();
        let mean = xs.iter().sum::<f64>() / p as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p - 1) as f64;
        assert!((mean - 1.0).abs() <= 4.0 * (var / p as f64).sqrt());
    }

    #[test]
    fn constant_coefficients_have_trivial_flows() {
        let b = bundle(5, 10);
        let c = SdeCoefficients::constant(1, 1, vec![0.3], vec![0.1]);
        let f =
            simulate_forward_with_flows(&c, &b, &StartPoint::new(0, vec![0.0], vec![0.0])).unwrap();
        assert!(f.dx.unwrap().data().iter().all(|&v| v == 1.0));
        assert!(f.dm.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_flow_equals_scaled_state() {
        let b = bundle(20, 50);
        let f = simulate_forward_with_flows(
            &SdeCoefficients::linear(1.0, 0.0),
            &b,
            &StartPoint::new(0, vec![2.0], vec![0.0]),
        )
        .unwrap();
        let dx = f.dx.as_ref().unwrap();
        for p in 0..20 {
            for i in 0..=50 {
                assert!((dx.get(p, i) - f.x.get(p, i) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bumps_on_zero_coefficients_and_linear_sde() {
        let b = bundle(5, 10);
        let s = StartPoint::new(0, vec![0.5], vec![0.0]);
        let f = bump_restart(
            &SdeCoefficients::zero(1, 1),
            &b,
            &s,
            BumpCoordinate::X(0),
            1e-6,
        )
        .unwrap();
        assert!(f.x.data().iter().all(|&v| v == 0.5 + 1e-6));
        assert!(bump_restart(
            &SdeCoefficients::zero(1, 1),
            &b,
            &s,
            BumpCoordinate::X(0),
            0.0
        )
        .is_err());
        let lin = SdeCoefficients::linear(1.0, 0.0);
        let base = simulate_forward(&lin, &b, &s).unwrap();
        let up = bump_restart(&lin, &b, &s, BumpCoordinate::X(0), 1e-3).unwrap();
        for p in 0..5 {
            let fd = (up.x.get(p, 10) - base.x.get(p, 10)) / 1e-3;
            assert!((fd - base.x.get(p, 10) / 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn restart_from_a_visited_state_reproduces_the_path() {
        let b = bundle(4, 30);
        let c = SdeCoefficients::linear(0.8, 0.1);
        let full = simulate_forward(&c, &b, &StartPoint::new(0, vec![1.0], vec![0.0])).unwrap();
        for p in 0..4 {
            let s = StartPoint::new(12, vec![full.x.get(p, 12)], vec![b.m.get(p, 12)]);
            let part = simulate_forward(&c, &b, &s).unwrap();
            for i in 12..=30 {
                assert_eq!(part.x.get(p, i), full.x.get(p, i));
            }
        }
    }

    #[test]
    fn errors_for_shapes_and_blow_up() {
        let b = bundle(3, 10);
        let c = SdeCoefficients::constant(2, 1, vec![1.0, 1.0], vec![0.0, 0.0]);
        assert!(matches!(
            simulate_forward(&c, &b, &StartPoint::new(0, vec![0.0], vec![0.0])),
            Err(Error::Shape(_))
        ));
        let boom: CoefFn<f64> = Arc::new(|_, x, _, out: &mut [f64]| out[0] = 1e300 * x[0].exp());
        let c = SdeCoefficients::new(1, 1, boom.clone(), boom);
        assert!(matches!(
            simulate_forward(&c, &b, &StartPoint::new(0, vec![800.0], vec![0.0])),
            Err(Error::BlowUp { path: 0, .. })
        ));
        let c = SdeCoefficients::new(1, 1, zero_fn(), zero_fn());
        assert!(matches!(
            simulate_variational(
                &c,
                &b,
                &simulate_forward(&c, &b, &StartPoint::new(0, vec![0.0], vec![0.0])).unwrap()
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn off_grid_discontinuity_is_rejected() {
        let b = bundle(2, 3);
        let c = SdeCoefficients::zero(1, 1).with_discontinuities(vec![0.5]);
        assert!(matches!(
            simulate_forward(&c, &b, &StartPoint::new(0, vec![0.0], vec![0.0])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_spot_check_accepts_exact_partials() {
        let c = SdeCoefficients::linear(0.7, -0.2);
        let worst = c
            .spot_check_partials(&[(0.0, vec![1.3], vec![0.0]), (0.5, vec![-2.0], vec![1.0])])
            .unwrap();
        assert!(worst < 1e-4);
    }
}
