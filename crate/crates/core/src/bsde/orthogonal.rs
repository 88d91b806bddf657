//! Equations with an orthogonal martingale part `L = ∫ U dN` and the bracket term
//! `(κ/2) ∫ d⟨L,L⟩`, rewritten over the augmented basis `(M, N)` and clock `C̃`.

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::martingale::PathBundle;
use crate::real::Real;

use super::quadratic::{solve_quadratic_on, transform_constants, QuadraticOptions};
use super::{BsdeSolution, Driver, Generator, Noise, PathDriver, StateFeatures, TerminalCondition};

/// Per-step densities of the augmented clock.
#[derive(Clone, Debug)]
pub struct MrpTransform<T> {
    /// `C̃ = arctan(Σ⟨Mⁱ⟩ + ⟨N⟩)`, `P × (N+1)`.
    pub clock: PathArray<T>,
    /// Weight of `M` in the step, `P × N`.
    pub phi1: PathArray<T>,
    /// Weight of `N` in the step, `P × N`.
    pub phi2: PathArray<T>,
    /// `ΔC / (φ₁ ΔC̃)`, the discrete version of `(1 + (Σ⟨M⟩+⟨N⟩)²)/(1 + (Σ⟨M⟩)²)`.
    pub corr_f: PathArray<T>,
    /// `Δ⟨N⟩ / (φ₂ ΔC̃)`, the discrete version of `1 + (Σ⟨M⟩+⟨N⟩)²`.
    pub corr_g: PathArray<T>,
    /// Block density `diag(q √φ₁, √φ₂)`, `P × N × (d+1)²`.
    pub q_tilde: PathArray<T>,
}

impl<T: Real> MrpTransform<T> {
    #[inline]
    pub fn dclock(&self, p: usize, i: usize) -> T {
        self.clock.get(p, i + 1) - self.clock.get(p, i)
    }
}

/// Densities `φ₁, φ₂` of the `M` and `N` brackets against the augmented clock.
pub fn mrp_transform<T: Real>(bundle: &PathBundle<T>) -> Result<MrpTransform<T>> {
    let nn = bundle.bracket_nn.as_ref().ok_or_else(|| {
        Error::Config("the orthogonal transform needs the orthogonal component N".into())
    })?;
    let clock = bundle.compute_clock(true)?;
    let (paths, steps, d) = (bundle.n_paths(), bundle.n_steps(), bundle.dim);
    let e = d + 1;
    let mut phi1 = PathArray::filled(paths, steps, 1, T::zero());
    let mut phi2 = phi1.clone();
    let mut corr_f = phi1.clone();
    let mut corr_g = phi1.clone();
    let mut q_tilde = PathArray::filled(paths, steps, e * e, T::zero());
    for p in 0..paths {
        for i in 0..steps {
            let dm = bundle.bracket_trace(p, i + 1, false) - bundle.bracket_trace(p, i, false);
            let dn = nn.get(p, i + 1) - nn.get(p, i);
            if dm < T::zero() || dn < T::zero() {
                return Err(Error::Inconsistent(format!(
                    "negative bracket increment on path {p} at step {i}"
                )));
            }
            let total = dm + dn;
            if total <= T::zero() {
                continue;
            }
            let (f1, f2) = (dm / total, dn / total);
            phi1.set(p, i, f1);
            phi2.set(p, i, f2);
            let dct = clock.get(p, i + 1) - clock.get(p, i);
            if dct > T::zero() {
                if f1 > T::zero() {
                    corr_f.set(p, i, bundle.dclock(p, i) / (f1 * dct));
                }
                if f2 > T::zero() {
                    corr_g.set(p, i, dn / (f2 * dct));
                }
            }
            let q = bundle.q.at(p, i);
            let out = q_tilde.at_mut(p, i);
            let s1 = f1.sqrt();
            for a in 0..d {
                for b in 0..d {
                    out[a * e + b] = q[a * d + b] * s1;
                }
            }
            out[d * e + d] = f2.sqrt();
        }
    }
    Ok(MrpTransform {
        clock,
        phi1,
        phi2,
        corr_f,
        corr_g,
        q_tilde,
    })
}

/// The pair `(M, N)` with block-diagonal bracket, run on the augmented clock.
pub struct AugmentedNoise<'a, T> {
    pub bundle: &'a PathBundle<T>,
    pub transform: &'a MrpTransform<T>,
}

impl<T: Real> Noise<T> for AugmentedNoise<'_, T> {
    fn n_paths(&self) -> usize {
        self.bundle.n_paths()
    }
    fn n_steps(&self) -> usize {
        self.bundle.n_steps()
    }
    fn dim(&self) -> usize {
        self.bundle.dim + 1
    }
    #[inline]
    fn increment(&self, p: usize, i: usize, out: &mut [T]) {
        let d = self.bundle.dim;
        self.bundle.dm(p, i, &mut out[..d]);
        let n = self
            .bundle
            .n_orth
            .as_ref()
            .expect("checked by the transform");
        out[d] = n.get(p, i + 1) - n.get(p, i);
    }
    #[inline]
    fn bracket_increment(&self, p: usize, i: usize, out: &mut [T]) {
        let d = self.bundle.dim;
        let e = d + 1;
        let a = self.bundle.bracket.at(p, i);
        let b = self.bundle.bracket.at(p, i + 1);
        out.fill(T::zero());
        for r in 0..d {
            for c in 0..d {
                out[r * e + c] = b[r * d + c] - a[r * d + c];
            }
        }
        let nn = self
            .bundle
            .bracket_nn
            .as_ref()
            .expect("checked by the transform");
        out[d * e + d] = nn.get(p, i + 1) - nn.get(p, i);
    }
    #[inline]
    fn clock_increment(&self, p: usize, i: usize) -> T {
        self.transform.dclock(p, i)
    }
}

/// Features `(X, M^{t,m}, N)`.
pub struct AugmentedFeatures<'a, T> {
    pub bundle: &'a PathBundle<T>,
    pub forward: &'a ForwardSolution<T>,
}

impl<T: Real> StateFeatures<T> for AugmentedFeatures<'_, T> {
    fn width(&self) -> usize {
        self.forward.n() + self.bundle.dim + 1
    }
    #[inline]
    fn fill(&self, p: usize, i: usize, out: &mut [T]) {
        let n = self.forward.n();
        let d = self.bundle.dim;
        out[..n].copy_from_slice(self.forward.x.at(p, i));
        self.forward.m_at(self.bundle, p, i, &mut out[n..n + d]);
        out[n + d] = self
            .bundle
            .n_orth
            .as_ref()
            .expect("checked by the transform")
            .get(p, i);
    }
}

/// Driver `h` of the augmented equation: `f̃ φ₁ + g((Z̃ q̃*)₂)` in discrete form.
pub struct MrpGenerator<'a, T: Real> {
    pub inner: PathDriver<'a, T>,
    pub transform: &'a MrpTransform<T>,
    pub kappa: T,
}

impl<T: Real> MrpGenerator<'_, T> {
    /// `h` at `(p, i)` for `Z̃ = (Z, U)`.
    pub fn h(&self, p: usize, i: usize, y: T, z: &[T]) -> T {
        let d = self.inner.bundle.dim;
        let tr = self.transform;
        let (f1, f2) = (tr.phi1.get(p, i), tr.phi2.get(p, i));
        let first = if f1 > T::zero() {
            // f̃ at (Z q* √φ₁) φ₁^{-1/2} = Z q*.
            self.inner.value(p, i, y, &z[..d]) * tr.corr_f.get(p, i) * f1
        } else {
            T::zero()
        };
        let u = z[d] * f2.sqrt();
        first + T::lit(0.5) * self.kappa * u * u * tr.corr_g.get(p, i)
    }
}

impl<T: Real> Generator<T> for MrpGenerator<'_, T> {
    #[inline]
    fn value(&self, p: usize, i: usize, y: T, z: &[T]) -> T {
        self.h(p, i, y, z)
    }
    fn is_zero(&self) -> bool {
        self.inner.driver.meta.zero && self.kappa == T::zero()
    }
}

/// Solve with an orthogonal component. The terminal condition receives `(x, (m, n))`,
/// so it may depend on `N_T`; the driver still sees `(x, m)` only.
pub fn solve_quadratic_with_orthogonal<T: Real>(
    driver: &Driver<T>,
    terminal: &TerminalCondition<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    kappa: T,
    opts: &QuadraticOptions,
) -> Result<BsdeSolution<T>> {
    let n_orth = bundle.n_orth.as_ref().ok_or_else(|| {
        Error::Config("orthogonal solve needs a bundle with the component N".into())
    })?;
    let transform = mrp_transform(bundle)?;
    let noise = AugmentedNoise {
        bundle,
        transform: &transform,
    };
    let features = AugmentedFeatures { bundle, forward };
    let generator = MrpGenerator {
        inner: PathDriver {
            driver,
            bundle,
            forward,
        },
        transform: &transform,
        kappa,
    };
    let (paths, steps, d) = (bundle.n_paths(), bundle.n_steps(), bundle.dim);
    let mut values = Vec::with_capacity(paths);
    let mut mn = vec![T::zero(); d + 1];
    for p in 0..paths {
        forward.m_at(bundle, p, steps, &mut mn[..d]);
        mn[d] = n_orth.get(p, steps);
        let v = (terminal.f)(forward.x.at(p, steps), &mn);
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "terminal condition is not finite on path {p}"
            )));
        }
        values.push(v);
    }
    let mut meta = driver.meta;
    meta.kappa = kappa;
    let consts = transform_constants(&meta, terminal.bound, bundle.grid.horizon(), opts)?;
    let start = forward.start.index;
    let mut sol = solve_quadratic_on(&noise, &features, &generator, &values, start, consts, opts)?;

    let times = steps + 1;
    let mut z = PathArray::filled(paths, times, d, T::nan());
    let mut u = PathArray::filled(paths, times, 1, T::nan());
    for p in 0..paths {
        for i in start..times {
            let zt = sol.z.at(p, i);
            z.at_mut(p, i).copy_from_slice(&zt[..d]);
            u.set(p, i, zt[d]);
        }
    }
    sol.z = z;
    sol.u_orth = Some(u);
    sol.orthogonal_residual = Some(original_residual(&sol, driver, forward, bundle, kappa)?);
    Ok(sol)
}

/// Mean over path-steps of `|Y_i − Y_{i+1} − f ΔC − (κ/2) U² Δ⟨N⟩ + Z ΔM + U ΔN|`.
pub fn original_residual<T: Real>(
    sol: &BsdeSolution<T>,
    driver: &Driver<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    kappa: T,
) -> Result<f64> {
    let (n, nn) = match (&bundle.n_orth, &bundle.bracket_nn, &sol.u_orth) {
        (Some(n), Some(nn), Some(_)) => (n, nn),
        _ => {
            return Err(Error::Config(
                "residual needs the orthogonal component and U".into(),
            ))
        }
    };
    let u = sol.u_orth.as_ref().expect("matched above");
    let pd = PathDriver {
        driver,
        bundle,
        forward,
    };
    let d = bundle.dim;
    let mut dm = vec![T::zero(); d];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in 0..bundle.n_paths() {
        for i in sol.start..bundle.n_steps() {
            bundle.dm(p, i, &mut dm);
            let z = sol.z.at(p, i);
            let ui = u.get(p, i);
            let f = pd.value(p, i, sol.y.get(p, i), z);
            let dn = n.get(p, i + 1) - n.get(p, i);
            let dnn = nn.get(p, i + 1) - nn.get(p, i);
            let zdm = z.iter().zip(&dm).fold(T::zero(), |s, (a, b)| s + *a * *b);
            let r = sol.y.get(p, i)
                - sol.y.get(p, i + 1)
                - f * bundle.dclock(p, i)
                - T::lit(0.5) * kappa * ui * ui * dnn
                + zdm
                + ui * dn;
            total += r.f64().abs();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::DriverArgs;
    use crate::forward::{simulate_forward, SdeCoefficients, StartPoint};
    use crate::martingale::{generate_paths, MartingaleModel, TimeGrid};
    use std::sync::Arc;

    fn bundle(paths: usize, steps: usize) -> PathBundle<f64> {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        generate_paths(
            &MartingaleModel::brownian(1).with_orthogonal(1.0),
            &grid,
            paths,
            3,
        )
        .unwrap()
    }

    #[test]
    fn equal_brackets_split_evenly() {
        let b = bundle(50, 20);
        let tr = mrp_transform(&b).unwrap();
        for p in 0..50 {
            for i in 0..20 {
                assert!((tr.phi1.get(p, i) - 0.5).abs() < 1e-12);
                assert!((tr.phi1.get(p, i) + tr.phi2.get(p, i) - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn generator_integral_identity_holds_on_every_path() {
        let b = bundle(40, 25);
        let coeffs = SdeCoefficients::constant(1, 1, vec![0.5], vec![0.1]);
        let fw = simulate_forward(&coeffs, &b, &StartPoint::new(0, vec![0.2], vec![0.0])).unwrap();
        let driver = Driver::new(
            Arc::new(|a: &DriverArgs<f64>| -0.3 * a.y + a.zq[0].sin() + a.x[0] * a.m[0]),
            Default::default(),
        );
        let tr = mrp_transform(&b).unwrap();
        let kappa = 1.7;
        let gen = MrpGenerator {
            inner: PathDriver {
                driver: &driver,
                bundle: &b,
                forward: &fw,
            },
            transform: &tr,
            kappa,
        };
        let nn = b.bracket_nn.as_ref().unwrap();
        for p in 0..40 {
            let (mut lhs, mut rhs) = (0.0, 0.0);
            for i in 0..25 {
                let (y, z, u) = (
                    (i as f64).cos(),
                    (p as f64 * 0.1).sin(),
                    0.3 + 0.01 * i as f64,
                );
                lhs += gen.inner.value(p, i, y, &[z]) * b.dclock(p, i)
                    + 0.5 * kappa * u * u * (nn.get(p, i + 1) - nn.get(p, i));
                rhs += gen.h(p, i, y, &[z, u]) * tr.dclock(p, i);
            }
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn missing_orthogonal_component_is_a_config_error() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, 10, 1).unwrap();
        assert!(matches!(mrp_transform(&b), Err(Error::Config(_))));
    }

    #[test]
    fn constant_terminal_gives_zero_controls() {
        let b = bundle(1000, 10);
        let coeffs = SdeCoefficients::constant(1, 1, vec![1.0], vec![0.0]);
        let fw = simulate_forward(&coeffs, &b, &StartPoint::new(0, vec![0.0], vec![0.0])).unwrap();
        let sol = solve_quadratic_with_orthogonal(
            &Driver::zero(),
            &TerminalCondition::constant(0.4),
            &fw,
            &b,
            0.0,
            &QuadraticOptions::default(),
        )
        .unwrap();
        assert!(sol.y.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(sol.z.data().iter().all(|v| v.abs() < 1e-12));
        assert!(sol.u_orth.unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }
}
