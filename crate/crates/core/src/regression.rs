//! Ridge-regularized polynomial least squares used for every conditional expectation.
//!
//! Raw state variables are standardized; constant and exactly collinear variables are
//! dropped before the monomials are formed, so degenerate states (e.g. the start time,
//! where every path sits at the same point) reduce to the sample mean. The normal
//! equations are solved in `f64` whatever the scalar type of the caller.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::parallel;
use crate::real::Real;

/// Polynomial basis configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionBasis {
    pub degree: usize,
    /// Ridge parameter, scaled by the mean diagonal of the Gram matrix.
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge: 1e-8,
        }
    }
}

/// Largest condition number accepted for the regularized Gram matrix.
pub const MAX_CONDITION: f64 = 1e13;

/// Standardization and monomial layout; enough to evaluate a fitted surface at new points.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub raw_dim: usize,
    means: Vec<f64>,
    scales: Vec<f64>,
    kept: Vec<usize>,
    exponents: Vec<Vec<u32>>,
}

impl Design {
    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    /// Indices of raw variables that carry information at this step.
    pub fn kept_variables(&self) -> &[usize] {
        &self.kept
    }

    #[inline]
    fn row<T: Real>(&self, raw: &[T], pow: &mut [f64], out: &mut [f64]) {
        let p = self.max_degree() + 1;
        for (slot, &v) in self.kept.iter().enumerate() {
            let z = (raw[v].f64() - self.means[v]) / self.scales[v];
            pow[slot * p] = 1.0;
            for e in 1..p {
                pow[slot * p + e] = pow[slot * p + e - 1] * z;
            }
        }
        for (k, ex) in self.exponents.iter().enumerate() {
            let mut prod = 1.0;
            for (slot, &e) in ex.iter().enumerate() {
                if e > 0 {
                    prod *= pow[slot * p + e as usize];
                }
            }
            out[k] = prod;
        }
    }

    fn max_degree(&self) -> usize {
        self.exponents
            .iter()
            .map(|e| e.iter().sum::<u32>() as usize)
            .max()
            .unwrap_or(0)
    }

    /// Evaluates `Σ cₖ φₖ(raw)`.
    pub fn predict<T: Real>(&self, coefficients: &[f64], raw: &[T]) -> T {
        let mut pow = vec![0.0; self.kept.len() * (self.max_degree() + 1)];
        let mut phi = vec![0.0; self.dim()];
        self.row(raw, &mut pow, &mut phi);
        T::lit(phi.iter().zip(coefficients).map(|(a, b)| a * b).sum())
    }
}

fn exponent_table(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    for total in 1..=degree {
        let mut cur = vec![0u32; vars];
        fill_exponents(&mut cur, 0, total as u32, &mut out);
    }
    out
}

fn fill_exponents(cur: &mut Vec<u32>, slot: usize, left: u32, out: &mut Vec<Vec<u32>>) {
    if slot + 1 == cur.len() {
        cur[slot] = left;
        out.push(cur.clone());
        cur[slot] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[slot] = e;
        fill_exponents(cur, slot + 1, left - e, out);
    }
    cur[slot] = 0;
}

/// Fitted coefficients of one regression together with its design.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFit {
    pub design: Design,
    pub coefficients: Vec<f64>,
}

impl StepFit {
    pub fn predict<T: Real>(&self, raw: &[T]) -> T {
        self.design.predict(&self.coefficients, raw)
    }
}

/// A factored design matrix that can be fitted against many targets.
pub struct Regressor {
    design: Design,
    samples: usize,
    matrix: Vec<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    condition: f64,
}

impl Regressor {
    /// Builds the design from `samples × raw_dim` row-major raw features.
    pub fn new<T: Real>(features: &[T], raw_dim: usize, basis: &RegressionBasis) -> Result<Self> {
        let samples = if raw_dim == 0 {
            features.len()
        } else {
            features.len() / raw_dim
        };
        if raw_dim > 0 && features.len() != samples * raw_dim {
            return Err(Error::Shape(
                "feature buffer is not a multiple of its width".into(),
            ));
        }
        if raw_dim == 0 {
            return Err(Error::Shape(
                "regression needs the sample count through at least one feature".into(),
            ));
        }
        Self::build(features, raw_dim, samples, basis)
    }

    /// Intercept-only design over `samples` observations.
    pub fn mean_only(samples: usize) -> Result<Self> {
        let zeros = vec![0.0f64; samples];
        Self::build(
            &zeros,
            1,
            samples,
            &RegressionBasis {
                degree: 0,
                ridge: 0.0,
            },
        )
    }

    fn build<T: Real>(
        features: &[T],
        raw_dim: usize,
        samples: usize,
        basis: &RegressionBasis,
    ) -> Result<Self> {
        if samples == 0 {
            return Err(Error::TooFewSamples { samples, basis: 1 });
        }
        let (means, scales) = moments(features, raw_dim, samples);
        let kept = independent_variables(features, raw_dim, samples, &means, &scales);
        let exponents = exponent_table(kept.len(), if kept.is_empty() { 0 } else { basis.degree });
        let design = Design {
            raw_dim,
            means,
            scales,
            kept,
            exponents,
        };
        let k = design.dim();
        if samples < k + 1 && k > 1 {
            return Err(Error::TooFewSamples { samples, basis: k });
        }
        let mut matrix = vec![0.0f64; samples * k];
        {
            let design = &design;
            parallel::for_each_block(&mut matrix, k, |range, block| {
                let mut pow = vec![0.0; design.kept.len() * (design.max_degree() + 1)];
                for (r, s) in range.enumerate() {
                    design.row(
                        &features[s * raw_dim..(s + 1) * raw_dim],
                        &mut pow,
                        &mut block[r * k..(r + 1) * k],
                    );
                }
            });
        }
        let gram_flat = parallel::map_reduce(
            samples,
            vec![0.0f64; k * k],
            |range| {
                let mut g = vec![0.0f64; k * k];
                for s in range {
                    let row = &matrix[s * k..(s + 1) * k];
                    for a in 0..k {
                        let ra = row[a];
                        for b in a..k {
                            g[a * k + b] += ra * row[b];
                        }
                    }
                }
                g
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
        let mut gram = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                gram[(a, b)] = gram_flat[a * k + b];
                gram[(b, a)] = gram_flat[a * k + b];
            }
        }
        if k > 1 && basis.ridge > 0.0 {
            let mean_diag = (1..k).map(|a| gram[(a, a)]).sum::<f64>() / (k - 1) as f64;
            for a in 1..k {
                gram[(a, a)] += basis.ridge * mean_diag;
            }
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let lmax = eig.iter().cloned().fold(f64::MIN, f64::max);
        let lmin = eig.iter().cloned().fold(f64::MAX, f64::min);
        let condition = if lmin > 0.0 {
            lmax / lmin
        } else {
            f64::INFINITY
        };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RankDeficient { condition });
        }
        let factor = gram.cholesky().ok_or(Error::RankDeficient { condition })?;
        Ok(Self {
            design,
            samples,
            matrix,
            factor,
            condition,
        })
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn dim(&self) -> usize {
        self.design.dim()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Least-squares coefficients for `targets`.
    pub fn coefficients<T: Real>(&self, targets: &[T]) -> Result<Vec<f64>> {
        if targets.len() != self.samples {
            return Err(Error::Shape(format!(
                "{} targets for {} samples",
                targets.len(),
                self.samples
            )));
        }
        let k = self.dim();
        let m = &self.matrix;
        let rhs = parallel::map_reduce(
            self.samples,
            vec![0.0f64; k],
            |range| {
                let mut acc = vec![0.0f64; k];
                for s in range {
                    let y = targets[s].f64();
                    for a in 0..k {
                        acc[a] += m[s * k + a] * y;
                    }
                }
                acc
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );
        let sol = self.factor.solve(&DVector::from_vec(rhs));
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::RankDeficient {
                condition: self.condition,
            });
        }
        Ok(sol.iter().cloned().collect())
    }

    /// Fitted values of the design for the given coefficients, written into `out`.
    pub fn fitted_into<T: Real>(&self, coefficients: &[f64], out: &mut [T]) {
        let k = self.dim();
        let m = &self.matrix;
        parallel::for_each_block(out, 1, |range, block| {
            for (r, s) in range.enumerate() {
                let row = &m[s * k..(s + 1) * k];
                block[r] = T::lit(row.iter().zip(coefficients).map(|(a, b)| a * b).sum());
            }
        });
    }

    /// Coefficients and fitted values in one call.
    pub fn fit<T: Real>(&self, targets: &[T]) -> Result<(Vec<f64>, Vec<T>)> {
        let c = self.coefficients(targets)?;
        let mut fitted = vec![T::zero(); self.samples];
        self.fitted_into(&c, &mut fitted);
        Ok((c, fitted))
    }

    /// Largest standard error of a fitted value, from the heteroskedasticity-robust
    /// covariance `(XᵀX)⁻¹ (Σ eₛ² xₛxₛᵀ) (XᵀX)⁻¹` of the coefficients.
    pub fn max_fitted_stderr<T: Real>(&self, targets: &[T], fitted: &[T]) -> f64 {
        let k = self.dim();
        let n = self.samples;
        let m = &self.matrix;
        let meat = parallel::map_reduce(
            n,
            vec![0.0f64; k * k],
            |range| {
                let mut acc = vec![0.0f64; k * k];
                for s in range {
                    let e2 = (targets[s].f64() - fitted[s].f64()).powi(2);
                    let row = &m[s * k..(s + 1) * k];
                    for a in 0..k {
                        let ra = e2 * row[a];
                        for b in 0..k {
                            acc[a * k + b] += ra * row[b];
                        }
                    }
                }
                acc
            },
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
        let inv = self.factor.inverse();
        let meat = DMatrix::from_row_slice(k, k, &meat);
        let cov = &inv * meat * &inv;
        let vmax = parallel::map_reduce(
            n,
            0.0f64,
            |range| {
                let mut best = 0.0f64;
                for s in range {
                    let row = &m[s * k..(s + 1) * k];
                    let mut v = 0.0;
                    for a in 0..k {
                        let mut t = 0.0;
                        for b in 0..k {
                            t += cov[(a, b)] * row[b];
                        }
                        v += row[a] * t;
                    }
                    best = best.max(v);
                }
                best
            },
            f64::max,
        );
        vmax.max(0.0).sqrt()
    }
}

fn moments<T: Real>(features: &[T], raw_dim: usize, samples: usize) -> (Vec<f64>, Vec<f64>) {
    let sums = parallel::map_reduce(
        samples,
        vec![0.0f64; raw_dim],
        |range| {
            let mut acc = vec![0.0f64; raw_dim];
            for s in range {
                for v in 0..raw_dim {
                    acc[v] += features[s * raw_dim + v].f64();
                }
            }
            acc
        },
        add_vec,
    );
    let means: Vec<f64> = sums.iter().map(|s| s / samples as f64).collect();
    let sq = parallel::map_reduce(
        samples,
        vec![0.0f64; raw_dim],
        |range| {
            let mut acc = vec![0.0f64; raw_dim];
            for s in range {
                for v in 0..raw_dim {
                    let z = features[s * raw_dim + v].f64() - means[v];
                    acc[v] += z * z;
                }
            }
            acc
        },
        add_vec,
    );
    let scales = sq.iter().map(|s| (s / samples as f64).sqrt()).collect();
    (means, scales)
}

fn add_vec(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(&b) {
        *x += y;
    }
    a
}

/// Greedy selection of raw variables with non-negligible variance that are not
/// exact linear combinations of previously kept ones.
fn independent_variables<T: Real>(
    features: &[T],
    raw_dim: usize,
    samples: usize,
    means: &[f64],
    scales: &[f64],
) -> Vec<usize> {
    let candidates: Vec<usize> = (0..raw_dim)
        .filter(|&v| scales[v] > 1e-12 * means[v].abs().max(1.0) && scales[v].is_finite())
        .collect();
    if candidates.len() <= 1 {
        return candidates;
    }
    let c = candidates.len();
    let cov_flat = parallel::map_reduce(
        samples,
        vec![0.0f64; c * c],
        |range| {
            let mut acc = vec![0.0f64; c * c];
            let mut z = vec![0.0f64; c];
            for s in range {
                for (a, &v) in candidates.iter().enumerate() {
                    z[a] = (features[s * raw_dim + v].f64() - means[v]) / scales[v];
                }
                for a in 0..c {
                    for b in 0..c {
                        acc[a * c + b] += z[a] * z[b];
                    }
                }
            }
            acc
        },
        add_vec,
    );
    let cov = DMatrix::from_fn(c, c, |a, b| cov_flat[a * c + b] / samples as f64);
    let mut kept: Vec<usize> = Vec::new();
    for a in 0..c {
        let residual = if kept.is_empty() {
            cov[(a, a)]
        } else {
            let sub = DMatrix::from_fn(kept.len(), kept.len(), |i, j| cov[(kept[i], kept[j])]);
            let cross = DVector::from_fn(kept.len(), |i, _| cov[(kept[i], a)]);
            match sub.cholesky() {
                Some(ch) => cov[(a, a)] - cross.dot(&ch.solve(&cross)),
                None => cov[(a, a)],
            }
        };
        if residual > 1e-9 {
            kept.push(a);
        }
    }
    kept.into_iter().map(|a| candidates[a]).collect()
}

/// One-shot regression: coefficients and fitted values of `targets` on `features`.
pub fn regress_conditional<T: Real>(
    features: &[T],
    raw_dim: usize,
    targets: &[T],
    basis: &RegressionBasis,
) -> Result<(StepFit, Vec<T>)> {
    let reg = Regressor::new(features, raw_dim, basis)?;
    let (coefficients, fitted) = reg.fit(targets)?;
    Ok((
        StepFit {
            design: reg.design.clone(),
            coefficients,
        },
        fitted,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_table_counts() {
        assert_eq!(exponent_table(2, 3).len(), 10);
        assert_eq!(exponent_table(3, 3).len(), 20);
        assert_eq!(exponent_table(1, 0).len(), 1);
    }

    #[test]
    fn constant_target_is_reproduced() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = vec![2.5; 200];
        let (_, fitted) = regress_conditional(&x, 1, &y, &RegressionBasis::default()).unwrap();
        assert!(fitted.iter().all(|f| (f - 2.5).abs() < 1e-12));
    }

    #[test]
    fn linear_target_is_interpolated_without_ridge() {
        let x: Vec<f64> = (0..300)
            .flat_map(|i| [(i as f64).cos(), (i as f64 * 0.3).sin()])
            .collect();
        let y: Vec<f64> = x.chunks(2).map(|r| 1.0 + 2.0 * r[0] - 3.0 * r[1]).collect();
        let basis = RegressionBasis {
            degree: 2,
            ridge: 0.0,
        };
        let (fit, fitted) = regress_conditional(&x, 2, &y, &basis).unwrap();
        for (f, t) in fitted.iter().zip(&y) {
            assert!((f - t).abs() < 1e-10);
        }
        assert!((fit.predict(&[0.5, 0.5]) - 0.5f64).abs() < 1e-10);
    }

    #[test]
    fn degenerate_features_reduce_to_the_mean() {
        let x = vec![1.0f64; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let (fit, fitted) = regress_conditional(&x, 1, &y, &RegressionBasis::default()).unwrap();
        assert_eq!(fit.design.dim(), 1);
        assert!(fitted.iter().all(|f| (f - 24.5).abs() < 1e-12));
    }

    #[test]
    fn robust_stderr_of_the_mean() {
        let x = vec![1.0f64; 40];
        let y: Vec<f64> = (0..40)
            .map(|i| if i < 20 { 0.0 } else { 4.0 * (i as f64 - 20.0) })
            .collect();
        let reg = Regressor::new(&x, 1, &RegressionBasis::default()).unwrap();
        let (_, fitted) = reg.fit(&y).unwrap();
        let ss: f64 = y.iter().zip(&fitted).map(|(t, f)| (t - f).powi(2)).sum();
        let want = ss.sqrt() / 40.0;
        assert!((reg.max_fitted_stderr(&y, &fitted) - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn collinear_variables_are_dropped() {
        let x: Vec<f64> = (0..100)
            .flat_map(|i| {
                let v = (i as f64 * 0.1).sin();
                [v, 3.0 * v - 1.0]
            })
            .collect();
        let y: Vec<f64> = x.chunks(2).map(|r| r[0] * r[0]).collect();
        let reg = Regressor::new(
            &x,
            2,
            &RegressionBasis {
                degree: 3,
                ridge: 0.0,
            },
        )
        .unwrap();
        assert_eq!(reg.design().kept_variables(), &[0]);
        let (_, fitted) = reg.fit(&y).unwrap();
        for (f, t) in fitted.iter().zip(&y) {
            assert!((f - t).abs() < 1e-8);
        }
    }

    #[test]
    fn too_few_samples() {
        let x = vec![0.0f64, 1.0, 2.0];
        assert!(matches!(
            Regressor::new(&x, 1, &RegressionBasis::default()),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn single_precision_targets() {
        let x: Vec<f32> = (0..100).map(|i| i as f32 / 100.0).collect();
        let y: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let (_, fitted) = regress_conditional(&x, 1, &y, &RegressionBasis::default()).unwrap();
        assert!(fitted.iter().zip(&y).all(|(f, t)| (f - t).abs() < 1e-5));
    }
}
