//! Diagnostics of a solution: the BMO norm of `Z·M` on grid times and the
//! martingale-difference check of the discrete equation.

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::forward::ForwardSolution;
use crate::linalg;
use crate::martingale::PathBundle;
use crate::real::Real;
use crate::regression::{RegressionBasis, Regressor};

use super::{mean_and_stderr, BsdeSolution, Driver, Generator, PathDriver, StateFeatures};

/// `sup_t ess sup E[∫_t^T |q Z*|² dC | F_t]^{1/2}` over grid times from `start`, with the
/// conditional expectation regressed on `features` and the essential supremum taken as
/// the path maximum of the fitted values.
pub fn bmo_norm_estimate<T: Real, S: StateFeatures<T>>(
    z: &PathArray<T>,
    bundle: &PathBundle<T>,
    features: &S,
    start: usize,
    basis: &RegressionBasis,
) -> Result<f64> {
    let (paths, steps, d) = (bundle.n_paths(), bundle.n_steps(), bundle.dim);
    if z.paths() != paths || z.times() != steps + 1 || z.width() != d {
        return Err(Error::Shape(
            "control array does not match the bundle".into(),
        ));
    }
    let w = features.width();
    let mut tail = vec![0.0f64; paths];
    let mut br = vec![T::zero(); d * d];
    let mut feats = vec![T::zero(); paths * w];
    let mut best = 0.0f64;
    for i in (start..steps).rev() {
        for (p, t) in tail.iter_mut().enumerate() {
            bundle.dbracket(p, i, &mut br);
            *t += linalg::quad_form(z.at(p, i), &br, d).f64();
            features.fill(p, i, &mut feats[p * w..(p + 1) * w]);
        }
        let reg = Regressor::new(&feats, w, basis)?;
        let (_, fitted) = reg.fit(&tail)?;
        let m = fitted.iter().cloned().fold(0.0f64, f64::max);
        best = best.max(m);
    }
    Ok(best.max(0.0).sqrt())
}

/// Per-step mean and standard error of `Y_t − Y_T − Σ_{s≥t} f ΔC (− κ/2 Σ U² Δ⟨N⟩)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerResidual {
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Largest `|mean| / stderr` over steps (steps with zero spread count only if the mean is nonzero).
    pub worst_ratio: f64,
}

impl TowerResidual {
    pub fn within(&self, sigmas: f64) -> bool {
        self.worst_ratio <= sigmas
    }
}

/// Martingale-difference check of a solution along its forward paths.
pub fn tower_residual<T: Real>(
    sol: &BsdeSolution<T>,
    driver: &Driver<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    kappa: T,
) -> Result<TowerResidual> {
    let (paths, steps) = (bundle.n_paths(), bundle.n_steps());
    let pd = PathDriver {
        driver,
        bundle,
        forward,
    };
    let mut acc = vec![T::zero(); paths];
    let mut means = Vec::new();
    let mut stderrs = Vec::new();
    let mut worst = 0.0f64;
    let mut diff = vec![T::zero(); paths];
    for i in (sol.start..steps).rev() {
        for p in 0..paths {
            let y = sol.y.get(p, i);
            let mut inc = pd.value(p, i, y, sol.z.at(p, i)) * bundle.dclock(p, i);
            if let (Some(u), Some(nn)) = (&sol.u_orth, &bundle.bracket_nn) {
                let ui = u.get(p, i);
                inc = inc + T::lit(0.5) * kappa * ui * ui * (nn.get(p, i + 1) - nn.get(p, i));
            }
            acc[p] = acc[p] + inc;
            diff[p] = y - sol.y.get(p, steps) - acc[p];
        }
        let (m, s) = mean_and_stderr(&diff);
        let (m, s) = (m.f64(), s.f64());
        let scale = 1e-10 * (1.0 + sol.bound.f64());
        let ratio = if s > 0.0 {
            m.abs() / s
        } else if m.abs() > scale {
            f64::INFINITY
        } else {
            0.0
        };
        worst = worst.max(ratio);
        means.push(m);
        stderrs.push(s);
    }
    means.reverse();
    stderrs.reverse();
    Ok(TowerResidual {
        means,
        stderrs,
        worst_ratio: worst,
    })
}
