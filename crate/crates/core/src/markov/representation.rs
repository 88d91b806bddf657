//! Checks of `Z = ∂ₓu σ + ∂ₘu` on sampled cells and of `⟨Y, M⟩ = ∫ Z d⟨M, M⟩`.

use std::io::{self, Write};

use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::forward::{ForwardSolution, SdeCoefficients};
use crate::martingale::PathBundle;
use crate::real::Real;

use super::surface::MarkovSurface;
use super::{finite_diff_partials_on, MarkovProblem};

/// Fewest cells a representation report is computed from.
pub const MIN_CELLS: usize = 100;

/// Offset in the relative residual `|Z − pred| / (|Z| + δ)`.
pub const RELATIVE_OFFSET: f64 = 1e-6;

/// One sampled state with the regression control and the predicted one.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationCell {
    pub t: f64,
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub z: Vec<f64>,
    pub pred: Vec<f64>,
}

impl RepresentationCell {
    pub fn residual(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.pred)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn relative_residual(&self) -> f64 {
        let norm = self.z.iter().map(|a| a * a).sum::<f64>().sqrt();
        self.residual() / (norm + RELATIVE_OFFSET)
    }
}

/// Summary of the representation residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationReport {
    pub cells: Vec<RepresentationCell>,
    pub relative: Vec<f64>,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    /// Cells dropped because they fell outside the interpolation box.
    pub excluded: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl RepresentationReport {
    /// Dump `t,cell_x,cell_m,Z,pred,resid`. For vector states the first coordinate is
    /// written; vector controls are written as norms.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "t,cell_x,cell_m,Z,pred,resid")?;
        for c in &self.cells {
            let (z, pred) = if c.z.len() == 1 {
                (c.z[0], c.pred[0])
            } else {
                let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
                (norm(&c.z), norm(&c.pred))
            };
            writeln!(
                w,
                "{},{},{},{z},{pred},{}",
                c.t,
                c.x.first().copied().unwrap_or(f64::NAN),
                c.m.first().copied().unwrap_or(f64::NAN),
                c.residual()
            )?;
        }
        Ok(())
    }
}

/// Residual quantiles over the cells; fewer than [`MIN_CELLS`] is a sampling error.
pub fn representation_check(
    cells: Vec<RepresentationCell>,
    excluded: usize,
) -> Result<RepresentationReport> {
    if cells.len() < MIN_CELLS {
        return Err(Error::Sampling(format!(
            "{} cells (need at least {MIN_CELLS}); {excluded} excluded",
            cells.len()
        )));
    }
    let relative: Vec<f64> = cells
        .iter()
        .map(RepresentationCell::relative_residual)
        .collect();
    let mut sorted = relative.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(RepresentationReport {
        q25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        cells,
        relative,
        excluded,
    })
}

fn prediction<T: Real>(
    coeffs: &SdeCoefficients<T>,
    t: T,
    x: &[T],
    m: &[T],
    d2u: &[T],
    d3u: &[T],
) -> Vec<f64> {
    let (n, d) = (coeffs.n, coeffs.d);
    let mut sigma = vec![T::zero(); n * d];
    (coeffs.sigma)(t, x, m, &mut sigma);
    (0..d)
        .map(|k| {
            let mut s = d3u[k];
            for j in 0..n {
                s = s + d2u[j] * sigma[j * d + k];
            }
            s.f64()
        })
        .collect()
}

fn state_at<T: Real>(
    bundle: &PathBundle<T>,
    forward: &ForwardSolution<T>,
    p: usize,
    i: usize,
) -> (Vec<T>, Vec<T>) {
    let mut m = vec![T::zero(); bundle.dim];
    forward.m_at(bundle, p, i, &mut m);
    (forward.x.at(p, i).to_vec(), m)
}

/// Cells at the surface's time nodes: the first `per_step` paths of each step, partials
/// by multilinear interpolation, states outside the box excluded and counted.
pub fn cells_from_surface<T: Real>(
    surface: &MarkovSurface<T>,
    solution: &BsdeSolution<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    coeffs: &SdeCoefficients<T>,
    per_step: usize,
) -> (Vec<RepresentationCell>, usize) {
    let mut cells = Vec::new();
    let mut excluded = 0;
    for (&i, &t) in surface.indices.iter().zip(&surface.times) {
        if i < solution.start || i >= bundle.n_steps() {
            continue;
        }
        for p in 0..per_step.min(bundle.n_paths()) {
            let (x, m) = state_at(bundle, forward, p, i);
            match surface.interpolate(t, x[0], m[0]) {
                Some((_, dx, dm)) => cells.push(RepresentationCell {
                    t: t.f64(),
                    x: x.iter().map(|v| v.f64()).collect(),
                    m: m.iter().map(|v| v.f64()).collect(),
                    z: solution.z.at(p, i).iter().map(|v| v.f64()).collect(),
                    pred: prediction(coeffs, t, &x, &m, &[dx], &[dm]),
                }),
                None => excluded += 1,
            }
        }
    }
    (cells, excluded)
}

/// Cells with on-path bump partials, plus the `∂ₘu` estimates for the zero check.
#[derive(Clone, Debug, PartialEq)]
pub struct BumpCells {
    pub cells: Vec<RepresentationCell>,
    pub d3u: Vec<Vec<f64>>,
    pub d3u_stderr: Vec<Vec<f64>>,
    pub warnings: usize,
}

impl BumpCells {
    /// True when every `|∂ₘu| ≤ sigmas·stderr + floor`.
    pub fn d3u_vanishes(&self, sigmas: f64, floor: f64) -> bool {
        self.d3u
            .iter()
            .zip(&self.d3u_stderr)
            .all(|(v, s)| v.iter().zip(s).all(|(a, b)| a.abs() <= sigmas * b + floor))
    }

    /// Largest `|∂ₘu| / (stderr + floor)`.
    pub fn d3u_worst_ratio(&self, floor: f64) -> f64 {
        self.d3u
            .iter()
            .zip(&self.d3u_stderr)
            .flat_map(|(v, s)| v.iter().zip(s).map(move |(a, b)| a.abs() / (b + floor)))
            .fold(0.0, f64::max)
    }
}

/// Cells on the first `per_step` paths of each listed step, with partials from restarted
/// central differences of size `h`.
pub fn cells_by_bumps<T: Real>(
    problem: &MarkovProblem<T>,
    solution: &BsdeSolution<T>,
    forward: &ForwardSolution<T>,
    bundle: &PathBundle<T>,
    steps: &[usize],
    per_step: usize,
    h: T,
) -> Result<BumpCells> {
    let mut out = BumpCells {
        cells: Vec::new(),
        d3u: Vec::new(),
        d3u_stderr: Vec::new(),
        warnings: 0,
    };
    let shared = problem.model.independent_increments();
    for &i in steps {
        if i < solution.start || i >= bundle.n_steps() {
            return Err(Error::Config(format!(
                "cell step {i} outside the solved range"
            )));
        }
        let t = bundle.grid.t(i);
        let mut restart = None;
        for p in 0..per_step.min(bundle.n_paths()) {
            let (x, m) = state_at(bundle, forward, p, i);
            if restart.is_none() || !shared {
                restart = Some(problem.bundle_at(i, &m)?);
            }
            let b = restart.as_ref().expect("set above");
            let part = finite_diff_partials_on(problem, b, i, &x, &m, h)
                .map_err(|e| super::at_node(t, &x, &m, e))?;
            out.warnings += part.warnings.len();
            out.cells.push(RepresentationCell {
                t: t.f64(),
                x: x.iter().map(|v| v.f64()).collect(),
                m: m.iter().map(|v| v.f64()).collect(),
                z: solution.z.at(p, i).iter().map(|v| v.f64()).collect(),
                pred: prediction(&problem.coeffs, t, &x, &m, &part.d2u, &part.d3u),
            });
            out.d3u.push(part.d3u.iter().map(|v| v.f64()).collect());
            out.d3u_stderr
                .push(part.d3u_stderr.iter().map(|v| v.f64()).collect());
        }
    }
    Ok(out)
}

/// Per-path sup-time residual of `Σ ΔY ΔMᵏ − Σ (Z Δ⟨M⟩)ᵏ`, maximized over components.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketReport {
    pub sup_residual: Vec<f64>,
    pub median: f64,
}

pub fn bracket_check<T: Real>(
    solution: &BsdeSolution<T>,
    bundle: &PathBundle<T>,
) -> Result<BracketReport> {
    let (paths, steps, d) = (bundle.n_paths(), bundle.n_steps(), bundle.dim);
    if solution.y.paths() != paths || solution.y.times() != steps + 1 || solution.z.width() != d {
        return Err(Error::Shape("solution does not match the bundle".into()));
    }
    let mut dm = vec![T::zero(); d];
    let mut br = vec![T::zero(); d * d];
    let mut sup = Vec::with_capacity(paths);
    for p in 0..paths {
        let mut lhs = vec![0.0f64; d];
        let mut rhs = vec![0.0f64; d];
        let mut worst = 0.0f64;
        for i in solution.start..steps {
            let dy = (solution.y.get(p, i + 1) - solution.y.get(p, i)).f64();
            bundle.dm(p, i, &mut dm);
            bundle.dbracket(p, i, &mut br);
            let z = solution.z.at(p, i);
            for k in 0..d {
                lhs[k] += dy * dm[k].f64();
                let mut s = 0.0;
                for a in 0..d {
                    s += z[a].f64() * br[a * d + k].f64();
                }
                rhs[k] += s;
                worst = worst.max((lhs[k] - rhs[k]).abs());
            }
        }
        sup.push(worst);
    }
    let mut sorted = sup.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(BracketReport {
        median: quantile(&sorted, 0.5),
        sup_residual: sup,
    })
}
