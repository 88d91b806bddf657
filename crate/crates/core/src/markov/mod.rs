//! The Markov functions `u(t, x, m)` behind `Y_s = u(s, X_s, M_s)`: restarted node
//! solves, finite-difference and derivative-equation partials, and the checks of the
//! control representation `Z = ∂ₓu σ + ∂ₘu`.

mod derivative;
mod oracle;
mod representation;
mod surface;

use crate::bsde::{
    solve_lipschitz, solve_quadratic, solve_quadratic_with_orthogonal, BsdeSolution, Driver,
    PicardOptions, QuadraticOptions, TerminalCondition,
};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, ForwardSolution, SdeCoefficients, StartPoint};
use crate::martingale::{generate_paths_from, MartingaleModel, PathBundle, TimeGrid};
use crate::real::Real;

pub use derivative::{derivative_bsde_solve, DerivativeEstimate};
pub use oracle::{
    appendix_a3_coefficients, appendix_a3_oracle, appendix_a3_problem, appendix_a3_terminal,
    OracleValue,
};
pub use representation::{
    bracket_check, cells_by_bumps, cells_from_surface, representation_check, BracketReport,
    BumpCells, RepresentationCell, RepresentationReport,
};
pub use surface::{estimate_surface, MarkovSurface};

/// Which backward solver a node solve uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SolveMethod {
    Lipschitz(PicardOptions),
    Quadratic(QuadraticOptions),
    /// Orthogonal component `N` with bracket coefficient `κ`.
    Orthogonal {
        kappa: f64,
        opts: QuadraticOptions,
    },
}

impl SolveMethod {
    pub fn picard(&self) -> &PicardOptions {
        match self {
            SolveMethod::Lipschitz(p) => p,
            SolveMethod::Quadratic(q) | SolveMethod::Orthogonal { opts: q, .. } => &q.picard,
        }
    }
}

/// A complete forward-backward problem that can be restarted from any grid node.
#[derive(Clone, Debug)]
pub struct MarkovProblem<T: Real> {
    pub model: MartingaleModel<T>,
    pub grid: TimeGrid<T>,
    pub coeffs: SdeCoefficients<T>,
    pub driver: Driver<T>,
    pub terminal: TerminalCondition<T>,
    pub paths: usize,
    pub seed: u64,
    pub method: SolveMethod,
}

/// Value estimate at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEstimate<T> {
    pub t: T,
    pub index: usize,
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub u: T,
    pub stderr: T,
    /// Pathwise start targets, kept for paired differences.
    pub targets: Vec<T>,
}

/// Central-difference partials at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct Partials<T> {
    pub d2u: Vec<T>,
    pub d2u_stderr: Vec<T>,
    pub d3u: Vec<T>,
    pub d3u_stderr: Vec<T>,
    pub h: T,
    /// Coordinates whose estimate is dominated by Monte Carlo noise.
    pub warnings: Vec<String>,
}

pub(crate) fn at_node<T: Real>(t: T, x: &[T], m: &[T], e: Error) -> Error {
    match e {
        e @ Error::AtNode { .. } => e,
        e => Error::AtNode {
            t: t.f64(),
            x: x.iter().map(|v| v.f64()).collect(),
            m: m.iter().map(|v| v.f64()).collect(),
            source: Box::new(e),
        },
    }
}

impl<T: Real> MarkovProblem<T> {
    /// Grid index of `t`; nodes must sit on the grid.
    pub fn index_of(&self, t: T) -> Result<usize> {
        self.grid
            .index_of(t)
            .ok_or_else(|| Error::Config(format!("node time {t} is not a grid point")))
    }

    /// Noise restarted at `index` from `m`, with the problem's seed.
    pub fn bundle_at(&self, index: usize, m: &[T]) -> Result<PathBundle<T>> {
        generate_paths_from(&self.model, &self.grid, self.paths, self.seed, index, m)
    }

    /// Forward and backward solve from `(index, x, m)` on a given bundle.
    pub fn solve_on(
        &self,
        bundle: &PathBundle<T>,
        index: usize,
        x: &[T],
        m: &[T],
    ) -> Result<(ForwardSolution<T>, BsdeSolution<T>)> {
        let start = StartPoint::new(index, x.to_vec(), m.to_vec());
        let fw = simulate_forward(&self.coeffs, bundle, &start)?;
        let sol = self.solve_forward(bundle, &fw)?;
        Ok((fw, sol))
    }

    /// Backward solve along an existing forward solution.
    pub fn solve_forward(
        &self,
        bundle: &PathBundle<T>,
        fw: &ForwardSolution<T>,
    ) -> Result<BsdeSolution<T>> {
        match &self.method {
            SolveMethod::Lipschitz(o) => {
                solve_lipschitz(&self.driver, &self.terminal, fw, bundle, o)
            }
            SolveMethod::Quadratic(o) => {
                solve_quadratic(&self.driver, &self.terminal, fw, bundle, o)
            }
            SolveMethod::Orthogonal { kappa, opts } => solve_quadratic_with_orthogonal(
                &self.driver,
                &self.terminal,
                fw,
                bundle,
                T::lit(*kappa),
                opts,
            ),
        }
    }

    /// Restarted solve at a node on fresh noise.
    pub fn solve_at(
        &self,
        index: usize,
        x: &[T],
        m: &[T],
    ) -> Result<(PathBundle<T>, ForwardSolution<T>, BsdeSolution<T>)> {
        let bundle = self.bundle_at(index, m)?;
        let (fw, sol) = self.solve_on(&bundle, index, x, m)?;
        Ok((bundle, fw, sol))
    }

    fn node_on(
        &self,
        bundle: &PathBundle<T>,
        index: usize,
        x: &[T],
        m: &[T],
    ) -> Result<NodeEstimate<T>> {
        let (_, sol) = self.solve_on(bundle, index, x, m)?;
        Ok(NodeEstimate {
            t: self.grid.t(index),
            index,
            x: x.to_vec(),
            m: m.to_vec(),
            u: sol.start_value,
            stderr: sol.start_stderr,
            targets: sol.start_targets,
        })
    }

    /// `u(t, x, m)` with its Monte Carlo standard error.
    pub fn node(&self, t: T, x: &[T], m: &[T]) -> Result<NodeEstimate<T>> {
        let run = || {
            let index = self.index_of(t)?;
            let bundle = self.bundle_at(index, m)?;
            self.node_on(&bundle, index, x, m)
        };
        run().map_err(|e| at_node(t, x, m, e))
    }
}

/// `u` at each node, restarting forward and backward solves with common random numbers.
pub fn estimate_u<T: Real>(
    problem: &MarkovProblem<T>,
    nodes: &[(T, Vec<T>, Vec<T>)],
) -> Result<Vec<NodeEstimate<T>>> {
    nodes
        .iter()
        .map(|(t, x, m)| problem.node(*t, x, m))
        .collect()
}

pub(crate) fn paired<T: Real>(plus: &[T], minus: &[T], h: T) -> (T, T) {
    let n = plus.len().max(1) as f64;
    let diffs: Vec<f64> = plus
        .iter()
        .zip(minus)
        .map(|(a, b)| a.f64() - b.f64())
        .collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let h2 = 2.0 * h.f64();
    (T::lit(mean / h2), T::lit((var / n).sqrt() / h2))
}

/// Central differences of `u` in every `x` and `m` coordinate with common random numbers.
pub fn finite_diff_partials<T: Real>(
    problem: &MarkovProblem<T>,
    t: T,
    x: &[T],
    m: &[T],
    h: T,
) -> Result<Partials<T>> {
    let run = || {
        let index = problem.index_of(t)?;
        let bundle = problem.bundle_at(index, m)?;
        finite_diff_partials_on(problem, &bundle, index, x, m, h)
    };
    run().map_err(|e| at_node(t, x, m, e))
}

/// Like [`finite_diff_partials`] on a bundle restarted at `index`. Bumps in `m` reuse the
/// bundle when the martingale has independent increments and regenerate it otherwise.
pub fn finite_diff_partials_on<T: Real>(
    problem: &MarkovProblem<T>,
    bundle: &PathBundle<T>,
    index: usize,
    x: &[T],
    m: &[T],
    h: T,
) -> Result<Partials<T>> {
    if !(h > T::zero()) || !h.is_finite() {
        return Err(Error::Config(format!(
            "bump size must be positive, got {h}"
        )));
    }
    let mut out = Partials {
        d2u: Vec::new(),
        d2u_stderr: Vec::new(),
        d3u: Vec::new(),
        d3u_stderr: Vec::new(),
        h,
        warnings: Vec::new(),
    };
    for j in 0..x.len() {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[j] = xp[j] + h;
        xm[j] = xm[j] - h;
        let up = problem.node_on(bundle, index, &xp, m)?;
        let dn = problem.node_on(bundle, index, &xm, m)?;
        let (v, s) = paired(&up.targets, &dn.targets, h);
        if s > h * v.abs() {
            out.warnings.push(format!(
                "d2u[{j}] is noise dominated (stderr {s} vs h·|∂u| {})",
                h * v.abs()
            ));
        }
        out.d2u.push(v);
        out.d2u_stderr.push(s);
    }
    let shared = problem.model.independent_increments();
    for k in 0..m.len() {
        let (mut mp, mut mm) = (m.to_vec(), m.to_vec());
        mp[k] = mp[k] + h;
        mm[k] = mm[k] - h;
        let (up, dn) = if shared {
            (
                problem.node_on(bundle, index, x, &mp)?,
                problem.node_on(bundle, index, x, &mm)?,
            )
        } else {
            let bp = problem.bundle_at(index, &mp)?;
            let bm = problem.bundle_at(index, &mm)?;
            (
                problem.node_on(&bp, index, x, &mp)?,
                problem.node_on(&bm, index, x, &mm)?,
            )
        };
        let (v, s) = paired(&up.targets, &dn.targets, h);
        if s > h * v.abs() {
            out.warnings.push(format!(
                "d3u[{k}] is noise dominated (stderr {s} vs h·|∂u| {})",
                h * v.abs()
            ));
        }
        out.d3u.push(v);
        out.d3u_stderr.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn problem(terminal: TerminalCondition<f64>, driver: Driver<f64>) -> MarkovProblem<f64> {
        MarkovProblem {
            model: MartingaleModel::brownian(1),
            grid: TimeGrid::uniform(1.0, 20).unwrap(),
            coeffs: SdeCoefficients::constant(1, 1, vec![1.0], vec![0.0]),
            driver,
            terminal,
            paths: 2000,
            seed: 17,
            method: SolveMethod::Lipschitz(PicardOptions::default()),
        }
    }

    #[test]
    fn constant_problem_is_constant_at_every_node() {
        let pr = problem(TerminalCondition::constant(2.0), Driver::zero());
        let nodes = vec![(0.0, vec![0.0], vec![0.0]), (0.5, vec![1.0], vec![-1.0])];
        for est in estimate_u(&pr, &nodes).unwrap() {
            assert!((est.u - 2.0).abs() < 1e-12);
            assert!(est.stderr < 1e-12);
        }
    }

    #[test]
    fn off_grid_nodes_are_tagged_config_errors() {
        let pr = problem(TerminalCondition::constant(2.0), Driver::zero());
        match pr.node(0.123, &[0.0], &[0.0]).unwrap_err() {
            Error::AtNode { source, .. } => assert!(matches!(*source, Error::Config(_))),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn linear_terminal_has_unit_slope_under_common_numbers() {
        let pr = problem(
            TerminalCondition::clipped_identity(-50.0, 50.0),
            Driver::zero(),
        );
        let part = finite_diff_partials(&pr, 0.0, &[0.0], &[0.0], 0.01).unwrap();
        assert!((part.d2u[0] - 1.0).abs() < 1e-6);
        assert!(part.d3u[0].abs() < 1e-9);
    }

    #[test]
    fn identity_in_m_has_unit_m_slope() {
        let pr = problem(
            TerminalCondition::new(Arc::new(|_: &[f64], m: &[f64]| m[0].tanh()), 1.0),
            Driver::zero(),
        );
        let part = finite_diff_partials(&pr, 0.5, &[0.0], &[0.0], 0.01).unwrap();
        assert!(part.d3u[0] > 0.3 && part.d3u[0] < 1.0);
    }
}
