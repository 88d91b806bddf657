//! Partials of `u` from the linear equation satisfied by `(∇Y, ∇Z)`.

use crate::array::PathArray;
use crate::bsde::{
    solve_backward, BackwardProblem, BsdeSolution, DriverArgs, DriverPartials, Generator,
    PathDriver, StateFeatures,
};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward_with_flows, ForwardSolution, StartPoint};
use crate::martingale::PathBundle;
use crate::real::Real;

use super::{at_node, MarkovProblem, SolveMethod};

/// Derivative-equation estimates of `∂ₓu` and `∂ₘu` at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeEstimate<T> {
    pub d2u: Vec<T>,
    pub d2u_stderr: Vec<T>,
    pub d3u: Vec<T>,
    pub d3u_stderr: Vec<T>,
}

#[derive(Clone, Copy)]
enum Direction {
    X(usize),
    M(usize),
}

/// Column `col` of a flow stored row-major with `cols` columns.
struct FlowFeatures<'a, T> {
    bundle: &'a PathBundle<T>,
    forward: &'a ForwardSolution<T>,
    flow: &'a PathArray<T>,
    cols: usize,
    col: usize,
}

impl<T: Real> StateFeatures<T> for FlowFeatures<'_, T> {
    fn width(&self) -> usize {
        2 * self.forward.n() + self.bundle.dim
    }
    fn fill(&self, p: usize, i: usize, out: &mut [T]) {
        let n = self.forward.n();
        let d = self.bundle.dim;
        out[..n].copy_from_slice(self.forward.x.at(p, i));
        self.forward.m_at(self.bundle, p, i, &mut out[n..n + d]);
        let f = self.flow.at(p, i);
        for j in 0..n {
            out[n + d + j] = f[j * self.cols + self.col];
        }
    }
}

/// Linear driver `∂ₓf·D + (∂ₘf) + ∂_y f·U + ∂_z f·(V q*)` along the base solution.
struct DerivativeGenerator<'a, T: Real> {
    base: PathDriver<'a, T>,
    solution: &'a BsdeSolution<T>,
    grad: &'a (dyn Fn(&DriverArgs<T>, &mut DriverPartials<T>) + Send + Sync),
    flow: &'a PathArray<T>,
    cols: usize,
    direction: Direction,
}

impl<T: Real> Generator<T> for DerivativeGenerator<'_, T> {
    fn value(&self, p: usize, i: usize, u: T, v: &[T]) -> T {
        let bundle = self.base.bundle;
        let forward = self.base.forward;
        let (n, d) = (forward.n(), bundle.dim);
        let mut m = vec![T::zero(); d];
        forward.m_at(bundle, p, i, &mut m);
        let mut zq = vec![T::zero(); d];
        self.base.rotate(p, i, self.solution.z.at(p, i), &mut zq);
        let args = DriverArgs {
            t: bundle.grid.t(i),
            x: forward.x.at(p, i),
            m: &m,
            y: self.solution.y.get(p, i),
            zq: &zq,
            q: bundle.q.at(p, i),
        };
        let mut g = DriverPartials::zeros(n, d);
        (self.grad)(&args, &mut g);
        let f = self.flow.at(p, i);
        let col = match self.direction {
            Direction::X(c) | Direction::M(c) => c,
        };
        let mut s = T::zero();
        for j in 0..n {
            s = s + g.dx[j] * f[j * self.cols + col];
        }
        if let Direction::M(k) = self.direction {
            s = s + g.dm[k];
        }
        let mut vq = vec![T::zero(); d];
        self.base.rotate(p, i, v, &mut vq);
        s = s + g.dy * u;
        for a in 0..d {
            s = s + g.dz[a] * vq[a];
        }
        s
    }

    fn is_zero(&self) -> bool {
        self.base.driver.meta.zero
    }
}

/// Solves the derivative equations at a node (without an orthogonal bracket term).
pub fn derivative_bsde_solve<T: Real>(
    problem: &MarkovProblem<T>,
    t: T,
    x: &[T],
    m: &[T],
) -> Result<DerivativeEstimate<T>> {
    run(problem, t, x, m).map_err(|e| at_node(t, x, m, e))
}

fn run<T: Real>(
    problem: &MarkovProblem<T>,
    t: T,
    x: &[T],
    m: &[T],
) -> Result<DerivativeEstimate<T>> {
    if let SolveMethod::Orthogonal { kappa, .. } = problem.method {
        if kappa != 0.0 {
            return Err(Error::Config(
                "derivative equations are implemented for κ = 0 only".into(),
            ));
        }
    }
    let grad = problem
        .driver
        .grad
        .as_ref()
        .ok_or_else(|| Error::Config("derivative equations need the driver partials".into()))?;
    let tgrad =
        problem.terminal.grad.as_ref().ok_or_else(|| {
            Error::Config("derivative equations need the terminal gradient".into())
        })?;
    if !problem.coeffs.has_partials() {
        return Err(Error::Config(
            "derivative equations need the coefficient partials".into(),
        ));
    }
    let index = problem.index_of(t)?;
    let bundle = problem.bundle_at(index, m)?;
    let fw = simulate_forward_with_flows(
        &problem.coeffs,
        &bundle,
        &StartPoint::new(index, x.to_vec(), m.to_vec()),
    )?;
    let base = problem.solve_forward(&bundle, &fw)?;
    let (n, d) = (fw.n(), bundle.dim);
    let steps = bundle.n_steps();
    let paths = bundle.n_paths();
    let dx = fw.dx.as_ref().expect("flows simulated");
    let dm = fw.dm.as_ref().expect("flows simulated");

    let mut gx = vec![T::zero(); n];
    let mut gm = vec![T::zero(); d];
    let mut mt = vec![T::zero(); d];
    let mut grads = Vec::with_capacity(paths);
    for p in 0..paths {
        fw.m_at(&bundle, p, steps, &mut mt);
        tgrad(fw.x.at(p, steps), &mt, &mut gx, &mut gm);
        grads.push((gx.clone(), gm.clone()));
    }

    let mut out = DerivativeEstimate {
        d2u: Vec::new(),
        d2u_stderr: Vec::new(),
        d3u: Vec::new(),
        d3u_stderr: Vec::new(),
    };
    let directions: Vec<Direction> = (0..n)
        .map(Direction::X)
        .chain((0..d).map(Direction::M))
        .collect();
    for dir in directions {
        let (flow, cols, col) = match dir {
            Direction::X(c) => (dx, n, c),
            Direction::M(c) => (dm, d, c),
        };
        let terminal: Vec<T> = (0..paths)
            .map(|p| {
                let f = flow.at(p, steps);
                let (gx, gm) = &grads[p];
                let mut s = T::zero();
                for j in 0..n {
                    s = s + gx[j] * f[j * cols + col];
                }
                if let Direction::M(k) = dir {
                    s = s + gm[k];
                }
                s
            })
            .collect();
        let generator = DerivativeGenerator {
            base: PathDriver {
                driver: &problem.driver,
                bundle: &bundle,
                forward: &fw,
            },
            solution: &base,
            grad: grad.as_ref(),
            flow,
            cols,
            direction: dir,
        };
        let features = FlowFeatures {
            bundle: &bundle,
            forward: &fw,
            flow,
            cols,
            col,
        };
        let sol = solve_backward(
            &BackwardProblem {
                noise: &bundle,
                features: &features,
                generator: &generator,
                terminal: &terminal,
                start: index,
                y_bounds: None,
            },
            problem.method.picard(),
        )?;
        match dir {
            Direction::X(_) => {
                out.d2u.push(sol.start_value);
                out.d2u_stderr.push(sol.start_stderr);
            }
            Direction::M(_) => {
                out.d3u.push(sol.start_value);
                out.d3u_stderr.push(sol.start_stderr);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{Driver, PicardOptions, TerminalCondition};
    use crate::forward::SdeCoefficients;
    use crate::martingale::{MartingaleModel, TimeGrid};
    use std::sync::Arc;

    fn problem(
        terminal: TerminalCondition<f64>,
        coeffs: SdeCoefficients<f64>,
    ) -> MarkovProblem<f64> {
        MarkovProblem {
            model: MartingaleModel::brownian(1),
            grid: TimeGrid::uniform(1.0, 50).unwrap(),
            coeffs,
            driver: Driver::zero(),
            terminal,
            paths: 20_000,
            seed: 4,
            method: SolveMethod::Lipschitz(PicardOptions::default()),
        }
    }

    fn identity() -> TerminalCondition<f64> {
        TerminalCondition::new(Arc::new(|x: &[f64], _: &[f64]| x[0]), f64::INFINITY).with_grad(
            Arc::new(|_: &[f64], _: &[f64], gx: &mut [f64], gm: &mut [f64]| {
                gx[0] = 1.0;
                gm[0] = 0.0;
            }),
        )
    }

    #[test]
    fn geometric_flow_has_unit_expectation() {
        let est = derivative_bsde_solve(
            &problem(identity(), SdeCoefficients::linear(1.0, 0.0)),
            0.0,
            &[1.0],
            &[0.0],
        )
        .unwrap();
        assert!(
            (est.d2u[0] - 1.0).abs() < 5.0 * est.d2u_stderr[0] + 1e-12,
            "{est:?}"
        );
        assert!(est.d3u[0].abs() < 1e-12);
    }

    #[test]
    fn missing_partials_are_config_errors() {
        let no_grad = TerminalCondition::new(Arc::new(|x: &[f64], _: &[f64]| x[0]), 1.0);
        let err = derivative_bsde_solve(
            &problem(no_grad, SdeCoefficients::linear(1.0, 0.0)),
            0.0,
            &[1.0],
            &[0.0],
        )
        .unwrap_err();
        match err {
            Error::AtNode { source, .. } => assert!(matches!(*source, Error::Config(_))),
            e => panic!("unexpected {e:?}"),
        }
    }
}
