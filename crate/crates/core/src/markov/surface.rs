//! Tensor grid of node values over `(t, x, m)` for scalar state and scalar martingale.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::real::Real;

use super::{at_node, MarkovProblem};

/// Node values of `u` on a `t × x × m` grid with interior central-difference partials.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSurface<T> {
    pub times: Vec<T>,
    pub indices: Vec<usize>,
    pub xs: Vec<T>,
    pub ms: Vec<T>,
    /// Row-major `[t][x][m]`.
    pub u: Vec<T>,
    pub stderr: Vec<T>,
    pub d2u: Vec<Option<T>>,
    pub d3u: Vec<Option<T>>,
    /// Largest grid spacing in `x` and `m`, the effective bump size.
    pub h: T,
}

impl<T: Real> MarkovSurface<T> {
    #[inline]
    pub fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.xs.len() + b) * self.ms.len() + c
    }

    /// Multilinear interpolation of `(u, ∂ₓu, ∂ₘu)` inside the grid box; `None` outside it
    /// or where a corner lacks a partial.
    pub fn interpolate(&self, t: T, x: T, m: T) -> Option<(T, T, T)> {
        let (a0, a1, wa) = bracket(&self.times, t)?;
        let (b0, b1, wb) = bracket(&self.xs, x)?;
        let (c0, c1, wc) = bracket(&self.ms, m)?;
        let mut acc = (T::zero(), T::zero(), T::zero());
        for (a, fa) in [(a0, T::one() - wa), (a1, wa)] {
            for (b, fb) in [(b0, T::one() - wb), (b1, wb)] {
                for (c, fc) in [(c0, T::one() - wc), (c1, wc)] {
                    let w = fa * fb * fc;
                    if w == T::zero() {
                        continue;
                    }
                    let o = self.offset(a, b, c);
                    acc.0 = acc.0 + w * self.u[o];
                    acc.1 = acc.1 + w * self.d2u[o]?;
                    acc.2 = acc.2 + w * self.d3u[o]?;
                }
            }
        }
        Some(acc)
    }

    /// Dump `t,x,m,u,stderr,d2u,d3u`; missing partials are empty fields.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "t,x,m,u,stderr,d2u,d3u")?;
        let opt = |v: Option<T>| v.map(|v| v.to_string()).unwrap_or_default();
        for (a, t) in self.times.iter().enumerate() {
            for (b, x) in self.xs.iter().enumerate() {
                for (c, m) in self.ms.iter().enumerate() {
                    let o = self.offset(a, b, c);
                    writeln!(
                        w,
                        "{t},{x},{m},{},{},{},{}",
                        self.u[o],
                        self.stderr[o],
                        opt(self.d2u[o]),
                        opt(self.d3u[o])
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Index pair and weight locating `v` in the sorted axis, without extrapolation.
fn bracket<T: Real>(axis: &[T], v: T) -> Option<(usize, usize, T)> {
    let n = axis.len();
    if n == 0 || !v.is_finite() {
        return None;
    }
    if n == 1 {
        return (v == axis[0]).then_some((0, 0, T::zero()));
    }
    if v < axis[0] || v > axis[n - 1] {
        return None;
    }
    let k = axis.partition_point(|a| *a <= v).clamp(1, n - 1);
    let (lo, hi) = (axis[k - 1], axis[k]);
    Some((k - 1, k, (v - lo) / (hi - lo)))
}

fn check_axis<T: Real>(name: &str, axis: &[T]) -> Result<()> {
    if axis.is_empty() || axis.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "surface axis {name} must be nonempty and strictly increasing"
        )));
    }
    Ok(())
}

/// Restarted node solves over the tensor grid; every node uses the problem's seed, so
/// neighbouring nodes share their random numbers and differences are low-noise.
pub fn estimate_surface<T: Real>(
    problem: &MarkovProblem<T>,
    times: &[T],
    xs: &[T],
    ms: &[T],
) -> Result<MarkovSurface<T>> {
    if problem.coeffs.n != 1 || problem.model.dim != 1 {
        return Err(Error::Config(
            "surfaces are tabulated for scalar x and m only".into(),
        ));
    }
    check_axis("t", times)?;
    check_axis("x", xs)?;
    check_axis("m", ms)?;
    let indices = times
        .iter()
        .map(|t| problem.index_of(*t))
        .collect::<Result<Vec<_>>>()?;
    let (nt, nx, nm) = (times.len(), xs.len(), ms.len());
    let mut u = vec![T::zero(); nt * nx * nm];
    let mut stderr = u.clone();
    for (a, (&t, &index)) in times.iter().zip(&indices).enumerate() {
        for (c, &m) in ms.iter().enumerate() {
            let bundle = problem
                .bundle_at(index, &[m])
                .map_err(|e| at_node(t, &[xs[0]], &[m], e))?;
            for (b, &x) in xs.iter().enumerate() {
                let est = problem
                    .node_on(&bundle, index, &[x], &[m])
                    .map_err(|e| at_node(t, &[x], &[m], e))?;
                if !est.u.is_finite() {
                    return Err(at_node(
                        t,
                        &[x],
                        &[m],
                        Error::Domain("u is not finite".into()),
                    ));
                }
                let o = (a * nx + b) * nm + c;
                u[o] = est.u;
                stderr[o] = est.stderr;
            }
        }
    }
    let mut d2u = vec![None; u.len()];
    let mut d3u = vec![None; u.len()];
    for a in 0..nt {
        for b in 1..nx.saturating_sub(1) {
            for c in 0..nm {
                let o = (a * nx + b) * nm + c;
                let (hi, lo) = ((a * nx + b + 1) * nm + c, (a * nx + b - 1) * nm + c);
                d2u[o] = Some((u[hi] - u[lo]) / (xs[b + 1] - xs[b - 1]));
            }
        }
        for b in 0..nx {
            for c in 1..nm.saturating_sub(1) {
                let o = (a * nx + b) * nm + c;
                d3u[o] = Some((u[o + 1] - u[o - 1]) / (ms[c + 1] - ms[c - 1]));
            }
        }
    }
    let spacing = |axis: &[T]| {
        axis.windows(2)
            .map(|w| w[1] - w[0])
            .fold(T::zero(), |a, b| a.max(b))
    };
    Ok(MarkovSurface {
        times: times.to_vec(),
        indices,
        xs: xs.to_vec(),
        ms: ms.to_vec(),
        u,
        stderr,
        d2u,
        d3u,
        h: spacing(xs).max(spacing(ms)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> MarkovSurface<f64> {
        // u = 2x + 3m on a 1 × 3 × 3 grid.
        let xs = vec![-1.0, 0.0, 1.0];
        let ms = vec![-1.0, 0.0, 1.0];
        let mut u = Vec::new();
        for x in &xs {
            for m in &ms {
                u.push(2.0 * x + 3.0 * m);
            }
        }
        let d2u = (0..9).map(|_| Some(2.0)).collect();
        let d3u = (0..9).map(|_| Some(3.0)).collect();
        MarkovSurface {
            times: vec![0.0],
            indices: vec![0],
            xs,
            ms,
            u,
            stderr: vec![0.0; 9],
            d2u,
            d3u,
            h: 1.0,
        }
    }

    #[test]
    fn interpolation_is_exact_for_linear_surfaces() {
        let s = flat();
        let (u, dx, dm) = s.interpolate(0.0, 0.25, -0.5).unwrap();
        assert!((u - (0.5 - 1.5)).abs() < 1e-14);
        assert_eq!((dx, dm), (2.0, 3.0));
        assert!(s.interpolate(0.0, 1.5, 0.0).is_none());
        assert!(s.interpolate(0.1, 0.0, 0.0).is_none());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        flat().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x,m,u,stderr,d2u,d3u\n"));
        assert_eq!(text.lines().count(), 10);
    }
}
