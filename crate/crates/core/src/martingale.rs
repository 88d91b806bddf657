//! Sample paths of the driving martingale basis `M` (and an optional orthogonal `N`),
//! their pathwise brackets, the arctan clock `C` and the density `q` with
//! `⟨M,M⟩ = ∫ q q* dC`.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::array::PathArray;
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel::{self, CHUNK};
use crate::real::Real;

/// Partition `0 = t₀ < … < t_N = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid<T> {
    points: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn uniform(horizon: T, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::Config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let n = T::idx(steps);
        let mut points: Vec<T> = (0..=steps).map(|i| horizon * T::idx(i) / n).collect();
        points[steps] = horizon;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<T>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if points[0] != T::zero() {
            return Err(Error::Config("time grid must start at 0".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || points.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config(
                "time grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// Concatenation of uniform pieces: `pieces = [(t_end, steps), …]` with increasing ends.
    pub fn piecewise(pieces: &[(T, usize)]) -> Result<Self> {
        let mut points = vec![T::zero()];
        let mut left = T::zero();
        for &(end, steps) in pieces {
            if steps == 0 || !(end > left) {
                return Err(Error::Config("invalid piecewise grid segment".into()));
            }
            let n = T::idx(steps);
            for i in 1..=steps {
                points.push(if i == steps {
                    end
                } else {
                    left + (end - left) * T::idx(i) / n
                });
            }
            left = end;
        }
        Self::from_points(points)
    }

    pub fn horizon(&self) -> T {
        self.points[self.points.len() - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    #[inline]
    pub fn t(&self, i: usize) -> T {
        self.points[i]
    }

    #[inline]
    pub fn dt(&self, i: usize) -> T {
        self.points[i + 1] - self.points[i]
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn max_step(&self) -> T {
        (0..self.n_steps())
            .map(|i| self.dt(i))
            .fold(T::zero(), T::max)
    }

    /// Index of the grid point equal to `t` up to a relative tolerance of 1e-9.
    pub fn index_of(&self, t: T) -> Option<usize> {
        let tol = T::lit(1e-9) * self.horizon().max(T::one());
        self.points.iter().position(|&s| (s - t).abs() <= tol)
    }
}

/// Volatility `a(t, m)` writing a row-major `d × d` matrix into the output slice.
pub type VolFn<T> = Arc<dyn Fn(T, &[T], &mut [T]) + Send + Sync>;

#[derive(Clone)]
pub enum MartingaleKind<T> {
    Brownian,
    Diffusion(VolFn<T>),
}

#[derive(Clone)]
pub struct MartingaleModel<T: Real> {
    pub dim: usize,
    pub kind: MartingaleKind<T>,
    pub initial: Vec<T>,
    /// Constant volatility of the orthogonal martingale `N`, if present.
    pub orthogonal_vol: Option<T>,
    /// Upper bound `Q` for every accumulated bracket.
    pub bracket_bound: T,
    /// Memory budget in bytes for a generated bundle.
    pub memory_budget: usize,
}

impl<T: Real> fmt::Debug for MartingaleModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            MartingaleKind::Brownian => "brownian",
            MartingaleKind::Diffusion(_) => "diffusion_martingale",
        };
        f.debug_struct("MartingaleModel")
            .field("dim", &self.dim)
            .field("kind", &kind)
            .field("initial", &self.initial)
            .field("orthogonal_vol", &self.orthogonal_vol)
            .field("bracket_bound", &self.bracket_bound)
            .finish()
    }
}

pub const DEFAULT_MEMORY_BUDGET: usize = 3 << 30;

impl<T: Real> MartingaleModel<T> {
    pub fn brownian(dim: usize) -> Self {
        Self {
            dim,
            kind: MartingaleKind::Brownian,
            initial: vec![T::zero(); dim],
            orthogonal_vol: None,
            bracket_bound: T::lit(1e4),
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    pub fn diffusion(dim: usize, vol: VolFn<T>) -> Self {
        Self {
            kind: MartingaleKind::Diffusion(vol),
            ..Self::brownian(dim)
        }
    }

    pub fn with_initial(mut self, m: Vec<T>) -> Self {
        self.initial = m;
        self
    }

    pub fn with_orthogonal(mut self, vol: T) -> Self {
        self.orthogonal_vol = Some(vol);
        self
    }

    pub fn with_bracket_bound(mut self, q: T) -> Self {
        self.bracket_bound = q;
        self
    }

    pub fn with_memory_budget(mut self, bytes: usize) -> Self {
        self.memory_budget = bytes;
        self
    }

    /// Brownian bases have independent increments, so `m` drops out of m-free problems.
    pub fn independent_increments(&self) -> bool {
        matches!(self.kind, MartingaleKind::Brownian)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config(
                "martingale dimension must be positive".into(),
            ));
        }
        if self.initial.len() != self.dim {
            return Err(Error::Shape(format!(
                "initial value has length {}, expected {}",
                self.initial.len(),
                self.dim
            )));
        }
        if !(self.bracket_bound > T::zero()) {
            return Err(Error::Config("bracket bound Q must be positive".into()));
        }
        if let Some(s) = self.orthogonal_vol {
            if !s.is_finite() {
                return Err(Error::ModelDomain(
                    "orthogonal volatility is not finite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Bytes needed to hold a bundle of this model.
    pub fn bundle_bytes(&self, paths: usize, steps: usize) -> usize {
        let d = self.dim;
        let orth = if self.orthogonal_vol.is_some() { 2 } else { 0 };
        paths
            .saturating_mul(steps + 1)
            .saturating_mul(d + 2 * d * d + 1 + orth)
            .saturating_mul(std::mem::size_of::<T>())
    }

    #[inline]
    fn vol(&self, t: T, m: &[T], out: &mut [T]) {
        match &self.kind {
            MartingaleKind::Brownian => {
                let d = self.dim;
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = if i == j { T::one() } else { T::zero() };
                    }
                }
            }
            MartingaleKind::Diffusion(a) => a(t, m, out),
        }
    }
}

/// Discretized sample paths of `M` (and `N`), brackets, clock and density.
#[derive(Clone, Debug)]
pub struct PathBundle<T> {
    pub grid: TimeGrid<T>,
    pub seed: u64,
    /// Time index from which the paths move; before it `M` is frozen at its start value.
    pub start: usize,
    pub dim: usize,
    pub m: PathArray<T>,
    pub n_orth: Option<PathArray<T>>,
    pub bracket: PathArray<T>,
    pub bracket_nn: Option<PathArray<T>>,
    pub clock: PathArray<T>,
    pub q: PathArray<T>,
    pub independent_increments: bool,
}

impl<T: Real> PathBundle<T> {
    pub fn n_paths(&self) -> usize {
        self.m.paths()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn has_orthogonal(&self) -> bool {
        self.n_orth.is_some()
    }

    #[inline]
    pub fn dm(&self, p: usize, i: usize, out: &mut [T]) {
        let a = self.m.at(p, i);
        let b = self.m.at(p, i + 1);
        for k in 0..self.dim {
            out[k] = b[k] - a[k];
        }
    }

    #[inline]
    pub fn dbracket(&self, p: usize, i: usize, out: &mut [T]) {
        let a = self.bracket.at(p, i);
        let b = self.bracket.at(p, i + 1);
        for k in 0..self.dim * self.dim {
            out[k] = b[k] - a[k];
        }
    }

    #[inline]
    pub fn dclock(&self, p: usize, i: usize) -> T {
        self.clock.get(p, i + 1) - self.clock.get(p, i)
    }

    /// Clock `arctan(Σᵢ⟨Mⁱ,Mⁱ⟩)`, or the augmented clock including `⟨N,N⟩`.
    pub fn compute_clock(&self, augmented: bool) -> Result<PathArray<T>> {
        let nn = if augmented {
            Some(self.bracket_nn.as_ref().ok_or_else(|| {
                Error::Config("augmented clock requires the orthogonal component".into())
            })?)
        } else {
            None
        };
        clock_from_brackets(&self.bracket, self.dim, nn)
    }

    /// Sum of bracket diagonals, optionally including `⟨N,N⟩`, at `(p, i)`.
    #[inline]
    pub fn bracket_trace(&self, p: usize, i: usize, augmented: bool) -> T {
        let b = self.bracket.at(p, i);
        let mut s = T::zero();
        for k in 0..self.dim {
            s = s + b[k * self.dim + k];
        }
        if augmented {
            if let Some(nn) = &self.bracket_nn {
                s = s + nn.get(p, i);
            }
        }
        s
    }

    /// Columnar dump: `path,step,t,M_1..M_d,N,C,q_11..q_dd`, for the first `max_paths` paths.
    pub fn write_csv<W: Write>(&self, max_paths: usize, w: &mut W) -> io::Result<()> {
        let d = self.dim;
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend((1..=d).map(|k| format!("M_{k}")));
        header.push("N".into());
        header.push("C".into());
        for i in 1..=d {
            for j in 1..=d {
                header.push(format!("q_{i}{j}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for p in 0..self.n_paths().min(max_paths) {
            for i in 0..=self.n_steps() {
                write!(w, "{p},{i},{}", self.grid.t(i))?;
                for v in self.m.at(p, i) {
                    write!(w, ",{v}")?;
                }
                match &self.n_orth {
                    Some(n) => write!(w, ",{}", n.get(p, i))?,
                    None => write!(w, ",")?,
                }
                write!(w, ",{}", self.clock.get(p, i))?;
                for v in self.q.at(p, i) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// RNG words reserved per (path, step) block.
fn word_stride(draws: usize) -> u128 {
    64 * (1 + draws as u128 / 8)
}

const ORTHOGONAL_STREAM: u64 = 1 << 63;

fn normal<T: Real>(rng: &mut ChaCha8Rng) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z)
}

/// Paths from time 0 started at the model's initial value.
pub fn generate_paths<T: Real>(
    model: &MartingaleModel<T>,
    grid: &TimeGrid<T>,
    paths: usize,
    seed: u64,
) -> Result<PathBundle<T>> {
    generate_paths_from(model, grid, paths, seed, 0, &model.initial)
}

/// Paths that stay frozen at `m0` up to time index `start` and then follow the Euler scheme.
///
/// The noise of step `i` on path `p` depends only on `(seed, p, i)`, so restarts from any
/// index reuse exactly the increments of the full bundle.
pub fn generate_paths_from<T: Real>(
    model: &MartingaleModel<T>,
    grid: &TimeGrid<T>,
    paths: usize,
    seed: u64,
    start: usize,
    m0: &[T],
) -> Result<PathBundle<T>> {
    model.validate()?;
    if paths == 0 {
        return Err(Error::Config("path count must be at least 1".into()));
    }
    let steps = grid.n_steps();
    if start > steps {
        return Err(Error::Config(format!(
            "start index {start} beyond grid of {steps} steps"
        )));
    }
    let d = model.dim;
    if m0.len() != d {
        return Err(Error::Shape(format!(
            "start value has length {}, expected {d}",
            m0.len()
        )));
    }
    let required = model.bundle_bytes(paths, steps);
    if required > model.memory_budget {
        return Err(Error::Capacity {
            required,
            budget: model.memory_budget,
        });
    }
    let times = steps + 1;
    let mut m = PathArray::filled(paths, times, d, T::zero());
    let mut bracket = PathArray::filled(paths, times, d * d, T::zero());
    let stride = word_stride(d);
    let bound = model.bracket_bound;

    let results: Vec<Result<()>> = m
        .data_mut()
        .par_chunks_mut(CHUNK * times * d)
        .zip(bracket.data_mut().par_chunks_mut(CHUNK * times * d * d))
        .enumerate()
        .map(|(c, (mb, bb))| {
            let mut a = vec![T::zero(); d * d];
            let mut dw = vec![T::zero(); d];
            for k in 0..mb.len() / (times * d) {
                let p = c * CHUNK + k;
                let mp = &mut mb[k * times * d..(k + 1) * times * d];
                let bp = &mut bb[k * times * d * d..(k + 1) * times * d * d];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                mp[..d].copy_from_slice(m0);
                for i in 0..steps {
                    let t = grid.t(i);
                    let dt = grid.dt(i);
                    let (head, tail) = mp.split_at_mut((i + 1) * d);
                    let cur = &head[i * d..];
                    let next = &mut tail[..d];
                    model.vol(t, cur, &mut a);
                    if a.iter().any(|v| !v.is_finite()) {
                        return Err(Error::ModelDomain(format!(
                            "volatility not finite on path {p} at step {i}"
                        )));
                    }
                    if i >= start {
                        rng.set_word_pos(i as u128 * stride);
                        let sq = dt.sqrt();
                        for w in dw.iter_mut() {
                            *w = sq * normal::<T>(&mut rng);
                        }
                        for r in 0..d {
                            let mut s = T::zero();
                            for j in 0..d {
                                s = s + a[r * d + j] * dw[j];
                            }
                            next[r] = cur[r] + s;
                        }
                    } else {
                        next.copy_from_slice(cur);
                    }
                    if next.iter().any(|v| !v.is_finite()) {
                        return Err(Error::BlowUp {
                            path: p,
                            step: i + 1,
                        });
                    }
                    let (bh, bt) = bp.split_at_mut((i + 1) * d * d);
                    let bcur = &bh[i * d * d..];
                    let bnext = &mut bt[..d * d];
                    for r in 0..d {
                        for s in 0..d {
                            let mut acc = T::zero();
                            for j in 0..d {
                                acc = acc + a[r * d + j] * a[s * d + j];
                            }
                            bnext[r * d + s] = bcur[r * d + s] + acc * dt;
                        }
                    }
                    for r in 0..d {
                        if bnext[r * d + r] > bound {
                            return Err(Error::BracketBound {
                                bound: bound.f64(),
                                path: p,
                                step: i + 1,
                            });
                        }
                    }
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;

    let (n_orth, bracket_nn) = match model.orthogonal_vol {
        Some(s) => {
            let (n, nn) = generate_orthogonal(s, grid, paths, seed, start, bound)?;
            (Some(n), Some(nn))
        }
        None => (None, None),
    };

    let clock = clock_from_brackets(&bracket, d, None)?;
    let q = q_density(&bracket, &clock, d)?;
    Ok(PathBundle {
        grid: grid.clone(),
        seed,
        start,
        dim: d,
        m,
        n_orth,
        bracket,
        bracket_nn,
        clock,
        q,
        independent_increments: model.independent_increments(),
    })
}

fn generate_orthogonal<T: Real>(
    vol: T,
    grid: &TimeGrid<T>,
    paths: usize,
    seed: u64,
    start: usize,
    bound: T,
) -> Result<(PathArray<T>, PathArray<T>)> {
    let steps = grid.n_steps();
    let times = steps + 1;
    let mut n = PathArray::filled(paths, times, 1, T::zero());
    let mut nn = PathArray::filled(paths, times, 1, T::zero());
    let stride = word_stride(1);
    let results: Vec<Result<()>> = n
        .data_mut()
        .par_chunks_mut(CHUNK * times)
        .zip(nn.data_mut().par_chunks_mut(CHUNK * times))
        .enumerate()
        .map(|(c, (nb, bb))| {
            for k in 0..nb.len() / times {
                let p = c * CHUNK + k;
                let np = &mut nb[k * times..(k + 1) * times];
                let bp = &mut bb[k * times..(k + 1) * times];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ORTHOGONAL_STREAM | p as u64);
                for i in 0..steps {
                    let dt = grid.dt(i);
                    np[i + 1] = if i >= start {
                        rng.set_word_pos(i as u128 * stride);
                        np[i] + vol * dt.sqrt() * normal::<T>(&mut rng)
                    } else {
                        np[i]
                    };
                    bp[i + 1] = bp[i] + vol * vol * dt;
                    if bp[i + 1] > bound {
                        return Err(Error::BracketBound {
                            bound: bound.f64(),
                            path: p,
                            step: i + 1,
                        });
                    }
                }
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<()>>()?;
    Ok((n, nn))
}

/// `C = arctan(Σᵢ⟨Mⁱ,Mⁱ⟩ (+ ⟨N,N⟩))` per path and time.
pub fn clock_from_brackets<T: Real>(
    bracket: &PathArray<T>,
    d: usize,
    bracket_nn: Option<&PathArray<T>>,
) -> Result<PathArray<T>> {
    if bracket.width() != d * d {
        return Err(Error::Shape("bracket width must be d²".into()));
    }
    if let Some(nn) = bracket_nn {
        if nn.paths() != bracket.paths() || nn.times() != bracket.times() {
            return Err(Error::Shape(
                "orthogonal bracket shape differs from ⟨M,M⟩".into(),
            ));
        }
    }
    let times = bracket.times();
    let mut clock = PathArray::filled(bracket.paths(), times, 1, T::zero());
    parallel::for_each_block(clock.data_mut(), times, |range, block| {
        for (k, p) in range.enumerate() {
            for i in 0..times {
                let b = bracket.at(p, i);
                let mut s = T::zero();
                for r in 0..d {
                    s = s + b[r * d + r];
                }
                if let Some(nn) = bracket_nn {
                    s = s + nn.get(p, i);
                }
                block[k * times + i] = s.atan();
            }
        }
    });
    if clock.data().iter().any(|c| !c.is_finite()) {
        return Err(Error::ModelDomain("clock is not finite".into()));
    }
    Ok(clock)
}

/// Per step `q q* = Δ⟨M,M⟩ / ΔC` (symmetric square root), `q = 0` where `ΔC = 0`.
/// The last time index holds the value of the last step.
pub fn q_density<T: Real>(
    bracket: &PathArray<T>,
    clock: &PathArray<T>,
    d: usize,
) -> Result<PathArray<T>> {
    let times = bracket.times();
    let paths = bracket.paths();
    if clock.paths() != paths || clock.times() != times || bracket.width() != d * d {
        return Err(Error::Shape("bracket and clock shapes differ".into()));
    }
    let mut q = PathArray::filled(paths, times, d * d, T::zero());
    parallel::try_for_each_block(q.data_mut(), times * d * d, |range, block| {
        let mut db = vec![T::zero(); d * d];
        for (k, p) in range.enumerate() {
            let qp = &mut block[k * times * d * d..(k + 1) * times * d * d];
            for i in 0..times - 1 {
                let dc = clock.get(p, i + 1) - clock.get(p, i);
                let b0 = bracket.at(p, i);
                let b1 = bracket.at(p, i + 1);
                for r in 0..d * d {
                    db[r] = b1[r] - b0[r];
                }
                let out = &mut qp[i * d * d..(i + 1) * d * d];
                if dc > T::zero() {
                    if d == 1 {
                        out[0] = (db[0] / dc).max(T::zero()).sqrt();
                    } else {
                        for v in db.iter_mut() {
                            *v = *v / dc;
                        }
                        linalg::sym_sqrt(&db, d, out);
                    }
                } else if db.iter().any(|v| *v != T::zero()) {
                    return Err(Error::Inconsistent(format!(
                        "bracket moves while the clock is flat on path {p} at step {i}"
                    )));
                } else if dc < T::zero() {
                    return Err(Error::Inconsistent(format!(
                        "clock decreases on path {p} at step {i}"
                    )));
                }
            }
            if times >= 2 {
                let (head, tail) = qp.split_at_mut((times - 1) * d * d);
                tail.copy_from_slice(&head[(times - 2) * d * d..]);
            }
        }
        Ok(())
    })?;
    Ok(q)
}

/// Running sum of `ΔA·ΔB` per path.
pub fn discrete_covariation<T: Real>(a: &PathArray<T>, b: &PathArray<T>) -> Result<PathArray<T>> {
    if !a.same_shape(b) || a.width() != 1 {
        return Err(Error::Shape(format!(
            "covariation needs scalar paths on the same grid ({}x{}x{} vs {}x{}x{})",
            a.paths(),
            a.times(),
            a.width(),
            b.paths(),
            b.times(),
            b.width()
        )));
    }
    let times = a.times();
    let mut out = PathArray::filled(a.paths(), times, 1, T::zero());
    parallel::for_each_block(out.data_mut(), times, |range, block| {
        for (k, p) in range.enumerate() {
            let pa = a.path(p);
            let pb = b.path(p);
            let o = &mut block[k * times..(k + 1) * times];
            for i in 1..times {
                o[i] = o[i - 1] + (pa[i] - pa[i - 1]) * (pb[i] - pb[i - 1]);
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brownian_one_step_bracket_is_dt() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, 3, 9).unwrap();
        for p in 0..3 {
            assert_eq!(b.bracket.get(p, 1) - b.bracket.get(p, 0), 1.0);
        }
    }

    #[test]
    fn brownian_terminal_mean_is_zero() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let p = 100_000;
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, p, 1).unwrap();
        let mean = (0..p).map(|k| b.m.get(k, 4)).sum::<f64>() / p as f64;
        assert!(mean.abs() <= 3.0 / (p as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn identity_diffusion_reproduces_brownian() {
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let id: VolFn<f64> = Arc::new(|_, _, out: &mut [f64]| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        });
        let a = generate_paths(&MartingaleModel::brownian(2), &grid, 50, 3).unwrap();
        let b = generate_paths(&MartingaleModel::diffusion(2, id), &grid, 50, 3).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.bracket, b.bracket);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn clock_of_brownian_and_augmented_clock() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, 2, 0).unwrap();
        assert!((b.clock.get(0, 10) - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        let model = MartingaleModel::<f64>::brownian(1).with_orthogonal(1.0);
        let b = generate_paths(&model, &grid, 2, 0).unwrap();
        let aug = b.compute_clock(true).unwrap();
        assert!((aug.get(1, 10) - 2.0f64.atan()).abs() < 1e-15);
    }

    #[test]
    fn q_density_matches_clock_identity() {
        let grid = TimeGrid::uniform(1.0, 1000).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, 1, 0).unwrap();
        // q² = Δ⟨M⟩/ΔC ≈ 1 + ⟨M⟩² up to O(Δt²) from the finite ratio.
        let q0 = b.q.get(0, 0);
        assert!((q0 * q0 - 1.0).abs() < 1e-5);
        let q = b.q.get(0, 999);
        assert!((q * q - 2.0).abs() < 1e-2);
        let q = b.q.get(0, 1000);
        assert_eq!(q, b.q.get(0, 999));
    }

    #[test]
    fn zero_variation_gives_zero_clock_and_q() {
        let zero: VolFn<f64> = Arc::new(|_, _, out: &mut [f64]| out[0] = 0.0);
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let b = generate_paths(&MartingaleModel::diffusion(1, zero), &grid, 2, 0).unwrap();
        assert!(b.clock.data().iter().all(|&c| c == 0.0));
        assert!(b.q.data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn corrupted_bracket_is_inconsistent() {
        let bracket = PathArray::from_vec(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let clock = PathArray::from_vec(1, 2, 1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            q_density(&bracket, &clock, 1),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn restart_reuses_increments() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let model = MartingaleModel::<f64>::brownian(1);
        let full = generate_paths(&model, &grid, 4, 11).unwrap();
        let m3 = full.m.get(2, 3);
        let part = generate_paths_from(&model, &grid, 4, 11, 3, &[m3]).unwrap();
        for i in 3..=10 {
            assert!((part.m.get(2, i) - full.m.get(2, i)).abs() < 1e-14);
        }
        assert_eq!(part.bracket.get(2, 3), full.bracket.get(2, 3));
    }

    #[test]
    fn capacity_and_bound_errors() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let model = MartingaleModel::<f64>::brownian(1).with_memory_budget(1000);
        assert!(matches!(
            generate_paths(&model, &grid, 100, 0),
            Err(Error::Capacity { .. })
        ));
        let model = MartingaleModel::<f64>::brownian(1).with_bracket_bound(0.5);
        assert!(matches!(
            generate_paths(&model, &grid, 1, 0),
            Err(Error::BracketBound { step: 6, .. })
        ));
    }

    #[test]
    fn non_finite_volatility_is_a_model_error() {
        let bad: VolFn<f64> = Arc::new(|_, _, out: &mut [f64]| out[0] = f64::NAN);
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        assert!(matches!(
            generate_paths(&MartingaleModel::diffusion(1, bad), &grid, 1, 0),
            Err(Error::ModelDomain(_))
        ));
    }

    #[test]
    fn realized_variance_of_brownian() {
        let grid = TimeGrid::uniform(1.0, 10_000).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(1), &grid, 200, 5).unwrap();
        let m = b.m.component(0);
        let rv = discrete_covariation(&m, &m).unwrap();
        let inside = (0..200)
            .filter(|&p| (rv.get(p, 10_000) - 1.0).abs() <= 0.05)
            .count();
        assert!(inside as f64 >= 0.95 * 200.0, "{inside}");
    }

    #[test]
    fn covariation_shape_mismatch() {
        let a = PathArray::filled(1, 3, 1, 0.0f64);
        let b = PathArray::filled(1, 4, 1, 0.0f64);
        assert!(matches!(discrete_covariation(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn csv_dump_header() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let b = generate_paths(&MartingaleModel::<f64>::brownian(2), &grid, 1, 0).unwrap();
        let mut buf = Vec::new();
        b.write_csv(1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "path,step,t,M_1,M_2,N,C,q_11,q_12,q_21,q_22"
        );
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn single_precision_paths() {
        let grid = TimeGrid::<f32>::uniform(1.0, 8).unwrap();
        let b = generate_paths(&MartingaleModel::<f32>::brownian(1), &grid, 10, 2).unwrap();
        assert!((b.bracket.get(0, 8) - 1.0).abs() < 1e-6);
    }
}
