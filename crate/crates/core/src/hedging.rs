//! Exponential-utility indifference pricing of a claim `F(R_T)` on a non-tradable risk
//! process `R`, the delta hedge built from the price partials, and a pathwise backtest.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::bsde::{mean_and_stderr, Driver, DriverArgs, DriverMeta, TerminalCondition};
use crate::error::{Error, Result};
use crate::forward::{simulate_forward, CoefFn, ForwardSolution, SdeCoefficients, StartPoint};
use crate::linalg::invert;
use crate::markov::{paired, MarkovProblem, Partials, SolveMethod};
use crate::martingale::{MartingaleModel, PathBundle, TimeGrid};
use crate::real::Real;

/// Risk process `dR = σ dM + b dC`, assets `dS = S(β dM + α dC)`, risk aversion `κ` and the
/// bounded claim `F(R_T)`.
#[derive(Clone)]
pub struct MarketSpec<T: Real> {
    pub risk: SdeCoefficients<T>,
    /// `β(t, r, m)`, `k × d` row-major.
    pub beta: CoefFn<T>,
    /// `α(t, r, m)`, length `k`.
    pub alpha: CoefFn<T>,
    pub k: usize,
    pub kappa: T,
    pub payoff: TerminalCondition<T>,
    /// `β` and `α` do not depend on `m`.
    pub asset_m_free: bool,
    /// Bound for `⟨θ, θ⟩_{qq*}`, used only as growth metadata.
    pub premium_bound: T,
}

impl<T: Real> fmt::Debug for MarketSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketSpec")
            .field("risk", &self.risk)
            .field("k", &self.k)
            .field("kappa", &self.kappa)
            .field("payoff_bound", &self.payoff.bound)
            .field("asset_m_free", &self.asset_m_free)
            .finish()
    }
}

/// Largest martingale dimension a market may use; keeps the driver allocation free.
pub const MAX_MARKET_DIM: usize = 8;

const SQ: usize = MAX_MARKET_DIM * MAX_MARKET_DIM;

/// `θ`-geometry at one state: `a = q*θ` and the projector `Π` onto the range of `q*β*`.
struct Geometry<T> {
    a: [T; MAX_MARKET_DIM],
    proj: [T; SQ],
}

fn geometry<T: Real>(beta: &[T], alpha: &[T], q: &[T], k: usize, d: usize) -> Option<Geometry<T>> {
    // B = q* β*, d × k.
    let mut b = [T::zero(); SQ];
    for j in 0..d {
        for i in 0..k {
            let mut s = T::zero();
            for l in 0..d {
                s = s + q[l * d + j] * beta[i * d + l];
            }
            b[j * k + i] = s;
        }
    }
    // A = B* B = β q q* β*, k × k.
    let mut a = [T::zero(); SQ];
    for i in 0..k {
        for i2 in 0..k {
            a[i * k + i2] = (0..d).fold(T::zero(), |s, j| s + b[j * k + i] * b[j * k + i2]);
        }
    }
    let mut inv = [T::zero(); SQ];
    if !invert(&a[..k * k], k, &mut inv[..k * k]) || inv[..k * k].iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut c = [T::zero(); MAX_MARKET_DIM];
    for i in 0..k {
        c[i] = (0..k).fold(T::zero(), |s, l| s + inv[i * k + l] * alpha[l]);
    }
    let mut g = Geometry {
        a: [T::zero(); MAX_MARKET_DIM],
        proj: [T::zero(); SQ],
    };
    for j in 0..d {
        g.a[j] = (0..k).fold(T::zero(), |s, i| s + b[j * k + i] * c[i]);
        for j2 in 0..d {
            let mut s = T::zero();
            for i in 0..k {
                for l in 0..k {
                    s = s + b[j * k + i] * inv[i * k + l] * b[j2 * k + l];
                }
            }
            g.proj[j * d + j2] = s;
        }
    }
    Some(g)
}

impl<T: Real> MarketSpec<T> {
    pub fn d(&self) -> usize {
        self.risk.d
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if d > MAX_MARKET_DIM {
            return Err(Error::Config(format!(
                "markets support d ≤ {MAX_MARKET_DIM}, got {d}"
            )));
        }
        if self.k == 0 || self.k > d {
            return Err(Error::Config(format!(
                "need 1 ≤ k ≤ d, got k = {} with d = {d}",
                self.k
            )));
        }
        if !(self.kappa > T::zero()) || !self.kappa.is_finite() {
            return Err(Error::Config(format!(
                "risk aversion must be positive, got {}",
                self.kappa
            )));
        }
        if !self.payoff.bound.is_finite() {
            return Err(Error::Config("the claim must be bounded".into()));
        }
        Ok(())
    }

    fn coefficients(&self, t: T, r: &[T], m: &[T]) -> (Vec<T>, Vec<T>) {
        let mut beta = vec![T::zero(); self.k * self.d()];
        let mut alpha = vec![T::zero(); self.k];
        (self.beta)(t, r, m, &mut beta);
        (self.alpha)(t, r, m, &mut alpha);
        (beta, alpha)
    }

    /// Market price of risk `θ = β*(β q q* β*)⁻¹ α`.
    pub fn theta(&self, t: T, r: &[T], m: &[T], q: &[T]) -> Result<Vec<T>> {
        let (d, k) = (self.d(), self.k);
        let (beta, alpha) = self.coefficients(t, r, m);
        let mut bqq = vec![T::zero(); k * k];
        let mut qq = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                qq[i * d + j] = (0..d).fold(T::zero(), |s, l| s + q[i * d + l] * q[j * d + l]);
            }
        }
        for i in 0..k {
            for i2 in 0..k {
                let mut s = T::zero();
                for a in 0..d {
                    for b in 0..d {
                        s = s + beta[i * d + a] * qq[a * d + b] * beta[i2 * d + b];
                    }
                }
                bqq[i * k + i2] = s;
            }
        }
        let mut inv = vec![T::zero(); k * k];
        if !invert(&bqq, k, &mut inv) {
            return Err(degenerate(t, r));
        }
        let c: Vec<T> = (0..k)
            .map(|i| (0..k).fold(T::zero(), |s, l| s + inv[i * k + l] * alpha[l]))
            .collect();
        Ok((0..d)
            .map(|j| (0..k).fold(T::zero(), |s, i| s + beta[i * d + j] * c[i]))
            .collect())
    }

    /// Checks that `β q q* β*` is invertible at every simulated state from the start index.
    pub fn check_states(&self, bundle: &PathBundle<T>, forward: &ForwardSolution<T>) -> Result<()> {
        let d = bundle.dim;
        let mut m = vec![T::zero(); d];
        for p in 0..bundle.n_paths() {
            for i in forward.start.index..bundle.n_steps() {
                forward.m_at(bundle, p, i, &mut m);
                let t = bundle.grid.t(i);
                let r = forward.x.at(p, i);
                let mut beta = [T::zero(); SQ];
                let mut alpha = [T::zero(); MAX_MARKET_DIM];
                (self.beta)(t, r, &m, &mut beta[..self.k * d]);
                (self.alpha)(t, r, &m, &mut alpha[..self.k]);
                if geometry(&beta, &alpha, bundle.q.at(p, i), self.k, d).is_none() {
                    return Err(Error::MarketDegenerate(format!(
                        "β q q* β* is singular on path {p} at step {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn degenerate<T: Real>(t: T, r: &[T]) -> Error {
    Error::MarketDegenerate(format!("β q q* β* is singular at t = {t}, r = {r:?}"))
}

/// The unconstrained exponential-utility driver
/// `f = −⟨z, θ⟩_{qq*} − ⟨θ, θ⟩_{qq*}/(2κ) + (κ/2)|Π⊥ z q|²`, where `Π⊥` projects onto the
/// directions of `M` that no asset spans. The last term vanishes when `k = d`.
pub fn build_utility_driver<T: Real>(market: &MarketSpec<T>) -> Result<Driver<T>> {
    market.validate()?;
    let (d, k, kappa) = (market.d(), market.k, market.kappa);
    let beta_fn = market.beta.clone();
    let alpha_fn = market.alpha.clone();
    let half = T::lit(0.5);
    let f = Arc::new(move |a: &DriverArgs<T>| {
        let mut beta = [T::zero(); SQ];
        let mut alpha = [T::zero(); MAX_MARKET_DIM];
        beta_fn(a.t, a.x, a.m, &mut beta[..k * d]);
        alpha_fn(a.t, a.x, a.m, &mut alpha[..k]);
        let Some(g) = geometry(&beta, &alpha, a.q, k, d) else {
            return T::nan();
        };
        let w = a.zq;
        let wa = w
            .iter()
            .zip(&g.a[..d])
            .fold(T::zero(), |s, (x, y)| s + *x * *y);
        let aa = g.a[..d].iter().fold(T::zero(), |s, x| s + *x * *x);
        let mut perp = T::zero();
        for j in 0..d {
            let pw = (0..d).fold(T::zero(), |s, l| s + g.proj[j * d + l] * w[l]);
            perp = perp + (w[j] - pw) * (w[j] - pw);
        }
        -wa - half * aa / kappa + half * kappa * perp
    });
    Ok(Driver::new(
        f,
        DriverMeta {
            gamma: kappa,
            kappa,
            a: half * market.premium_bound / kappa,
            lipschitz: k == d,
            m_free: market.asset_m_free,
            ..DriverMeta::default()
        },
    ))
}

/// Noise and solver settings shared by the claim and no-claim solves.
#[derive(Clone, Debug)]
pub struct PricingSetup<T: Real> {
    pub model: MartingaleModel<T>,
    pub grid: TimeGrid<T>,
    pub paths: usize,
    pub seed: u64,
    pub method: SolveMethod,
}

/// Claim and no-claim problems on common random numbers.
fn problems<T: Real>(
    market: &MarketSpec<T>,
    setup: &PricingSetup<T>,
) -> Result<(MarkovProblem<T>, MarkovProblem<T>)> {
    if setup.model.dim != market.d() {
        return Err(Error::Config(format!(
            "market uses d = {} but the martingale has dimension {}",
            market.d(),
            setup.model.dim
        )));
    }
    let driver = build_utility_driver(market)?;
    let with = MarkovProblem {
        model: setup.model.clone(),
        grid: setup.grid.clone(),
        coeffs: market.risk.clone(),
        driver,
        terminal: market.payoff.clone(),
        paths: setup.paths,
        seed: setup.seed,
        method: setup.method,
    };
    let without = MarkovProblem {
        terminal: TerminalCondition::constant(T::zero()),
        ..with.clone()
    };
    Ok((with, without))
}

/// Per-path start targets of `Y^F − Y^0` on one bundle.
fn price_targets<T: Real>(
    market: &MarketSpec<T>,
    pair: &(MarkovProblem<T>, MarkovProblem<T>),
    bundle: &PathBundle<T>,
    index: usize,
    r: &[T],
    m: &[T],
) -> Result<Vec<T>> {
    let fw = simulate_forward(
        &market.risk,
        bundle,
        &StartPoint::new(index, r.to_vec(), m.to_vec()),
    )?;
    market.check_states(bundle, &fw)?;
    let a = pair.0.solve_forward(bundle, &fw)?;
    let b = pair.1.solve_forward(bundle, &fw)?;
    Ok(a.start_targets
        .iter()
        .zip(&b.start_targets)
        .map(|(x, y)| *x - *y)
        .collect())
}

/// Indifference price `p = Y^F − Y^0` at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceEstimate<T> {
    pub price: T,
    pub stderr: T,
}

fn at<T: Real>(t: T, r: &[T], m: &[T], e: Error) -> Error {
    crate::markov::at_node(t, r, m, e)
}

pub fn indifference_price<T: Real>(
    market: &MarketSpec<T>,
    setup: &PricingSetup<T>,
    t: T,
    r: &[T],
    m: &[T],
) -> Result<PriceEstimate<T>> {
    let run = || {
        let pair = problems(market, setup)?;
        let index = pair.0.index_of(t)?;
        let bundle = pair.0.bundle_at(index, m)?;
        let targets = price_targets(market, &pair, &bundle, index, r, m)?;
        let (price, stderr) = mean_and_stderr(&targets);
        Ok(PriceEstimate { price, stderr })
    };
    run().map_err(|e| at(t, r, m, e))
}

/// Central differences of `p` in `r` and `m`; every bump reuses the node's noise for both
/// the claim and the no-claim solve.
pub fn price_partials<T: Real>(
    market: &MarketSpec<T>,
    setup: &PricingSetup<T>,
    t: T,
    r: &[T],
    m: &[T],
    h: T,
) -> Result<Partials<T>> {
    let run = || {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::Config(format!(
                "bump size must be positive, got {h}"
            )));
        }
        let pair = problems(market, setup)?;
        let index = pair.0.index_of(t)?;
        let bundle = pair.0.bundle_at(index, m)?;
        let mut out = Partials {
            d2u: Vec::new(),
            d2u_stderr: Vec::new(),
            d3u: Vec::new(),
            d3u_stderr: Vec::new(),
            h,
            warnings: Vec::new(),
        };
        for j in 0..r.len() {
            let (mut rp, mut rm) = (r.to_vec(), r.to_vec());
            rp[j] = rp[j] + h;
            rm[j] = rm[j] - h;
            let up = price_targets(market, &pair, &bundle, index, &rp, m)?;
            let dn = price_targets(market, &pair, &bundle, index, &rm, m)?;
            let (v, s) = paired(&up, &dn, h);
            out.d2u.push(v);
            out.d2u_stderr.push(s);
        }
        let shared = setup.model.independent_increments();
        for c in 0..m.len() {
            let (mut mp, mut mm) = (m.to_vec(), m.to_vec());
            mp[c] = mp[c] + h;
            mm[c] = mm[c] - h;
            let (up, dn) = if shared {
                (
                    price_targets(market, &pair, &bundle, index, r, &mp)?,
                    price_targets(market, &pair, &bundle, index, r, &mm)?,
                )
            } else {
                let bp = pair.0.bundle_at(index, &mp)?;
                let bm = pair.0.bundle_at(index, &mm)?;
                (
                    price_targets(market, &pair, &bp, index, r, &mp)?,
                    price_targets(market, &pair, &bm, index, r, &mm)?,
                )
            };
            let (v, s) = paired(&up, &dn, h);
            out.d3u.push(v);
            out.d3u_stderr.push(s);
        }
        Ok(out)
    };
    run().map_err(|e| at(t, r, m, e))
}

/// True when the reduced delta (no `∂ₘp` term) applies: independent increments and
/// coefficients free of `m`.
pub fn reduced_form<T: Real>(market: &MarketSpec<T>, model: &MartingaleModel<T>) -> bool {
    model.independent_increments() && market.risk.m_free && market.asset_m_free
}

/// `Δ = [∂ᵣp σ + ∂ₘp] q* β*(ββ*)⁻¹`; the `∂ₘp` term is dropped in the reduced form.
#[allow(clippy::too_many_arguments)]
pub fn delta_hedge<T: Real>(
    market: &MarketSpec<T>,
    model: &MartingaleModel<T>,
    t: T,
    r: &[T],
    m: &[T],
    q: &[T],
    d2p: &[T],
    d3p: &[T],
) -> Result<Vec<T>> {
    let (n, d, k) = (market.risk.n, market.d(), market.k);
    if r.len() != n || d2p.len() != n || q.len() != d * d {
        return Err(Error::Shape(
            "delta inputs do not match the market dimensions".into(),
        ));
    }
    let reduced = reduced_form(market, model);
    if !reduced && d3p.len() != d {
        return Err(Error::Shape(format!(
            "need {d} m-partials, got {}",
            d3p.len()
        )));
    }
    let mut sigma = vec![T::zero(); n * d];
    (market.risk.sigma)(t, r, m, &mut sigma);
    let mut v: Vec<T> = (0..d)
        .map(|c| (0..n).fold(T::zero(), |s, j| s + d2p[j] * sigma[j * d + c]))
        .collect();
    if !reduced {
        for (a, b) in v.iter_mut().zip(d3p) {
            *a = *a + *b;
        }
    }
    // v q*
    let vq: Vec<T> = (0..d)
        .map(|j| (0..d).fold(T::zero(), |s, l| s + v[l] * q[j * d + l]))
        .collect();
    let (beta, _) = market.coefficients(t, r, m);
    // (v q*) β*
    let w: Vec<T> = (0..k)
        .map(|i| (0..d).fold(T::zero(), |s, j| s + vq[j] * beta[i * d + j]))
        .collect();
    let mut bb = vec![T::zero(); k * k];
    for i in 0..k {
        for l in 0..k {
            bb[i * k + l] = (0..d).fold(T::zero(), |s, j| s + beta[i * d + j] * beta[l * d + j]);
        }
    }
    let mut inv = vec![T::zero(); k * k];
    if !invert(&bb, k, &mut inv) {
        return Err(Error::MarketDegenerate(format!(
            "β β* is singular at t = {t}, r = {r:?}"
        )));
    }
    Ok((0..k)
        .map(|l| (0..k).fold(T::zero(), |s, i| s + w[i] * inv[i * k + l]))
        .collect())
}

/// Prices on a `t × r` grid for scalar `R` with `M` started at the model's initial value,
/// with `∂ᵣp` from central differences (one-sided at the ends). Only meaningful in the
/// reduced form, where `p` does not depend on `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceGrid<T> {
    pub times: Vec<T>,
    pub rs: Vec<T>,
    pub m: Vec<T>,
    /// Row-major `[t][r]`.
    pub price: Vec<T>,
    pub stderr: Vec<T>,
    pub d2p: Vec<T>,
}

impl<T: Real> PriceGrid<T> {
    /// Bilinear `∂ᵣp`, held constant outside the grid.
    pub fn d2p_at(&self, t: T, r: T) -> T {
        let (a0, a1, wa) = locate(&self.times, t);
        let (b0, b1, wb) = locate(&self.rs, r);
        let nr = self.rs.len();
        let g = |a: usize, b: usize| self.d2p[a * nr + b];
        let lo = g(a0, b0) * (T::one() - wb) + g(a0, b1) * wb;
        let hi = g(a1, b0) * (T::one() - wb) + g(a1, b1) * wb;
        lo * (T::one() - wa) + hi * wa
    }
}

fn locate<T: Real>(axis: &[T], v: T) -> (usize, usize, T) {
    let n = axis.len();
    if n == 1 || v <= axis[0] {
        return (0, 0, T::zero());
    }
    if v >= axis[n - 1] {
        return (n - 1, n - 1, T::zero());
    }
    let k = axis.partition_point(|a| *a <= v).clamp(1, n - 1);
    (k - 1, k, (v - axis[k - 1]) / (axis[k] - axis[k - 1]))
}

pub fn price_grid<T: Real>(
    market: &MarketSpec<T>,
    setup: &PricingSetup<T>,
    times: &[T],
    rs: &[T],
) -> Result<PriceGrid<T>> {
    if market.risk.n != 1 {
        return Err(Error::Config(
            "price grids need a scalar risk process".into(),
        ));
    }
    if !reduced_form(market, &setup.model) {
        return Err(Error::Config(
            "price grids drop the m-dependence and need independent increments with m-free coefficients".into(),
        ));
    }
    let increasing = |a: &[T]| !a.is_empty() && a.windows(2).all(|w| w[0] < w[1]);
    if !increasing(times) || rs.len() < 2 || !increasing(rs) {
        return Err(Error::Config(
            "price grid axes must be increasing, with at least two r values".into(),
        ));
    }
    let pair = problems(market, setup)?;
    let m0 = setup.model.initial.clone();
    let nr = rs.len();
    let mut price = Vec::with_capacity(times.len() * nr);
    let mut stderr = Vec::with_capacity(times.len() * nr);
    for &t in times {
        let index = pair.0.index_of(t)?;
        let bundle = pair.0.bundle_at(index, &m0)?;
        for &r in rs {
            let targets = price_targets(market, &pair, &bundle, index, &[r], &m0)
                .map_err(|e| at(t, &[r], &m0, e))?;
            let (p, s) = mean_and_stderr(&targets);
            price.push(p);
            stderr.push(s);
        }
    }
    let mut d2p = vec![T::zero(); price.len()];
    for a in 0..times.len() {
        for b in 0..nr {
            let (lo, hi) = (b.saturating_sub(1), (b + 1).min(nr - 1));
            d2p[a * nr + b] = (price[a * nr + hi] - price[a * nr + lo]) / (rs[hi] - rs[lo]);
        }
    }
    Ok(PriceGrid {
        times: times.to_vec(),
        rs: rs.to_vec(),
        m: m0,
        price,
        stderr,
        d2p,
    })
}

/// State handed to a hedging policy at step `i` of path `p`.
#[derive(Clone, Copy, Debug)]
pub struct HedgeState<'a, T> {
    pub path: usize,
    pub step: usize,
    pub t: T,
    pub r: &'a [T],
    pub m: &'a [T],
    pub q: &'a [T],
}

/// One priced node of a hedge report.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgeRow {
    pub t: f64,
    pub r: f64,
    pub m: f64,
    pub price: f64,
    pub delta: Vec<f64>,
}

/// Backtest P&L of the hedged and the unhedged short position, plus priced nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct HedgeReport {
    pub rows: Vec<HedgeRow>,
    pub pnl: Vec<f64>,
    pub pnl_unhedged: Vec<f64>,
    pub pnl_mean: f64,
    pub pnl_var_hedged: f64,
    pub pnl_var_unhedged: f64,
    /// `−(1/κ) log E[e^{−κ W}]` of hedged terminal wealth.
    pub certainty_equivalent: f64,
    pub certainty_equivalent_unhedged: f64,
}

impl HedgeReport {
    pub fn write_csv<W: Write>(&self, w: &mut W, k: usize) -> io::Result<()> {
        write!(w, "t,r,m,price")?;
        for j in 1..=k {
            write!(w, ",delta_{j}")?;
        }
        writeln!(w, ",pnl_mean,pnl_var_hedged,pnl_var_unhedged")?;
        for row in &self.rows {
            write!(w, "{},{},{},{}", row.t, row.r, row.m, row.price)?;
            for j in 0..k {
                write!(w, ",{}", row.delta.get(j).copied().unwrap_or(f64::NAN))?;
            }
            writeln!(
                w,
                ",{},{},{}",
                self.pnl_mean, self.pnl_var_hedged, self.pnl_var_unhedged
            )?;
        }
        Ok(())
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn certainty_equivalent(w: &[f64], kappa: f64) -> f64 {
    let e: Vec<f64> = w.iter().map(|x| -kappa * x).collect();
    let top = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + (e.iter().map(|v| (v - top).exp()).sum::<f64>() / w.len() as f64).ln();
    -lse / kappa
}

/// Terminal wealth `x + Σ λ·ΔS/S − F(R_T)` of a seller following `policy`, against the
/// zero hedge `x − F(R_T)`. Returns use the Euler increments `β ΔM + α ΔC`.
pub fn hedge_backtest<T: Real, P>(
    market: &MarketSpec<T>,
    policy: P,
    bundle: &PathBundle<T>,
    start: &StartPoint<T>,
    x: T,
) -> Result<HedgeReport>
where
    P: Fn(&HedgeState<'_, T>) -> Vec<T> + Sync,
{
    market.validate()?;
    let fw = simulate_forward(&market.risk, bundle, start)?;
    let claim = market.payoff.evaluate(bundle, &fw)?;
    let (d, k) = (bundle.dim, market.k);
    let gains: Vec<f64> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut m = vec![T::zero(); d];
            let mut dm = vec![T::zero(); d];
            let mut gain = 0.0;
            for i in start.index..bundle.n_steps() {
                let t = bundle.grid.t(i);
                fw.m_at(bundle, p, i, &mut m);
                let r = fw.x.at(p, i);
                let lambda = policy(&HedgeState {
                    path: p,
                    step: i,
                    t,
                    r,
                    m: &m,
                    q: bundle.q.at(p, i),
                });
                let (beta, alpha) = market.coefficients(t, r, &m);
                bundle.dm(p, i, &mut dm);
                let dc = bundle.dclock(p, i);
                for a in 0..k {
                    let ret = (0..d).fold(alpha[a] * dc, |s, j| s + beta[a * d + j] * dm[j]);
                    gain += (lambda[a] * ret).f64();
                }
            }
            gain
        })
        .collect();
    let x = x.f64();
    let pnl: Vec<f64> = gains
        .iter()
        .zip(&claim)
        .map(|(g, f)| x + g - f.f64())
        .collect();
    let pnl_unhedged: Vec<f64> = claim.iter().map(|f| x - f.f64()).collect();
    let (pnl_mean, pnl_var_hedged) = mean_var(&pnl);
    let (_, pnl_var_unhedged) = mean_var(&pnl_unhedged);
    let kappa = market.kappa.f64();
    Ok(HedgeReport {
        rows: Vec::new(),
        certainty_equivalent: certainty_equivalent(&pnl, kappa),
        certainty_equivalent_unhedged: certainty_equivalent(&pnl_unhedged, kappa),
        pnl,
        pnl_unhedged,
        pnl_mean,
        pnl_var_hedged,
        pnl_var_unhedged,
    })
}
