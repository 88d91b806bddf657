//! Translation of named presets into solver objects.

use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use qfbsde::bsde::{PicardOptions, QuadraticMode, QuadraticOptions};
use qfbsde::forward::CoefFn;
use qfbsde::hedging::{build_utility_driver, PricingSetup};
use qfbsde::markov::{appendix_a3_coefficients, appendix_a3_terminal, SolveMethod};
use qfbsde::regression::RegressionBasis;
use qfbsde::{
    Driver, MarketSpec, MarkovProblem, MartingaleModel, SdeCoefficients, TerminalCondition,
    TimeGrid,
};

use crate::config::{
    DriverConfig, ExperimentConfig, ForwardConfig, MarketConfig, MartingaleConfig,
    MartingaleKindConfig, MethodConfig, ModeConfig, SolverConfig, TerminalConfig, VolPreset,
};

/// Everything a run needs, built from a config.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: MartingaleModel,
    pub grid: TimeGrid,
    pub coeffs: SdeCoefficients,
    pub driver: Driver,
    pub terminal: TerminalCondition,
    pub method: SolveMethod,
    pub market: Option<MarketSpec>,
    pub paths: usize,
    pub seed: u64,
    pub start_index: usize,
    pub x0: Vec<f64>,
    pub m0: Vec<f64>,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let model = build_model(&cfg.martingale)?;
        let grid = build_grid(cfg)?;
        let d = model.dim;
        let coeffs = build_forward(&cfg.forward, d, grid.horizon())?;
        let terminal = build_terminal(&cfg.terminal);
        let market = cfg
            .market
            .as_ref()
            .map(|m| build_market(m, &coeffs, &terminal))
            .transpose()?;
        let driver = match &cfg.driver {
            DriverConfig::Zero => Driver::zero(),
            DriverConfig::Linear { r, mu } => {
                ensure!(
                    mu.len() == d,
                    "driver mu has {} entries, expected {d}",
                    mu.len()
                );
                Driver::linear(*r, mu.clone())
            }
            DriverConfig::Entropic { gamma } => Driver::entropic(*gamma),
            DriverConfig::UtilityMarket => {
                let market = market
                    .as_ref()
                    .context("the utility-market driver needs a [market] block")?;
                build_utility_driver(market)?
            }
        };
        let method = build_method(&cfg.solver);
        let start_index = grid
            .index_of(cfg.start.t)
            .with_context(|| format!("start time {} is not a grid point", cfg.start.t))?;
        let m0 = cfg.start.m.clone().unwrap_or_else(|| model.initial.clone());
        ensure!(
            m0.len() == d,
            "start m has {} entries, expected {d}",
            m0.len()
        );
        let x0 = cfg.start.x.clone().unwrap_or_else(|| vec![0.0; coeffs.n]);
        ensure!(
            x0.len() == coeffs.n,
            "start x has {} entries, expected {}",
            x0.len(),
            coeffs.n
        );
        Ok(Self {
            model,
            grid,
            coeffs,
            driver,
            terminal,
            method,
            market,
            paths: cfg.grid.paths,
            seed: cfg.seed,
            start_index,
            x0,
            m0,
        })
    }

    /// Restartable problem with the scenario's defaults.
    pub fn problem(&self) -> MarkovProblem {
        MarkovProblem {
            model: self.model.clone(),
            grid: self.grid.clone(),
            coeffs: self.coeffs.clone(),
            driver: self.driver.clone(),
            terminal: self.terminal.clone(),
            paths: self.paths,
            seed: self.seed,
            method: self.method,
        }
    }

    pub fn pricing(&self, paths: usize) -> PricingSetup<f64> {
        PricingSetup {
            model: self.model.clone(),
            grid: self.grid.clone(),
            paths,
            seed: self.seed,
            method: self.method,
        }
    }
}

pub fn build_grid(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    Ok(match &cfg.grid.points {
        Some(points) => TimeGrid::from_points(points.clone())?,
        None => TimeGrid::uniform(cfg.grid.horizon, cfg.grid.steps)?,
    })
}

pub fn build_model(cfg: &MartingaleConfig) -> Result<MartingaleModel> {
    let d = cfg.dim;
    ensure!(d >= 1, "martingale dimension must be at least 1");
    let mut model = match cfg.kind {
        MartingaleKindConfig::Brownian => {
            ensure!(
                cfg.vol.is_none(),
                "a Brownian martingale takes no vol preset"
            );
            MartingaleModel::brownian(d)
        }
        MartingaleKindConfig::Diffusion => {
            let vol = cfg
                .vol
                .as_ref()
                .context("a diffusion martingale needs a vol preset")?;
            let f: qfbsde::martingale::VolFn<f64> = match *vol {
                VolPreset::Constant { value } => Arc::new(move |_, _, out: &mut [f64]| {
                    out.fill(0.0);
                    for k in 0..d {
                        out[k * d + k] = value;
                    }
                }),
                VolPreset::SqrtOnePlusSquare => Arc::new(move |_, m: &[f64], out: &mut [f64]| {
                    out.fill(0.0);
                    for k in 0..d {
                        out[k * d + k] = (1.0 + m[k] * m[k]).sqrt();
                    }
                }),
            };
            MartingaleModel::diffusion(d, f)
        }
    };
    if let Some(m) = &cfg.initial {
        ensure!(
            m.len() == d,
            "initial value has {} entries, expected {d}",
            m.len()
        );
        model = model.with_initial(m.clone());
    }
    if let Some(v) = cfg.orthogonal_vol {
        model = model.with_orthogonal(v);
    }
    if let Some(q) = cfg.bracket_bound {
        model = model.with_bracket_bound(q);
    }
    if let Some(mb) = cfg.memory_budget_mb {
        model = model.with_memory_budget(mb.saturating_mul(1 << 20));
    }
    model.validate()?;
    Ok(model)
}

pub fn build_forward(cfg: &ForwardConfig, d: usize, horizon: f64) -> Result<SdeCoefficients> {
    Ok(match cfg {
        ForwardConfig::Identity => {
            let mut sigma = vec![0.0; d * d];
            for k in 0..d {
                sigma[k * d + k] = 1.0;
            }
            SdeCoefficients::constant(d, d, sigma, vec![0.0; d]).with_lipschitz(0.0)
        }
        ForwardConfig::Constant { n, sigma, drift } => {
            ensure!(*n >= 1, "forward dimension must be at least 1");
            ensure!(
                sigma.len() == n * d,
                "sigma has {} entries, expected {}",
                sigma.len(),
                n * d
            );
            ensure!(
                drift.len() == *n,
                "drift has {} entries, expected {n}",
                drift.len()
            );
            SdeCoefficients::constant(*n, d, sigma.clone(), drift.clone()).with_lipschitz(0.0)
        }
        ForwardConfig::Linear { s, c } => {
            ensure!(d == 1, "the linear preset is scalar (martingale dim 1)");
            SdeCoefficients::linear(*s, *c)
        }
        ForwardConfig::Switching => {
            ensure!(d == 1, "the switching preset is scalar (martingale dim 1)");
            appendix_a3_coefficients(horizon)
        }
        ForwardConfig::SmoothNonlinear { s } => {
            ensure!(
                d == 1,
                "the smooth_nonlinear preset is scalar (martingale dim 1)"
            );
            let s = *s;
            let sigma: CoefFn<f64> =
                Arc::new(move |_, x, _, out: &mut [f64]| out[0] = s * (1.0 + 0.5 * x[0].sin()));
            let dsx: CoefFn<f64> =
                Arc::new(move |_, x, _, out: &mut [f64]| out[0] = 0.5 * s * x[0].cos());
            let zero: CoefFn<f64> = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
            SdeCoefficients::new(1, 1, sigma, zero.clone())
                .with_partials(dsx, zero.clone(), zero.clone(), zero)
                .with_lipschitz(0.5 * s.abs())
                .m_free(true)
        }
    })
}

pub fn build_terminal(cfg: &TerminalConfig) -> TerminalCondition {
    match *cfg {
        TerminalConfig::Constant { value } => TerminalCondition::constant(value),
        TerminalConfig::Identity => {
            TerminalCondition::new(Arc::new(|x: &[f64], _: &[f64]| x[0]), f64::INFINITY).with_grad(
                Arc::new(|_: &[f64], _: &[f64], gx: &mut [f64], gm: &mut [f64]| {
                    gx.fill(0.0);
                    gx[0] = 1.0;
                    gm.fill(0.0);
                }),
            )
        }
        TerminalConfig::ClippedIdentity { lo, hi } => TerminalCondition::clipped_identity(lo, hi),
        TerminalConfig::SmoothClip { level } => TerminalCondition::smooth_clip(level),
        TerminalConfig::Log1p => appendix_a3_terminal(),
        TerminalConfig::CappedCall { strike, cap } => TerminalCondition::new(
            Arc::new(move |x: &[f64], _: &[f64]| (x[0] - strike).max(0.0).min(cap)),
            cap.abs(),
        )
        .with_grad(Arc::new(
            move |x: &[f64], _: &[f64], gx: &mut [f64], gm: &mut [f64]| {
                gx.fill(0.0);
                gm.fill(0.0);
                gx[0] = if x[0] > strike && x[0] < strike + cap {
                    1.0
                } else {
                    0.0
                };
            },
        )),
    }
}

/// Market with constant `β` and `α`; the forward coefficients drive the risk factor.
pub fn build_market(
    cfg: &MarketConfig,
    risk: &SdeCoefficients,
    payoff: &TerminalCondition,
) -> Result<MarketSpec> {
    let (k, d) = (cfg.k, risk.d);
    if k > d {
        bail!("market has k = {k} assets for a {d}-dimensional martingale; we assume k ≤ d");
    }
    ensure!(
        cfg.beta.len() == k * d,
        "beta has {} entries, expected {}",
        cfg.beta.len(),
        k * d
    );
    ensure!(
        cfg.alpha.len() == k,
        "alpha has {} entries, expected {k}",
        cfg.alpha.len()
    );
    let (beta, alpha) = (cfg.beta.clone(), cfg.alpha.clone());
    let market = MarketSpec {
        risk: risk.clone(),
        beta: Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&beta)),
        alpha: Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&alpha)),
        k,
        kappa: cfg.kappa,
        payoff: payoff.clone(),
        asset_m_free: true,
        premium_bound: cfg.premium_bound.unwrap_or(1.0),
    };
    market.validate()?;
    Ok(market)
}

pub fn build_method(cfg: &SolverConfig) -> SolveMethod {
    let picard = PicardOptions {
        basis: RegressionBasis {
            degree: cfg.degree,
            ridge: cfg.ridge,
        },
        tol: cfg.tol,
        max_iter: cfg.max_iter,
        control_stderr: false,
    };
    let quad = QuadraticOptions {
        mode: match cfg.mode {
            ModeConfig::Transform => QuadraticMode::Transform,
            ModeConfig::Direct => QuadraticMode::Direct,
        },
        picard,
        k_level: cfg.k_level,
        z_level: cfg.z_level,
        kappa: cfg.transform_kappa,
        c1: cfg.c1,
        c2: cfg.c2,
        strict: cfg.strict,
    };
    match cfg.method {
        MethodConfig::Lipschitz => SolveMethod::Lipschitz(picard),
        MethodConfig::Quadratic => SolveMethod::Quadratic(quad),
        MethodConfig::Orthogonal => SolveMethod::Orthogonal {
            kappa: cfg.orthogonal_kappa,
            opts: quad,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capped_call_is_bounded_by_the_cap() {
        let f = build_terminal(&TerminalConfig::CappedCall {
            strike: 1.0,
            cap: 0.2,
        });
        assert_eq!(f.bound, 0.2);
        assert_eq!((f.f)(&[0.5], &[0.0]), 0.0);
        assert!(((f.f)(&[1.1], &[0.0]) - 0.1).abs() < 1e-15);
        assert_eq!((f.f)(&[3.0], &[0.0]), 0.2);
    }

    #[test]
    fn sqrt_vol_preset_is_diagonal() {
        let cfg = MartingaleConfig {
            kind: MartingaleKindConfig::Diffusion,
            dim: 2,
            vol: Some(VolPreset::SqrtOnePlusSquare),
            orthogonal_vol: None,
            initial: None,
            bracket_bound: None,
            memory_budget_mb: None,
        };
        let model = build_model(&cfg).unwrap();
        assert!(!model.independent_increments());
    }

    #[test]
    fn smooth_nonlinear_partial_matches_difference() {
        let c = build_forward(&ForwardConfig::SmoothNonlinear { s: 0.4 }, 1, 1.0).unwrap();
        let worst = c
            .spot_check_partials(&[(0.0, vec![0.3], vec![0.0]), (0.5, vec![-1.2], vec![0.1])])
            .unwrap();
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn oversized_market_is_rejected() {
        let cfg = MarketConfig {
            k: 2,
            beta: vec![0.2; 2],
            alpha: vec![0.0; 2],
            kappa: 1.0,
            premium_bound: None,
        };
        let risk = SdeCoefficients::linear(0.2, 0.0);
        let err = build_market(&cfg, &risk, &TerminalCondition::constant(1.0)).unwrap_err();
        assert!(err.to_string().contains("k ≤ d"));
    }
}
