//! Static checks of a config plus sampled spot-checks of the boundedness and growth
//! hypotheses. Nothing here runs a solver.

use serde::Serialize;

use crate::config::{DriverConfig, ExperimentConfig, ForwardConfig, MethodConfig};
use crate::presets::Scenario;

/// Issues found in a config. Errors block a run; warnings do not.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }
}

const ON_GRID: f64 = 1e-9;

fn on_grid(points: &[f64], t: f64) -> bool {
    points
        .iter()
        .any(|p| (p - t).abs() <= ON_GRID * (1.0 + t.abs()))
}

pub fn validate(cfg: &ExperimentConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    let err = |r: &mut ValidationReport, s: String| r.errors.push(s);
    let g = &cfg.grid;
    if !(g.horizon > 0.0 && g.horizon.is_finite()) {
        err(
            &mut r,
            format!("grid.horizon must be positive, got {}", g.horizon),
        );
    }
    if g.steps < 1 && g.points.is_none() {
        err(&mut r, "grid.steps must be at least 1".into());
    }
    if g.paths < 1 {
        err(&mut r, "grid.paths must be at least 1".into());
    }
    let s = &cfg.solver;
    if !(s.tol > 0.0) {
        err(
            &mut r,
            format!("solver.tol must be positive, got {}", s.tol),
        );
    }
    if s.max_iter < 1 {
        err(&mut r, "solver.max_iter must be at least 1".into());
    }
    if !(s.ridge >= 0.0) {
        err(
            &mut r,
            format!("solver.ridge must be nonnegative, got {}", s.ridge),
        );
    }
    if !(s.z_level > 0.0) {
        err(
            &mut r,
            format!("solver.z_level must be positive, got {}", s.z_level),
        );
    }
    if let (Some(c1), Some(c2)) = (s.c1, s.c2) {
        if !(0.0 < c1 && c1 <= c2) {
            err(
                &mut r,
                format!("need 0 < c1 ≤ c2, got c1 = {c1}, c2 = {c2}"),
            );
        }
    }
    if let Some(m) = &cfg.market {
        if m.k > cfg.martingale.dim {
            err(
                &mut r,
                format!(
                    "market has k = {} assets for d = {}; we assume k ≤ d",
                    m.k, cfg.martingale.dim
                ),
            );
        }
    }
    if matches!(cfg.driver, DriverConfig::UtilityMarket) && cfg.market.is_none() {
        err(
            &mut r,
            "driver preset utility-market needs a [market] block".into(),
        );
    }
    if matches!(s.method, MethodConfig::Orthogonal) && cfg.martingale.orthogonal_vol.is_none() {
        err(
            &mut r,
            "the orthogonal method needs martingale.orthogonal_vol".into(),
        );
    }
    if cfg.study.hedge.is_some() && cfg.market.is_none() {
        err(&mut r, "study.hedge needs a [market] block".into());
    }
    if !r.is_ok() {
        return r;
    }

    let sc = match Scenario::build(cfg) {
        Ok(sc) => sc,
        Err(e) => {
            err(&mut r, format!("{e:#}"));
            return r;
        }
    };
    let points = sc.grid.points().to_vec();
    let horizon = sc.grid.horizon();
    if matches!(cfg.forward, ForwardConfig::Switching) && !on_grid(&points, 0.5 * horizon) {
        err(
            &mut r,
            format!(
                "the switching preset needs T/2 = {} on the grid",
                0.5 * horizon
            ),
        );
    }
    for (k, node) in cfg.study.nodes.iter().enumerate() {
        if !on_grid(&points, node.t) {
            err(
                &mut r,
                format!("study.nodes[{k}]: t = {} is not a grid point", node.t),
            );
        }
        if node.x.len() != sc.coeffs.n || node.m.len() != sc.model.dim {
            err(
                &mut r,
                format!(
                    "study.nodes[{k}]: x/m lengths must be {}/{}",
                    sc.coeffs.n, sc.model.dim
                ),
            );
        }
    }
    if let Some(surface) = &cfg.study.surface {
        for t in &surface.times {
            if !on_grid(&points, *t) {
                err(
                    &mut r,
                    format!("study.surface: t = {t} is not a grid point"),
                );
            }
        }
        if surface.xs.is_empty() || surface.ms.is_empty() || surface.times.is_empty() {
            err(
                &mut r,
                "study.surface needs nonempty times, xs and ms".into(),
            );
        }
        if sc.coeffs.n != 1 || sc.model.dim != 1 {
            err(
                &mut r,
                "study.surface is tabulated for scalar X and M".into(),
            );
        }
        if surface.times.len() * surface.cells_per_step < 100 {
            r.warnings.push(format!(
                "study.surface yields {} representation cells; the check needs at least 100",
                surface.times.len() * surface.cells_per_step
            ));
        }
    }
    if let Some(rep) = &cfg.study.representation {
        let n = sc.grid.n_steps();
        if let Some(bad) = rep.steps.iter().find(|&&i| i >= n) {
            err(
                &mut r,
                format!("study.representation: step {bad} is not below N = {n}"),
            );
        }
        if !(rep.h > 0.0) {
            err(&mut r, "study.representation.h must be positive".into());
        }
        if rep.steps.len() * rep.per_step < 100 {
            r.warnings.push(format!(
                "study.representation yields {} cells; the check needs at least 100",
                rep.steps.len() * rep.per_step
            ));
        }
    }
    if let Some(re) = &cfg.study.refinement {
        if re.ladder.len() < 2 || re.ladder.iter().any(|&n| n < 1) {
            err(
                &mut r,
                "study.refinement.ladder needs at least two positive step counts".into(),
            );
        }
        if matches!(cfg.forward, ForwardConfig::Switching) && re.ladder.iter().any(|n| n % 2 == 1) {
            err(
                &mut r,
                "the switching preset needs even step counts in the refinement ladder".into(),
            );
        }
    }
    if let Some(h) = &cfg.study.hedge {
        if !(h.h > 0.0) {
            err(&mut r, "study.hedge.h must be positive".into());
        }
        if !h.times.is_empty() || !h.rs.is_empty() {
            let reduced = sc
                .market
                .as_ref()
                .is_some_and(|m| qfbsde::hedging::reduced_form(m, &sc.model));
            if !reduced || sc.coeffs.n != 1 {
                err(&mut r, "a hedge price grid needs a scalar risk factor in the reduced form (Brownian, m-free)".into());
            }
            if h.times.len() < 2 || h.rs.len() < 2 {
                err(
                    &mut r,
                    "a hedge price grid needs at least two times and two risk levels".into(),
                );
            }
            for t in &h.times {
                if !on_grid(&points, *t) {
                    err(&mut r, format!("study.hedge: t = {t} is not a grid point"));
                }
            }
        }
    }

    // (H1): F bounded.
    let quadratic = !matches!(cfg.solver.method, MethodConfig::Lipschitz);
    if !sc.terminal.bound.is_finite() {
        let msg = "terminal condition is unbounded (H1 violated); clip it, e.g. clipped_identity or smooth_clip";
        if quadratic {
            err(
                &mut r,
                format!("{msg}; the quadratic solvers need a bounded terminal condition"),
            );
        } else {
            r.warnings.push(msg.into());
        }
    } else {
        let samples = terminal_samples(sc.coeffs.n, sc.model.dim);
        let bad = sc.terminal.audit_bound(&samples);
        if !bad.is_empty() {
            r.warnings.push(format!(
                "terminal condition exceeds its bound {} at {} of {} sampled points (H1)",
                sc.terminal.bound,
                bad.len(),
                samples.len()
            ));
        }
    }

    // (H2): growth of the driver.
    let samples = driver_samples(horizon, sc.coeffs.n, sc.model.dim);
    let bad = sc.driver.audit_growth(&samples);
    if !bad.is_empty() {
        r.warnings.push(format!(
            "driver exceeds its declared growth bound at {} of {} sampled arguments (H2)",
            bad.len(),
            samples.len()
        ));
    }
    r
}

fn levels() -> [f64; 7] {
    [-50.0, -5.0, -1.0, 0.0, 1.0, 5.0, 50.0]
}

fn terminal_samples(n: usize, d: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for &x in &levels() {
        for &m in &[-2.0, 0.0, 2.0] {
            out.push((vec![x; n], vec![m; d]));
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn driver_samples(
    horizon: f64,
    n: usize,
    d: usize,
) -> Vec<(f64, Vec<f64>, Vec<f64>, f64, Vec<f64>, Vec<f64>)> {
    let mut q = vec![0.0; d * d];
    for k in 0..d {
        q[k * d + k] = 1.0;
    }
    let mut out = Vec::new();
    for &t in &[0.0, 0.5 * horizon, horizon] {
        for &y in &[-3.0, 0.0, 3.0] {
            for &z in &[-4.0, -0.5, 0.0, 0.5, 4.0] {
                for k in 0..d {
                    let mut zq = vec![0.0; d];
                    zq[k] = z;
                    out.push((t, vec![0.5; n], vec![0.0; d], y, zq, q.clone()));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
scenario = "v"
[grid]
horizon = 1.0
steps = 10
paths = 100
[martingale]
kind = "brownian"
dim = 1
[forward]
preset = "identity"
[driver]
preset = "zero"
[terminal]
preset = "constant"
value = 1.0
"#;

    fn check(text: &str) -> ValidationReport {
        validate(&ExperimentConfig::from_toml(text).unwrap())
    }

    #[test]
    fn valid_config_has_no_issues() {
        assert!(check(BASE).is_clean(), "{:?}", check(BASE));
    }

    #[test]
    fn unbounded_terminal_warns_for_lipschitz_and_fails_for_quadratic() {
        let text = BASE.replace(
            "preset = \"constant\"\nvalue = 1.0",
            "preset = \"identity\"",
        );
        let r = check(&text);
        assert!(r.is_ok());
        assert!(r.warnings.iter().any(|w| w.contains("H1")), "{r:?}");
        let r = check(&format!("{text}[solver]\nmethod = \"quadratic\"\n"));
        assert!(!r.is_ok());
    }

    #[test]
    fn too_many_assets_is_an_error() {
        let text =
            format!("{BASE}[market]\nk = 2\nbeta = [0.1, 0.2]\nalpha = [0.0, 0.0]\nkappa = 1.0\n");
        let r = check(&text);
        assert!(
            r.errors.iter().any(|e| e.contains("we assume k ≤ d")),
            "{r:?}"
        );
    }

    #[test]
    fn off_grid_nodes_and_bad_tolerance_are_errors() {
        let r = check(&format!(
            "{BASE}[[study.nodes]]\nt = 0.55\nx = [0.0]\nm = [0.0]\n"
        ));
        assert!(r.errors.iter().any(|e| e.contains("grid point")), "{r:?}");
        let r = check(&format!("{BASE}[solver]\ntol = 0.0\n"));
        assert!(r.errors.iter().any(|e| e.contains("tol")), "{r:?}");
    }
}
