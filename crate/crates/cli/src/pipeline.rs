//! The scenario pipeline: paths, forward, backward, then the configured studies.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qfbsde::forward::{simulate_forward, StartPoint};
use qfbsde::hedging::{
    delta_hedge, hedge_backtest, indifference_price, price_grid, price_partials, HedgeRow,
    HedgeState,
};
use qfbsde::markov::{
    bracket_check, cells_by_bumps, cells_from_surface, estimate_surface, estimate_u,
    representation_check,
};
use qfbsde::martingale::generate_paths_from;
use qfbsde::parallel::with_threads;
use qfbsde::{MarkovProblem, TimeGrid};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::{
    ArtifactWriter, RunManifest, SolverDiagnostics, Stage, TruncationFlags, MANIFEST_FILE,
};
use crate::presets::Scenario;
use crate::validate::validate;

/// Floor below which `∂ₘu` estimates count as zero regardless of their standard error.
const D3U_FLOOR: f64 = 1e-10;

/// Exit codes of the binary.
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CAPACITY: i32 = 4;
pub const EXIT_IO: i32 = 1;

/// A failed run, ready for a machine-readable report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunError {
    pub code: i32,
    pub kind: &'static str,
    pub stage: String,
    pub message: String,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error in {}: {}", self.kind, self.stage, self.message)
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn validation(message: String) -> Self {
        Self {
            code: EXIT_VALIDATION,
            kind: "validation",
            stage: "validate".into(),
            message,
        }
    }

    fn solver(stage: &str, e: qfbsde::Error) -> Self {
        let (code, kind) = if e.is_capacity() {
            (EXIT_CAPACITY, "capacity")
        } else {
            (EXIT_SOLVER, "solver")
        };
        Self {
            code,
            kind,
            stage: stage.into(),
            message: e.to_string(),
        }
    }

    fn io(stage: &str, e: anyhow::Error) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            stage: stage.into(),
            message: format!("{e:#}"),
        }
    }

    /// `{"error": {...}}` on one line.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

/// Command-line overrides of a run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

/// Loads, validates and runs a config file.
pub fn run(path: &Path, opts: &RunOptions) -> Result<RunManifest, RunError> {
    let cfg = ExperimentConfig::load(path).map_err(|e| RunError::validation(format!("{e:#}")))?;
    run_config(cfg, opts)
}

pub fn run_config(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, RunError> {
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let report = validate(&cfg);
    if !report.is_ok() {
        return Err(RunError::validation(report.errors.join("; ")));
    }
    let sc = Scenario::build(&cfg).map_err(|e| RunError::validation(format!("{e:#}")))?;
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.scenario));
    let writer = ArtifactWriter::new(&dir).map_err(|e| RunError::io("output", e))?;
    let mut runner = Runner {
        cfg: &cfg,
        sc: &sc,
        writer,
        manifest: RunManifest {
            scenario: cfg.scenario.clone(),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            threads: opts.threads,
            warnings: report.warnings,
            ..Default::default()
        },
    };
    with_threads(opts.threads, || runner.execute())?;
    let Runner {
        writer,
        mut manifest,
        ..
    } = runner;
    manifest.artifacts = writer.artifacts.clone();
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(writer.dir().join(MANIFEST_FILE), json + "\n")
        .map_err(|e| RunError::io("manifest", e.into()))?;
    Ok(manifest)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    sc: &'a Scenario,
    writer: ArtifactWriter,
    manifest: RunManifest,
}

fn csv_row(w: &mut Vec<u8>, fields: &[String]) -> std::io::Result<()> {
    writeln!(w, "{}", fields.join(","))
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}_{k}")).collect()
}

fn fmt_all(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Least-squares slope of `log y` on `log x` over positive pairs.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl Runner<'_> {
    fn timed<R>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<R, RunError>,
    ) -> Result<R, RunError> {
        let clock = Instant::now();
        let out = f(self)?;
        self.manifest.stages.push(Stage {
            name: name.into(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn emit(
        &mut self,
        stage: &str,
        file: &str,
        kind: &str,
        bytes: Vec<u8>,
    ) -> Result<(), RunError> {
        self.writer
            .write(file, kind, &bytes)
            .map_err(|e| RunError::io(stage, e))
    }

    fn study(&mut self, key: &str, value: f64) {
        self.manifest.studies.insert(key.into(), value);
    }

    fn execute(&mut self) -> Result<(), RunError> {
        let sc = self.sc;
        let problem = sc.problem();
        let bundle = self.timed("paths", |_| {
            problem
                .bundle_at(sc.start_index, &sc.m0)
                .map_err(|e| RunError::solver("paths", e))
        })?;
        let start = StartPoint::new(sc.start_index, sc.x0.clone(), sc.m0.clone());
        let fw = self.timed("forward", |_| {
            simulate_forward(&sc.coeffs, &bundle, &start)
                .map_err(|e| RunError::solver("forward", e))
        })?;
        let sol = self.timed("backward", |_| {
            problem
                .solve_forward(&bundle, &fw)
                .map_err(|e| RunError::solver("backward", e))
        })?;
        let bracket = bracket_check(&sol, &bundle).map_err(|e| RunError::solver("backward", e))?;
        self.manifest.solver = Some(SolverDiagnostics {
            start_value: sol.start_value,
            start_stderr: sol.start_stderr,
            iterations: sol.report.iterations,
            converged: sol.report.converged,
            epsilon_hat: sol.report.epsilon_hat,
            max_condition: sol.report.max_condition,
            truncation: sol.truncation.as_ref().map(|t| TruncationFlags {
                binding: t.binding(),
                y_active: t.y_active,
                z_active: t.z_active,
                u_active: t.u_active,
                k_level: t.k_level,
                z_level: t.z_level,
                kappa: t.kappa,
            }),
            bracket_median: bracket.median,
        });
        let mut buf = Vec::new();
        sol.report
            .write_csv(&mut buf)
            .map_err(|e| RunError::io("backward", e.into()))?;
        self.emit("backward", "convergence.csv", "convergence", buf)?;
        let mut buf = Vec::new();
        sol.write_csv(&bundle, 20, &mut buf)
            .map_err(|e| RunError::io("backward", e.into()))?;
        self.emit("backward", "paths.csv", "paths", buf)?;

        if !self.cfg.study.nodes.is_empty() {
            self.timed("nodes", |r| r.nodes(&problem))?;
        }
        if let Some(surface) = self.cfg.study.surface.clone() {
            self.timed("surface", |r| {
                let s = estimate_surface(&problem, &surface.times, &surface.xs, &surface.ms)
                    .map_err(|e| RunError::solver("surface", e))?;
                let mut buf = Vec::new();
                s.write_csv(&mut buf)
                    .map_err(|e| RunError::io("surface", e.into()))?;
                r.emit("surface", "surface.csv", "surface", buf)?;
                let (cells, excluded) =
                    cells_from_surface(&s, &sol, &fw, &bundle, &sc.coeffs, surface.cells_per_step);
                match representation_check(cells, excluded) {
                    Ok(rep) => {
                        let mut buf = Vec::new();
                        rep.write_csv(&mut buf)
                            .map_err(|e| RunError::io("surface", e.into()))?;
                        r.emit(
                            "surface",
                            "representation_surface.csv",
                            "representation",
                            buf,
                        )?;
                        r.study("surface.representation_median", rep.median);
                        r.study("surface.representation_excluded", rep.excluded as f64);
                    }
                    Err(e) => r
                        .manifest
                        .warnings
                        .push(format!("surface representation check skipped: {e}")),
                }
                Ok(())
            })?;
        }
        if let Some(rep) = self.cfg.study.representation.clone() {
            self.timed("representation", |r| {
                let mut bump = problem.clone();
                bump.paths = rep.paths.unwrap_or(problem.paths);
                let cells =
                    cells_by_bumps(&bump, &sol, &fw, &bundle, &rep.steps, rep.per_step, rep.h)
                        .map_err(|e| RunError::solver("representation", e))?;
                r.study(
                    "representation.d3u_worst_ratio",
                    cells.d3u_worst_ratio(D3U_FLOOR),
                );
                r.study("representation.noisy_partials", cells.warnings as f64);
                let report = representation_check(cells.cells, 0)
                    .map_err(|e| RunError::solver("representation", e))?;
                r.study("representation.median", report.median);
                r.study("representation.q25", report.q25);
                r.study("representation.q75", report.q75);
                let mut buf = Vec::new();
                report
                    .write_csv(&mut buf)
                    .map_err(|e| RunError::io("representation", e.into()))?;
                r.emit(
                    "representation",
                    "representation.csv",
                    "representation",
                    buf,
                )
            })?;
        }
        if let Some(re) = self.cfg.study.refinement.clone() {
            self.timed("refinement", |r| {
                r.refinement(&problem, &re.ladder, re.paths.unwrap_or(problem.paths))
            })?;
        }
        if let Some(h) = self.cfg.study.hedge.clone() {
            self.timed("hedge", |r| r.hedge(&h))?;
        }
        Ok(())
    }

    fn nodes(&mut self, problem: &MarkovProblem) -> Result<(), RunError> {
        let nodes: Vec<(f64, Vec<f64>, Vec<f64>)> = self
            .cfg
            .study
            .nodes
            .iter()
            .map(|n| (n.t, n.x.clone(), n.m.clone()))
            .collect();
        let est = estimate_u(problem, &nodes).map_err(|e| RunError::solver("nodes", e))?;
        let (n, d) = (self.sc.coeffs.n, self.sc.model.dim);
        let mut buf = Vec::new();
        let mut header = vec!["t".to_string()];
        header.extend(numbered("x", n));
        header.extend(numbered("m", d));
        header.extend(["u".into(), "stderr".into()]);
        let io = |e: std::io::Error| RunError::io("nodes", e.into());
        csv_row(&mut buf, &header).map_err(io)?;
        for e in &est {
            let mut row = vec![e.t.to_string()];
            row.extend(fmt_all(&e.x));
            row.extend(fmt_all(&e.m));
            row.extend([e.u.to_string(), e.stderr.to_string()]);
            csv_row(&mut buf, &row).map_err(io)?;
        }
        self.emit("nodes", "nodes.csv", "nodes", buf)
    }

    fn refinement(
        &mut self,
        problem: &MarkovProblem,
        ladder: &[usize],
        paths: usize,
    ) -> Result<(), RunError> {
        let sc = self.sc;
        let horizon = sc.grid.horizon();
        let mut buf = Vec::new();
        let io = |e: std::io::Error| RunError::io("refinement", e.into());
        writeln!(
            buf,
            "steps,paths,bracket_median,start_value,start_stderr,iterations"
        )
        .map_err(io)?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &steps in ladder {
            let stage = |e| RunError::solver("refinement", e);
            let grid = TimeGrid::uniform(horizon, steps).map_err(stage)?;
            let index = grid.index_of(sc.grid.t(sc.start_index)).ok_or_else(|| {
                RunError::validation(format!("start time is not on the {steps}-step grid"))
            })?;
            let p = MarkovProblem {
                grid,
                paths,
                ..problem.clone()
            };
            let bundle = generate_paths_from(&p.model, &p.grid, paths, p.seed, index, &sc.m0)
                .map_err(stage)?;
            let (_, sol) = p.solve_on(&bundle, index, &sc.x0, &sc.m0).map_err(stage)?;
            let b = bracket_check(&sol, &bundle).map_err(stage)?;
            writeln!(
                buf,
                "{steps},{paths},{},{},{},{}",
                b.median, sol.start_value, sol.start_stderr, sol.report.iterations
            )
            .map_err(io)?;
            xs.push(steps as f64);
            ys.push(b.median);
        }
        if let Some(slope) = log_log_slope(&xs, &ys) {
            self.study("refinement.bracket_slope", slope);
        }
        self.emit("refinement", "refinement.csv", "refinement", buf)
    }

    fn hedge(&mut self, study: &crate::config::HedgeStudy) -> Result<(), RunError> {
        let sc = self.sc;
        let market = sc
            .market
            .as_ref()
            .expect("validated: hedge study has a market");
        let stage = |e| RunError::solver("hedge", e);
        let setup = sc.pricing(sc.paths);
        let t0 = sc.grid.t(sc.start_index);
        let price = indifference_price(market, &setup, t0, &sc.x0, &sc.m0).map_err(stage)?;
        let partials =
            price_partials(market, &setup, t0, &sc.x0, &sc.m0, study.h).map_err(stage)?;
        let bundle = generate_paths_from(&sc.model, &sc.grid, 1, sc.seed, sc.start_index, &sc.m0)
            .map_err(stage)?;
        let q0 = bundle.q.at(0, sc.start_index).to_vec();
        let delta = delta_hedge(
            market,
            &sc.model,
            t0,
            &sc.x0,
            &sc.m0,
            &q0,
            &partials.d2u,
            &partials.d3u,
        )
        .map_err(stage)?;
        self.study("hedge.price", price.price);
        self.study("hedge.price_stderr", price.stderr);
        for (j, v) in delta.iter().enumerate() {
            self.study(&format!("hedge.delta_{}", j + 1), *v);
        }
        let mut rows = vec![HedgeRow {
            t: t0,
            r: sc.x0[0],
            m: sc.m0[0],
            price: price.price,
            delta: delta.clone(),
        }];

        let mut report = None;
        if !study.times.is_empty() {
            let grid_setup = sc.pricing(study.grid_paths.unwrap_or(sc.paths));
            let table = price_grid(market, &grid_setup, &study.times, &study.rs).map_err(stage)?;
            let qs =
                generate_paths_from(&sc.model, &sc.grid, 1, sc.seed, 0, &sc.m0).map_err(stage)?;
            for (a, &t) in table.times.iter().enumerate() {
                let i = sc
                    .grid
                    .index_of(t)
                    .expect("validated: price-grid times are grid points");
                let q = qs.q.at(0, i).to_vec();
                for (b, &r) in table.rs.iter().enumerate() {
                    let o = a * table.rs.len() + b;
                    let d = delta_hedge(
                        market,
                        &sc.model,
                        t,
                        &[r],
                        &sc.m0,
                        &q,
                        &[table.d2p_at(t, r)],
                        &[],
                    )
                    .map_err(stage)?;
                    rows.push(HedgeRow {
                        t,
                        r,
                        m: sc.m0[0],
                        price: table.price[o],
                        delta: d,
                    });
                }
            }
            let paths = study.backtest_paths.unwrap_or(sc.paths);
            let bt = generate_paths_from(
                &sc.model,
                &sc.grid,
                paths,
                sc.seed ^ 0x9e37_79b9_7f4a_7c15,
                sc.start_index,
                &sc.m0,
            )
            .map_err(stage)?;
            let policy = |s: &HedgeState<'_, f64>| {
                let d2p = table.d2p_at(s.t, s.r[0]);
                delta_hedge(market, &sc.model, s.t, s.r, s.m, s.q, &[d2p], &[])
                    .unwrap_or_else(|_| vec![0.0; market.k])
            };
            let start = StartPoint::new(sc.start_index, sc.x0.clone(), sc.m0.clone());
            let rep =
                hedge_backtest(market, policy, &bt, &start, study.initial_wealth).map_err(stage)?;
            self.study("hedge.pnl_mean", rep.pnl_mean);
            self.study("hedge.pnl_var_hedged", rep.pnl_var_hedged);
            self.study("hedge.pnl_var_unhedged", rep.pnl_var_unhedged);
            self.study("hedge.certainty_equivalent", rep.certainty_equivalent);
            self.study(
                "hedge.certainty_equivalent_unhedged",
                rep.certainty_equivalent_unhedged,
            );
            report = Some(rep);
        }
        let mut rep = report.unwrap_or_else(|| qfbsde::hedging::HedgeReport {
            rows: Vec::new(),
            pnl: Vec::new(),
            pnl_unhedged: Vec::new(),
            pnl_mean: f64::NAN,
            pnl_var_hedged: f64::NAN,
            pnl_var_unhedged: f64::NAN,
            certainty_equivalent: f64::NAN,
            certainty_equivalent_unhedged: f64::NAN,
        });
        rep.rows = rows;
        let mut buf = Vec::new();
        rep.write_csv(&mut buf, market.k)
            .map_err(|e| RunError::io("hedge", e.into()))?;
        self.emit("hedge", "hedge.csv", "hedge", buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs = [250.0, 500.0, 1000.0, 2000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(log_log_slope(&[1.0], &[1.0]), None);
    }

    #[test]
    fn errors_render_as_json() {
        let e = RunError::validation("bad".into());
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["code"], 2);
        assert_eq!(v["error"]["kind"], "validation");
    }
}
