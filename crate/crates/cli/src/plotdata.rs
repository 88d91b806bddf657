//! Long-format `series,xaxis,x,y` export of run artifacts for external plotting.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::manifest::RunManifest;

pub const HEADER: &str = "series,xaxis,x,y";

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rd =
            csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = rd.headers()?.iter().map(str::to_string).collect();
        let rows = rd
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column {name} missing"))
    }
}

fn point(out: &mut Vec<u8>, series: &str, xaxis: &str, x: &str, y: &str) -> std::io::Result<()> {
    if y.is_empty() || x.is_empty() {
        return Ok(());
    }
    writeln!(out, "{series},{xaxis},{x},{y}")
}

/// Renders every artifact listed in the manifest; `dir` holds the artifacts.
pub fn emit_plot_data(manifest: &RunManifest, dir: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{HEADER}")?;
    for a in &manifest.artifacts {
        let path = dir.join(&a.file);
        if !path.is_file() {
            bail!("manifest lists {} but the artifact is missing", a.file);
        }
        let t = Table::read(&path).with_context(|| format!("artifact {}", a.file))?;
        match a.kind.as_str() {
            "surface" => {
                let (ct, cx, cm, cu) = (t.col("t")?, t.col("x")?, t.col("m")?, t.col("u")?);
                for r in &t.rows {
                    point(
                        &mut out,
                        &format!("u[t={};m={}]", r[ct], r[cm]),
                        "x",
                        &r[cx],
                        &r[cu],
                    )?;
                }
            }
            "convergence" => {
                let (ck, cd) = (t.col("iteration")?, t.col("sup_dY")?);
                for r in &t.rows {
                    point(&mut out, "sup_dY", "iteration", &r[ck], &r[cd])?;
                }
            }
            "refinement" => {
                let (cn, cb, cy) = (
                    t.col("steps")?,
                    t.col("bracket_median")?,
                    t.col("start_value")?,
                );
                for r in &t.rows {
                    point(&mut out, "bracket_median", "steps", &r[cn], &r[cb])?;
                    point(&mut out, "start_value", "steps", &r[cn], &r[cy])?;
                }
            }
            "representation" => {
                let cr = t.col("resid")?;
                let stem = a.file.trim_end_matches(".csv");
                for (k, r) in t.rows.iter().enumerate() {
                    point(
                        &mut out,
                        &format!("{stem}_resid"),
                        "cell",
                        &k.to_string(),
                        &r[cr],
                    )?;
                }
                let mut sorted: Vec<f64> =
                    t.rows.iter().filter_map(|r| r[cr].parse().ok()).collect();
                sorted.sort_by(f64::total_cmp);
                if let Some(med) = sorted.get(sorted.len() / 2) {
                    point(
                        &mut out,
                        &format!("{stem}_median_resid"),
                        "cells",
                        &sorted.len().to_string(),
                        &med.to_string(),
                    )?;
                }
            }
            "nodes" => {
                let (ct, cu) = (t.col("t")?, t.col("u")?);
                for (k, r) in t.rows.iter().enumerate() {
                    point(
                        &mut out,
                        &format!("u[t={}]", r[ct]),
                        "node",
                        &k.to_string(),
                        &r[cu],
                    )?;
                }
            }
            "hedge" => {
                let (ct, cr, cp) = (t.col("t")?, t.col("r")?, t.col("price")?);
                let deltas: Vec<(usize, &String)> = t
                    .header
                    .iter()
                    .enumerate()
                    .filter(|(_, h)| h.starts_with("delta_"))
                    .collect();
                for r in &t.rows {
                    point(
                        &mut out,
                        &format!("price[t={}]", r[ct]),
                        "r",
                        &r[cr],
                        &r[cp],
                    )?;
                    for (c, name) in &deltas {
                        point(
                            &mut out,
                            &format!("{name}[t={}]", r[ct]),
                            "r",
                            &r[cr],
                            &r[*c],
                        )?;
                    }
                }
            }
            // Path dumps and unknown kinds have no plot form.
            _ => {}
        }
    }
    Ok(out)
}

/// Loads a manifest file and renders its plot data.
pub fn plot_data_from(manifest_path: &Path) -> Result<Vec<u8>> {
    let m = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    emit_plot_data(&m, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Artifact;

    #[test]
    fn empty_manifest_gives_header_only() {
        let out = emit_plot_data(&RunManifest::default(), Path::new(".")).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{HEADER}\n"));
    }

    #[test]
    fn missing_artifact_is_an_error() {
        let m = RunManifest {
            artifacts: vec![Artifact {
                file: "nope.csv".into(),
                kind: "surface".into(),
                ..Default::default()
            }],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let e = emit_plot_data(&m, dir.path()).unwrap_err();
        assert!(e.to_string().contains("missing"));
    }

    #[test]
    fn surface_gives_one_series_per_m_slice() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("surface.csv"),
            "t,x,m,u,stderr,d2u,d3u\n0,0,-1,1,0,,\n0,1,-1,1,0,,\n0,0,1,2,0,,\n0,1,1,2,0,,\n",
        )
        .unwrap();
        let m = RunManifest {
            artifacts: vec![Artifact {
                file: "surface.csv".into(),
                kind: "surface".into(),
                ..Default::default()
            }],
            ..Default::default()
        };
        let text = String::from_utf8(emit_plot_data(&m, dir.path()).unwrap()).unwrap();
        let series: std::collections::BTreeSet<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(series.len(), 2, "{text}");
    }
}
