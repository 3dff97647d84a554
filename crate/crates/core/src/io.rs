//! Plain-text file formats: ensemble snapshots (for warm starts), the
//! per-step eigenvalue series, and density histograms. Floats are written
//! with Rust's shortest round-trip formatting, so read-back is exact.

use crate::engine::{DensityHistogram, Ensemble};
use crate::error::{CoreError, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Run provenance carried in an ensemble snapshot header.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMeta {
    pub problem: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub seed: u64,
}

/// Write an ensemble as CSV: a header row `d,M,problem,epsilon,alpha,seed`,
/// one row of its values, then one row of coordinates per particle.
pub fn write_ensemble_csv(path: &Path, ensemble: &Ensemble, meta: &EnsembleMeta) -> Result<()> {
    let mut out = String::new();
    out.push_str("d,M,problem,epsilon,alpha,seed\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{},{}",
        ensemble.dim,
        ensemble.len(),
        meta.problem,
        meta.epsilon,
        meta.alpha,
        meta.seed
    );
    for p in 0..ensemble.len() {
        let row = ensemble.particle(p);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_err(path: &Path, msg: impl Into<String>) -> CoreError {
    CoreError::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn read_ensemble_csv(path: &Path) -> Result<(Ensemble, EnsembleMeta)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, "empty file"))?
        .trim();
    if header != "d,M,problem,epsilon,alpha,seed" {
        return Err(parse_err(path, format!("unexpected header `{header}`")));
    }
    let meta_line = lines
        .next()
        .ok_or_else(|| parse_err(path, "missing metadata row"))?;
    let fields: Vec<&str> = meta_line.trim().split(',').collect();
    if fields.len() != 6 {
        return Err(parse_err(path, "metadata row must have 6 fields"));
    }
    let dim: usize = fields[0]
        .parse()
        .map_err(|e| parse_err(path, format!("bad dimension: {e}")))?;
    let n: usize = fields[1]
        .parse()
        .map_err(|e| parse_err(path, format!("bad particle count: {e}")))?;
    let meta = EnsembleMeta {
        problem: fields[2].to_string(),
        epsilon: fields[3]
            .parse()
            .map_err(|e| parse_err(path, format!("bad epsilon: {e}")))?,
        alpha: fields[4]
            .parse()
            .map_err(|e| parse_err(path, format!("bad alpha: {e}")))?,
        seed: fields[5]
            .parse()
            .map_err(|e| parse_err(path, format!("bad seed: {e}")))?,
    };
    let mut positions = Vec::with_capacity(n * dim);
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        for field in line.trim().split(',') {
            let v: f64 = field
                .parse()
                .map_err(|e| parse_err(path, format!("row {}: {e}", row + 3)))?;
            positions.push(v);
        }
        if positions.len() % dim != 0 {
            return Err(parse_err(
                path,
                format!("row {} does not have {dim} coordinates", row + 3),
            ));
        }
    }
    if positions.len() != n * dim {
        return Err(parse_err(
            path,
            format!(
                "expected {} coordinates ({n} x {dim}), found {}",
                n * dim,
                positions.len()
            ),
        ));
    }
    Ok((Ensemble::new(dim, positions), meta))
}

/// Write the per-step eigenvalue series: columns `t, log_mean_weight`,
/// where `t = n dt` and the second column is one step's contribution.
pub fn write_series_csv(path: &Path, per_step: &[f64], dt: f64) -> Result<()> {
    let mut out = String::from("t,log_mean_weight\n");
    for (n, v) in per_step.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", (n + 1) as f64 * dt);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a 2-D histogram: `#`-prefixed header lines carrying the axis
/// indices and bin edges, then one grid row per x-bin with the bin
/// masses as columns (y-bins left to right).
pub fn write_histogram_csv(path: &Path, hist: &DensityHistogram) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# axes={} {}", hist.axes.0, hist.axes.1);
    for (label, edges) in [("edges_x", &hist.edges_x), ("edges_y", &hist.edges_y)] {
        let _ = write!(out, "# {label}=");
        for (i, e) in edges.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{e}");
        }
        out.push('\n');
    }
    let (bins_x, bins_y) = hist.bins();
    for i in 0..bins_x {
        for j in 0..bins_y {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", hist.masses[i * bins_y + j]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
