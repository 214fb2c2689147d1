use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::error::{Error, Result};

/// One line of `metrics.csv`. `trajectory` is a simulation name, `pooled`
/// (all steps of all trajectories together) or `mean` (average of the
/// per-trajectory rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub trajectory: String,
    pub velocity_mae: f64,
    pub velocity_mse: f64,
    pub vorticity_mae: f64,
    pub vorticity_mse: f64,
    pub improvement_velocity_mae: f64,
    pub improvement_velocity_mse: f64,
    pub improvement_vorticity_mae: f64,
    pub improvement_vorticity_mse: f64,
    pub marker_mae: Option<f64>,
}

pub const METRICS_HEADER: &str = "model,trajectory,velocity_mae,velocity_mse,vorticity_mae,vorticity_mse,\
improvement_velocity_mae,improvement_velocity_mse,improvement_vorticity_mae,improvement_vorticity_mse,marker_mae";

/// Mean per-cell velocity error magnitude over the evaluated steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap {
    pub model: String,
    pub trajectory: String,
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl ErrorMap {
    /// Binary 8-bit PGM, top row first, `scale` mapped to 255.
    pub fn to_pgm(&self, scale: f64) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        for j in (0..self.ny).rev() {
            for i in 0..self.nx {
                let v = if scale > 0.0 { self.data[j * self.nx + i] / scale } else { 0.0 };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::FormatError { offset: 0, message: format!("{}: {other:?}", path.display()) },
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let m = r.marker_mae.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{m}\n",
            r.model,
            r.trajectory,
            r.velocity_mae,
            r.velocity_mse,
            r.vorticity_mae,
            r.vorticity_mse,
            r.improvement_velocity_mae,
            r.improvement_velocity_mse,
            r.improvement_vorticity_mae,
            r.improvement_vorticity_mse
        ));
    }
    s
}

/// Reads `metrics.csv` back.
pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Writes `metrics.csv`, `curves.csv`, `runtime.csv`, `maps.csv`,
/// `maps/<model>_<trajectory>.pgm` and `report.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let maps = dir.join("maps");
    std::fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&report.rows).as_bytes())?;

    let mut curves = String::from("model,trajectory,series,step,value\n");
    for c in &report.curves {
        for (i, v) in c.values.iter().enumerate() {
            curves.push_str(&format!("{},{},{},{},{v:e}\n", c.model, c.trajectory, c.series, i + 1));
        }
    }
    write_file(&dir.join("curves.csv"), curves.as_bytes())?;

    let mut runtime = String::from("model,repeats,mean_seconds,stddev_seconds\n");
    for (name, s) in &report.runtime {
        runtime.push_str(&format!("{name},{},{:e},{:e}\n", s.samples.len(), s.mean, s.stddev));
    }
    write_file(&dir.join("runtime.csv"), runtime.as_bytes())?;

    let mut index = String::from("model,trajectory,file,scale\n");
    for m in &report.error_maps {
        let file = format!("{}_{}.pgm", m.model, m.trajectory);
        write_file(&maps.join(&file), &m.to_pgm(report.error_map_scale))?;
        index.push_str(&format!("{},{},maps/{file},{:e}\n", m.model, m.trajectory, report.error_map_scale));
    }
    write_file(&dir.join("maps.csv"), index.as_bytes())?;

    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    write_file(&dir.join("report.json"), &json)
}
