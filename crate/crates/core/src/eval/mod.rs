//! Error metrics against reference trajectories, the plain reduced-solver
//! baseline, latent-distance curves, runtime measurement and report files.

mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{staggered_to_centered_matrix, vorticity_centered, CenteredGrid, Domain};
use crate::nn::ModelSet;
use crate::scenarios::{Frame, ScenarioConfig, ScenarioKind, Simulation};
use crate::solver::{PhysicsParams, SimState, Solver};
use crate::training::{PipelineKind, SimContext, Transfer, WindowData};

pub use report::{emit_report, parse_metrics_csv, ErrorMap, MetricRow, METRICS_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Velocity,
    Vorticity,
}

/// Pooled value and per-step values of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub per_step: Vec<f64>,
}

fn pointwise(a: &[f64], b: &[f64], kind: MetricKind) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match kind {
            MetricKind::Mae => (x - y).abs(),
            MetricKind::Mse => (x - y) * (x - y),
        })
        .sum();
    s / a.len().max(1) as f64
}

/// Error of a predicted trajectory of two-channel centered velocities. The
/// pooled value averages over all components of all steps.
pub fn metric(pred: &[CenteredGrid], reference: &[CenteredGrid], kind: MetricKind, field: FieldKind) -> Result<Metric> {
    if pred.len() != reference.len() {
        return Err(Error::shape("metric", format!("{} vs {} frames", pred.len(), reference.len())));
    }
    let mut per_step = Vec::with_capacity(pred.len());
    for (p, r) in pred.iter().zip(reference) {
        if p.nx != r.nx || p.ny != r.ny || p.channels != r.channels || p.channels < 2 {
            return Err(Error::shape(
                "metric",
                format!("{}x{}x{} vs {}x{}x{}", p.channels, p.ny, p.nx, r.channels, r.ny, r.nx),
            ));
        }
        per_step.push(match field {
            FieldKind::Velocity => pointwise(&p.data, &r.data, kind),
            FieldKind::Vorticity => pointwise(&vorticity_centered(p).data, &vorticity_centered(r).data, kind),
        });
    }
    let value = if per_step.is_empty() { 0.0 } else { per_step.iter().sum::<f64>() / per_step.len() as f64 };
    Ok(Metric { value, per_step })
}

/// `100 · (baseline − model) / baseline`.
pub fn improvement(model_err: f64, baseline_err: f64) -> Result<f64> {
    if baseline_err == 0.0 {
        return Err(Error::DegenerateBaseline);
    }
    Ok(100.0 * (1.0 - model_err / baseline_err))
}

/// Per-step MAE between latent states and down-sampled references, both as
/// reduced face vectors.
pub fn latent_distance(latent: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<f64>> {
    if latent.len() != reference.len() {
        return Err(Error::shape("latent_distance", format!("{} vs {} steps", latent.len(), reference.len())));
    }
    latent
        .iter()
        .zip(reference)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(Error::shape("latent_distance", format!("{} vs {} faces", a.len(), b.len())));
            }
            Ok(pointwise(a, b, MetricKind::Mae))
        })
        .collect()
}

/// Output of an inference rollout. Index 0 is the decoded initial frame.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Reduced face vectors.
    pub latent: Vec<Vec<f64>>,
    /// Two-channel fine centered velocities.
    pub velocity: Vec<CenteredGrid>,
    /// Fine marker carried by the predicted velocity, when the scenario has one.
    pub marker: Option<Vec<CenteredGrid>>,
}

/// Runs `steps` reduced steps from `frames[0]` without recording gradients.
/// Forces are read from the frames as far as they reach.
pub fn predict<T: Real>(
    kind: PipelineKind,
    models: &ModelSet<T>,
    transfer: &Transfer<T>,
    context: &SimContext<T>,
    frames: &[Frame],
    steps: usize,
) -> Result<Prediction> {
    let p = crate::training::Pipeline::new(kind, models, transfer, context)?;
    let tape = Tape::<T>::no_grad();
    let b = p.bind(&tape, &[]);
    let data = WindowData::<T>::from_frames(frames);
    let roll = p.rollout(&b, &tape, &data, steps)?;
    let fine = transfer.fine;
    let grid = |t: &Tensor<T>| CenteredGrid::from_data(&fine, 2, t.to_f64_vec());
    let mut velocity = Vec::with_capacity(steps + 1);
    velocity.push(grid(p.decode(&b, &roll.latent[0])?.value())?);
    for d in &roll.decoded {
        velocity.push(grid(d.value())?);
    }
    let marker = match frames.first().and_then(|f| f.marker.as_ref()) {
        Some(m0) => Some(advect_fine_marker(&fine, m0, &velocity, context.solver.params())?),
        None => None,
    };
    Ok(Prediction { latent: roll.latent.iter().map(|l| l.value().to_f64_vec()).collect(), velocity, marker })
}

/// Fine marker transported by a centered velocity trajectory; frame `i + 1`
/// is frame `i` advected by velocity `i`.
pub fn advect_fine_marker(
    fine: &Domain,
    marker: &CenteredGrid,
    velocity: &[CenteredGrid],
    params: &PhysicsParams,
) -> Result<Vec<CenteredGrid>> {
    let solver = Solver::<f64>::new(*fine, PhysicsParams { obstacle_mask: None, ..params.clone() })?;
    let tape = Tape::<f64>::no_grad();
    let mut out = vec![marker.clone()];
    for v in &velocity[..velocity.len().saturating_sub(1)] {
        let faces = solver.centered_to_faces(&tape.constant(Tensor::from_f64(&[v.data.len()], &v.data)?))?;
        let m = tape.constant(Tensor::from_f64(&[fine.cells()], &out.last().expect("nonempty").data)?);
        let next = solver.advect_cells(&m, &faces)?;
        out.push(CenteredGrid::from_data(fine, 1, next.value().to_f64_vec())?);
    }
    Ok(out)
}

/// Plain reduced solver from the down-sampled first frame, linearly
/// up-sampled at every step.
pub fn run_baseline<T: Real>(
    transfer: &Transfer<T>,
    context: &SimContext<T>,
    frames: &[Frame],
    steps: usize,
) -> Result<Prediction> {
    predict(PipelineKind::Baseline, &ModelSet::default(), transfer, context, frames, steps)
}

/// Two-channel centered fine velocities of reference frames.
pub fn reference_velocity(fine: &Domain, frames: &[Frame]) -> Result<Vec<CenteredGrid>> {
    let m = staggered_to_centered_matrix(fine);
    frames
        .iter()
        .map(|f| {
            let mut c = vec![0.0; 2 * fine.cells()];
            m.apply(&f.velocity.to_compact(), &mut c);
            CenteredGrid::from_data(fine, 2, c)
        })
        .collect()
}

/// Down-sampled reference faces, the target of the latent-distance curve.
pub fn reference_latent<T: Real>(transfer: &Transfer<T>, frames: &[Frame]) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::<T>::no_grad();
    let data = WindowData::<T>::from_frames(frames);
    data.velocity
        .iter()
        .map(|v| Ok(transfer.down_faces(&tape.constant(v.clone()))?.value().to_f64_vec()))
        .collect()
}

/// SHA-256 over role names and parameter bytes.
pub fn parameter_hash<T: Real>(models: &ModelSet<T>) -> String {
    let mut h = Sha256::new();
    for (role, net) in &models.networks {
        h.update(role.name().as_bytes());
        for x in net.flat() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    /// Seconds per repeat.
    pub samples: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl RuntimeStats {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let stddev = (samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
        Self { samples, mean, stddev }
    }
}

/// Times `repeats` calls of `run` after one untimed warm-up call.
pub fn benchmark(mut run: impl FnMut() -> Result<()>, repeats: usize) -> Result<RuntimeStats> {
    if repeats == 0 {
        return Err(Error::config("repeats", "must be at least 1"));
    }
    run()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(RuntimeStats::from_samples(samples))
}

/// Times a full rollout: encoding of the initial frame through the last
/// decoded frame.
pub fn benchmark_model(
    kind: PipelineKind,
    models: &ModelSet<f32>,
    transfer: &Transfer<f32>,
    context: &SimContext<f32>,
    frame: &Frame,
    steps: usize,
    repeats: usize,
) -> Result<RuntimeStats> {
    let frames = std::slice::from_ref(frame);
    benchmark(|| predict(kind, models, transfer, context, frames, steps).map(drop), repeats)
}

/// Times the fine solver over `steps` steps from `frame`.
pub fn benchmark_reference<T: Real>(solver: &Solver<T>, frame: &Frame, steps: usize, repeats: usize) -> Result<RuntimeStats> {
    let mut state = SimState::new(frame.velocity.clone());
    if let Some(m) = &frame.marker {
        state = state.with_marker(m.clone());
    }
    benchmark(|| solver.rollout(&state, steps).map(drop), repeats)
}

/// Start frame and step count of an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub start: usize,
    pub steps: usize,
}

impl EvalProtocol {
    /// Smoke plumes skip a 50-step warm-up and evaluate 100 steps. Other
    /// scenarios use the whole trajectory. Both are clipped to `frames`.
    pub fn for_scenario(config: &ScenarioConfig, frames: usize) -> Self {
        let (start, steps) = match config.kind {
            ScenarioKind::SmokePlume => (50, 100),
            _ => (0, usize::MAX),
        };
        let start = start.min(frames.saturating_sub(2));
        Self { start, steps: steps.min(frames.saturating_sub(start + 1)) }
    }
}

/// Per-step series of one model on one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub model: String,
    pub trajectory: String,
    pub series: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub curves: Vec<Curve>,
    pub runtime: Vec<(String, RuntimeStats)>,
    pub error_maps: Vec<ErrorMap>,
    /// Error value mapped to white in every error map.
    pub error_map_scale: f64,
    pub parameter_hash: String,
    pub protocol: Option<EvalProtocol>,
}

impl EvalReport {
    pub fn row(&self, model: &str, trajectory: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.trajectory == trajectory)
    }
}

struct Outcome {
    velocity_mae: Metric,
    velocity_mse: Metric,
    vorticity_mae: Metric,
    vorticity_mse: Metric,
    marker_mae: Option<f64>,
    latent: Vec<f64>,
    map: Vec<f64>,
}

fn outcome(pred: &Prediction, reference: &[CenteredGrid], latent_ref: &[Vec<f64>], ref_marker: Option<&[CenteredGrid]>) -> Result<Outcome> {
    // Step 0 is the decoded input frame and is not scored.
    let p = &pred.velocity[1..];
    let r = &reference[1..];
    let marker_mae = match (&pred.marker, ref_marker) {
        (Some(pm), Some(rm)) => {
            let s: f64 = pm[1..].iter().zip(&rm[1..]).map(|(a, b)| pointwise(&a.data, &b.data, MetricKind::Mae)).sum();
            Some(s / (pm.len() - 1).max(1) as f64)
        }
        _ => None,
    };
    let n = p.first().map(|g| g.nx * g.ny).unwrap_or(0);
    let mut map = vec![0.0; n];
    for (a, b) in p.iter().zip(r) {
        for (k, m) in map.iter_mut().enumerate() {
            let du = a.data[k] - b.data[k];
            let dv = a.data[n + k] - b.data[n + k];
            *m += (du * du + dv * dv).sqrt() / p.len() as f64;
        }
    }
    Ok(Outcome {
        velocity_mae: metric(p, r, MetricKind::Mae, FieldKind::Velocity)?,
        velocity_mse: metric(p, r, MetricKind::Mse, FieldKind::Velocity)?,
        vorticity_mae: metric(p, r, MetricKind::Mae, FieldKind::Vorticity)?,
        vorticity_mse: metric(p, r, MetricKind::Mse, FieldKind::Vorticity)?,
        marker_mae,
        latent: latent_distance(&pred.latent[1..], &latent_ref[1..])?,
        map,
    })
}

fn row(model: &str, trajectory: String, o: &Outcome, base: &Outcome) -> Result<MetricRow> {
    let imp = |m: &Metric, b: &Metric| improvement(m.value, b.value);
    Ok(MetricRow {
        model: model.to_string(),
        trajectory,
        velocity_mae: o.velocity_mae.value,
        velocity_mse: o.velocity_mse.value,
        vorticity_mae: o.vorticity_mae.value,
        vorticity_mse: o.vorticity_mse.value,
        improvement_velocity_mae: imp(&o.velocity_mae, &base.velocity_mae)?,
        improvement_velocity_mse: imp(&o.velocity_mse, &base.velocity_mse)?,
        improvement_vorticity_mae: imp(&o.vorticity_mae, &base.vorticity_mae)?,
        improvement_vorticity_mse: imp(&o.vorticity_mse, &base.vorticity_mse)?,
        marker_mae: o.marker_mae,
    })
}

/// Pooled over all steps of all trajectories, and the mean of the
/// per-trajectory values.
fn summary_rows(model: &str, rows: &[MetricRow], pooled: &Outcome, pooled_base: &Outcome) -> Result<Vec<MetricRow>> {
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = MetricRow {
        model: model.to_string(),
        trajectory: "mean".into(),
        velocity_mae: avg(|r| r.velocity_mae),
        velocity_mse: avg(|r| r.velocity_mse),
        vorticity_mae: avg(|r| r.vorticity_mae),
        vorticity_mse: avg(|r| r.vorticity_mse),
        improvement_velocity_mae: avg(|r| r.improvement_velocity_mae),
        improvement_velocity_mse: avg(|r| r.improvement_velocity_mse),
        improvement_vorticity_mae: avg(|r| r.improvement_vorticity_mae),
        improvement_vorticity_mse: avg(|r| r.improvement_vorticity_mse),
        marker_mae: rows.iter().map(|r| r.marker_mae).sum::<Option<f64>>().map(|s| s / n),
    };
    Ok(vec![row(model, "pooled".into(), pooled, pooled_base)?, mean])
}

fn pool(outcomes: &[&Outcome]) -> Outcome {
    let cat = |f: fn(&Outcome) -> &Metric| {
        let per_step: Vec<f64> = outcomes.iter().flat_map(|o| f(o).per_step.iter().copied()).collect();
        let value = per_step.iter().sum::<f64>() / per_step.len().max(1) as f64;
        Metric { value, per_step }
    };
    let markers: Option<Vec<f64>> = outcomes.iter().map(|o| o.marker_mae).collect();
    Outcome {
        velocity_mae: cat(|o| &o.velocity_mae),
        velocity_mse: cat(|o| &o.velocity_mse),
        vorticity_mae: cat(|o| &o.vorticity_mae),
        vorticity_mse: cat(|o| &o.vorticity_mse),
        // Every trajectory spans the same number of steps, so the pooled
        // marker error is the plain mean.
        marker_mae: markers.map(|m| m.iter().sum::<f64>() / m.len().max(1) as f64),
        latent: Vec::new(),
        map: Vec::new(),
    }
}

/// Scores a model and the plain baseline on every given simulation.
pub fn evaluate(
    scenario: &ScenarioConfig,
    simulations: &[&Simulation],
    kind: PipelineKind,
    models: &ModelSet<f32>,
    protocol: EvalProtocol,
) -> Result<EvalReport> {
    if simulations.is_empty() {
        return Ok(EvalReport { protocol: Some(protocol), parameter_hash: parameter_hash(models), ..EvalReport::default() });
    }
    let hash_before = parameter_hash(models);
    let transfer = Transfer::<f32>::from_scenario(scenario)?;
    let fine = transfer.fine;
    let is_baseline = kind == PipelineKind::Baseline;
    let name = kind.name();

    let results: Vec<Result<(Outcome, Option<Outcome>)>> = simulations
        .par_iter()
        .map(|sim| {
            let end = protocol.start + protocol.steps;
            if sim.frames.len() <= end {
                return Err(Error::shape("evaluate", format!("simulation {} has {} frames, needs {}", sim.meta.index, sim.frames.len(), end + 1)));
            }
            let frames = &sim.frames[protocol.start..=end];
            let ctx = SimContext::<f32>::new(scenario, &sim.meta)?;
            let reference = reference_velocity(&fine, frames)?;
            let latent_ref = reference_latent(&transfer, frames)?;
            let ref_marker: Option<Vec<CenteredGrid>> = frames.iter().map(|f| f.marker.clone()).collect();
            let base = run_baseline(&transfer, &ctx, frames, protocol.steps)?;
            let base = outcome(&base, &reference, &latent_ref, ref_marker.as_deref())?;
            let model = if is_baseline {
                None
            } else {
                let pred = predict(kind, models, &transfer, &ctx, frames, protocol.steps)?;
                Some(outcome(&pred, &reference, &latent_ref, ref_marker.as_deref())?)
            };
            Ok((base, model))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = EvalReport { protocol: Some(protocol), ..EvalReport::default() };
    let mut base_rows = Vec::new();
    let mut model_rows = Vec::new();
    for (sim, (base, model)) in simulations.iter().zip(&results) {
        let traj = format!("sim_{:04}", sim.meta.index);
        base_rows.push(row("baseline", traj.clone(), base, base)?);
        let mut entries = vec![("baseline", base)];
        if let Some(m) = model {
            model_rows.push(row(name, traj.clone(), m, base)?);
            entries.push((name, m));
        }
        for (label, o) in entries {
            report.curves.push(Curve { model: label.into(), trajectory: traj.clone(), series: "velocity_mae".into(), values: o.velocity_mae.per_step.clone() });
            report.curves.push(Curve { model: label.into(), trajectory: traj.clone(), series: "vorticity_mae".into(), values: o.vorticity_mae.per_step.clone() });
            report.curves.push(Curve { model: label.into(), trajectory: traj.clone(), series: "latent_distance".into(), values: o.latent.clone() });
            report.error_maps.push(ErrorMap { model: label.into(), trajectory: traj.clone(), nx: fine.nx, ny: fine.ny, data: o.map.clone() });
        }
    }
    let pooled_base = pool(&results.iter().map(|(b, _)| b).collect::<Vec<_>>());
    report.rows.extend(summary_rows("baseline", &base_rows, &pooled_base, &pooled_base)?);
    report.rows.splice(0..0, base_rows);
    if !is_baseline {
        let pooled = pool(&results.iter().filter_map(|(_, m)| m.as_ref()).collect::<Vec<_>>());
        let summary = summary_rows(name, &model_rows, &pooled, &pooled_base)?;
        report.rows.extend(model_rows);
        report.rows.extend(summary);
    }
    report.error_map_scale = report.error_maps.iter().flat_map(|m| m.data.iter().copied()).fold(0.0, f64::max);
    report.parameter_hash = parameter_hash(models);
    if report.parameter_hash != hash_before {
        return Err(Error::NumericalFailure { primitive: "evaluation modified model parameters".into() });
    }
    for r in &report.rows {
        let vals = [r.velocity_mae, r.velocity_mse, r.vorticity_mae, r.vorticity_mse, r.improvement_velocity_mae];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::RolloutDiverged { step: protocol.steps });
        }
    }
    Ok(report)
}
