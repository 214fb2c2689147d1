//! Composition of reduced solver and networks over a window of frames.
//!
//! All latent states are compact coarse face vectors. Networks see them as
//! `[2, h, w]` cell-centered images, optionally followed by the reduced
//! marker and constant conditioning channels, and return a correction that
//! is interpolated back to the faces and added to their input state.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Ablations;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{resample_matrix, staggered_resample_matrix, staggered_to_centered_matrix, AxisMode, Domain, SparseMatrix};
use crate::nn::{with_conditioning, LayerVars, ModelRole, ModelSet};
use crate::scenarios::{Frame, ScenarioConfig, SimulationMeta};
use crate::solver::{Solver, StateVar};

/// Which reduced-space model drives a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Encoder, solver, adjustment and decoder.
    Ato(Ablations),
    /// Solver followed by an additive corrector.
    Sol,
    /// Learned one-step model in place of the solver.
    DilResnet,
    /// Plain reduced solver.
    Baseline,
}

impl PipelineKind {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::Ato(_) => "ato",
            PipelineKind::Sol => "sol",
            PipelineKind::DilResnet => "dil_resnet",
            PipelineKind::Baseline => "baseline",
        }
    }

    /// Networks a rollout of this kind reads, besides an optional
    /// super-resolution decoder.
    pub fn required_roles(&self) -> Vec<ModelRole> {
        match self {
            PipelineKind::Ato(a) => {
                let mut r = Vec::new();
                if !a.no_encoder {
                    r.push(ModelRole::Encoder);
                }
                if !a.no_adjustment {
                    r.push(ModelRole::Adjustment);
                }
                r.push(ModelRole::Decoder);
                if a.no_solver {
                    r.push(ModelRole::DilResnet);
                }
                r
            }
            PipelineKind::Sol => vec![ModelRole::SolCorrector],
            PipelineKind::DilResnet => vec![ModelRole::DilResnet],
            PipelineKind::Baseline => Vec::new(),
        }
    }

    /// Guesses the kind from the networks present in a model set.
    pub fn infer(models: &ModelSet<impl Real>) -> Self {
        let has = |r| models.get(r).is_some();
        if has(ModelRole::Decoder) {
            PipelineKind::Ato(Ablations {
                no_encoder: !has(ModelRole::Encoder),
                no_adjustment: !has(ModelRole::Adjustment),
                no_solver: has(ModelRole::DilResnet),
                ..Ablations::default()
            })
        } else if has(ModelRole::SolCorrector) {
            PipelineKind::Sol
        } else if has(ModelRole::DilResnet) {
            PipelineKind::DilResnet
        } else {
            PipelineKind::Baseline
        }
    }
}

fn shared<T: Real>(m: SparseMatrix<f64>) -> Arc<SparseMatrix<T>> {
    Arc::new(m.cast())
}

/// Linear maps between the fine and reduced grids.
pub struct Transfer<T: Real> {
    pub fine: Domain,
    pub coarse: Domain,
    down_faces: Arc<SparseMatrix<T>>,
    down_cells: Arc<SparseMatrix<T>>,
    down_cells2: Arc<SparseMatrix<T>>,
    up2: Arc<SparseMatrix<T>>,
    coarse_centered: Arc<SparseMatrix<T>>,
    fine_centered: Arc<SparseMatrix<T>>,
}

impl<T: Real> Transfer<T> {
    pub fn new(fine: &Domain, coarse: &Domain) -> Self {
        let area = [AxisMode::Area, AxisMode::Area];
        let lin = [AxisMode::Linear, AxisMode::Linear];
        let down = resample_matrix(&fine.cell_lattice(), &coarse.cell_lattice(), area);
        let up = resample_matrix(&coarse.cell_lattice(), &fine.cell_lattice(), lin);
        Self {
            fine: *fine,
            coarse: *coarse,
            down_faces: shared(staggered_resample_matrix(fine, coarse)),
            down_cells2: shared(SparseMatrix::block_diag(&down, &down)),
            down_cells: shared(down),
            up2: shared(SparseMatrix::block_diag(&up, &up)),
            coarse_centered: shared(staggered_to_centered_matrix(coarse)),
            fine_centered: shared(staggered_to_centered_matrix(fine)),
        }
    }

    pub fn from_scenario(config: &ScenarioConfig) -> Result<Self> {
        Ok(Self::new(&config.fine_domain()?, &config.coarse_domain()?))
    }

    /// Fine faces to reduced faces.
    pub fn down_faces<'t>(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        w.linear(&self.down_faces, &[self.coarse.faces()])
    }

    /// Area average of a one-channel fine cell field, flat.
    pub fn down_marker<'t>(&self, m: &Var<'t, T>) -> Result<Var<'t, T>> {
        m.linear(&self.down_cells, &[self.coarse.cells()])
    }

    /// Area average of a two-channel fine cell field, as `[2, h, w]`.
    pub fn down_centered<'t>(&self, g: &Var<'t, T>) -> Result<Var<'t, T>> {
        g.linear(&self.down_cells2, &[2, self.coarse.ny, self.coarse.nx])
    }

    /// Reduced faces to a `[2, h, w]` centered image.
    pub fn coarse_centered<'t>(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        w.linear(&self.coarse_centered, &[2, self.coarse.ny, self.coarse.nx])
    }

    /// Fine faces to a `[2, H, W]` centered image.
    pub fn fine_centered<'t>(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        w.linear(&self.fine_centered, &[2, self.fine.ny, self.fine.nx])
    }

    /// Linear up-sampling of a `[2, h, w]` image to `[2, H, W]`.
    pub fn up<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(&self.up2, &[2, self.fine.ny, self.fine.nx])
    }
}

/// Per-simulation reduced solver and conditioning scalars.
pub struct SimContext<T: Real> {
    pub solver: Solver<T>,
    pub conditioning: Vec<f64>,
    pub has_marker: bool,
}

impl<T: Real> SimContext<T> {
    pub fn new(config: &ScenarioConfig, meta: &SimulationMeta) -> Result<Self> {
        let solver = Solver::new(config.coarse_domain()?, config.physics(meta, true)?)?;
        Ok(Self { solver, conditioning: config.conditioning(meta), has_marker: config.has_marker() })
    }
}

/// Fine frames of one window as tensors.
#[derive(Clone, Debug)]
pub struct WindowData<T: Real> {
    /// Compact fine face vectors.
    pub velocity: Vec<Tensor<T>>,
    pub marker: Vec<Option<Tensor<T>>>,
    /// Two-channel fine force on cells.
    pub force: Vec<Option<Tensor<T>>>,
}

impl<T: Real> WindowData<T> {
    pub fn from_frames(frames: &[Frame]) -> Self {
        let t = |v: &[f64]| Tensor::from_parts(vec![v.len()], v.iter().map(|&x| T::cast(x)).collect());
        Self {
            velocity: frames.iter().map(|f| t(&f.velocity.to_compact())).collect(),
            marker: frames.iter().map(|f| f.marker.as_ref().map(|m| t(&m.data))).collect(),
            force: frames.iter().map(|f| f.force.as_ref().map(|g| t(&g.data))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }
}

/// Parameters of every network of a model set on one tape.
pub struct Bound<'t, T: Real> {
    pub vars: BTreeMap<ModelRole, Vec<LayerVars<'t, T>>>,
}

/// States produced by a rollout.
pub struct Rollout<'t, T: Real> {
    /// Latent states, index 0 being the encoded initial frame.
    pub latent: Vec<Var<'t, T>>,
    /// Reduced markers alongside the latent states.
    pub markers: Vec<Option<Var<'t, T>>>,
    /// Decoded `[2, H, W]` frames for steps `1..=steps`.
    pub decoded: Vec<Var<'t, T>>,
}

/// Per-step quantities entering the two-term loss.
pub struct RolloutRecord<'t, T: Real> {
    /// `r̂_{t+i}`, reduced faces.
    pub latent: Vec<Var<'t, T>>,
    /// `f̂_{t+i}`, `[2, H, W]`.
    pub decoded: Vec<Var<'t, T>>,
    /// `f_{t+i}`, `[2, H, W]`.
    pub reference: Vec<Var<'t, T>>,
    /// `ℰ(s_{t+i})`, reduced faces.
    pub encoded: Vec<Var<'t, T>>,
}

pub struct Pipeline<'a, T: Real> {
    pub kind: PipelineKind,
    pub models: &'a ModelSet<T>,
    pub transfer: &'a Transfer<T>,
    pub context: &'a SimContext<T>,
}

impl<'a, T: Real> Pipeline<'a, T> {
    pub fn new(
        kind: PipelineKind,
        models: &'a ModelSet<T>,
        transfer: &'a Transfer<T>,
        context: &'a SimContext<T>,
    ) -> Result<Self> {
        for role in kind.required_roles() {
            models.require(role)?;
        }
        Ok(Self { kind, models, transfer, context })
    }

    /// Binds every network; roles in `trainable` become parameters, the rest
    /// constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: &[ModelRole]) -> Bound<'t, T> {
        let vars = self
            .models
            .networks
            .iter()
            .map(|(role, net)| {
                let v = if trainable.contains(role) { net.bind(tape) } else { net.bind_frozen(tape) };
                (*role, v)
            })
            .collect();
        Bound { vars }
    }

    fn apply<'t>(&self, b: &Bound<'t, T>, role: ModelRole, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let net = self.models.require(role)?;
        let vars = b.vars.get(&role).ok_or_else(|| Error::IncompatibleCheckpoint(format!("{} not bound", role.name())))?;
        net.forward(vars, x)
    }

    /// `[2 + extra, h, w]` network input for a centered reduced velocity.
    fn features<'t>(&self, x: &Var<'t, T>, marker: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let c = &self.transfer.coarse;
        let x = match (self.context.has_marker, marker) {
            (true, Some(m)) => Var::concat_channels(&[x, &m.reshape(&[1, c.ny, c.nx])?])?,
            (true, None) => {
                let zero = x.tape().constant(Tensor::zeros(&[1, c.ny, c.nx]));
                Var::concat_channels(&[x, &zero])?
            }
            (false, _) => x.clone(),
        };
        with_conditioning(&x, &self.context.conditioning)
    }

    /// `state + faces(net(features(state)))`.
    fn residual<'t>(
        &self,
        b: &Bound<'t, T>,
        role: ModelRole,
        w: &Var<'t, T>,
        marker: Option<&Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let x = self.features(&self.transfer.coarse_centered(w)?, marker)?;
        let y = self.apply(b, role, &x)?;
        w.add(&self.context.solver.centered_to_faces(&y.reshape(&[y.len()])?)?)
    }

    /// Reduced marker of a fine frame.
    pub fn reduce_marker<'t>(&self, tape: &'t Tape<T>, marker: Option<&Tensor<T>>) -> Result<Option<Var<'t, T>>> {
        marker.map(|m| self.transfer.down_marker(&tape.constant(m.clone()))).transpose()
    }

    /// Latent state of a fine frame: `lerp(f)` plus the encoder correction.
    pub fn encode<'t>(
        &self,
        b: &Bound<'t, T>,
        velocity: &Var<'t, T>,
        marker: Option<&Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let s = self.transfer.down_faces(velocity)?;
        match self.kind {
            PipelineKind::Ato(a) if !a.no_encoder => self.residual(b, ModelRole::Encoder, &s, marker),
            _ => Ok(s),
        }
    }

    /// Reduced force as a face vector. The encoder is shared with velocity.
    pub fn encode_force<'t>(&self, b: &Bound<'t, T>, force: &Var<'t, T>) -> Result<Var<'t, T>> {
        let g = self.transfer.down_centered(force)?;
        let solver = &self.context.solver;
        match self.kind {
            PipelineKind::Ato(a) if !a.no_encoder && !a.lerp_forces => {
                let y = self.apply(b, ModelRole::Encoder, &self.features(&g, None)?)?;
                solver.centered_to_faces(&g.add(&y)?.reshape(&[g.len()])?)
            }
            _ => solver.centered_to_faces(&g.reshape(&[g.len()])?),
        }
    }

    /// One reduced physics step, by the solver or by the Dil-ResNet.
    pub fn advance<'t>(
        &self,
        b: &Bound<'t, T>,
        state: &StateVar<'t, T>,
        force: Option<&Var<'t, T>>,
    ) -> Result<StateVar<'t, T>> {
        let solver = &self.context.solver;
        let learned = matches!(self.kind, PipelineKind::DilResnet | PipelineKind::Ato(Ablations { no_solver: true, .. }));
        if !learned {
            return solver.step_var(state, force);
        }
        let marker = state.marker.as_ref().map(|m| solver.advect_cells(m, &state.velocity)).transpose()?;
        let w = self.residual(b, ModelRole::DilResnet, &state.velocity, state.marker.as_ref())?;
        Ok(StateVar { velocity: solver.apply_boundary(&w)?, marker })
    }

    /// Adjustment or corrector applied after a physics step.
    pub fn correct<'t>(&self, b: &Bound<'t, T>, state: StateVar<'t, T>) -> Result<StateVar<'t, T>> {
        let role = match self.kind {
            PipelineKind::Ato(a) if !a.no_adjustment => ModelRole::Adjustment,
            PipelineKind::Sol => ModelRole::SolCorrector,
            _ => return Ok(state),
        };
        let velocity = self.residual(b, role, &state.velocity, state.marker.as_ref())?;
        Ok(StateVar { velocity, marker: state.marker })
    }

    /// Fine `[2, H, W]` velocity from a latent state: linear up-sampling plus
    /// the decoder (or super-resolution) correction when one is present.
    pub fn decode<'t>(&self, b: &Bound<'t, T>, latent: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.transfer.coarse_centered(latent)?;
        let up = self.transfer.up(&x)?;
        let role = match self.kind {
            PipelineKind::Ato(_) => Some(ModelRole::Decoder),
            _ if self.models.get(ModelRole::SuperResolution).is_some() => Some(ModelRole::SuperResolution),
            _ => None,
        };
        match role {
            Some(r) => up.add(&self.apply(b, r, &x)?),
            None => Ok(up),
        }
    }

    /// Encodes frame 0 of `data` and advances `steps` times, decoding every
    /// new latent state. Forces are taken from the frames.
    pub fn rollout<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        data: &WindowData<T>,
        steps: usize,
    ) -> Result<Rollout<'t, T>> {
        if data.is_empty() {
            return Err(Error::shape("rollout", "window has no frames"));
        }
        let marker = self.reduce_marker(tape, data.marker[0].as_ref())?;
        let s0 = self.encode(b, &tape.constant(data.velocity[0].clone()), marker.as_ref())?;
        let mut state = StateVar { velocity: s0, marker };
        let mut out = Rollout {
            latent: vec![state.velocity.clone()],
            markers: vec![state.marker.clone()],
            decoded: Vec::with_capacity(steps),
        };
        for i in 0..steps {
            let force = match data.force.get(i).and_then(Option::as_ref) {
                Some(g) => Some(self.encode_force(b, &tape.constant(g.clone()))?),
                None => None,
            };
            let r = self.advance(b, &state, force.as_ref())?;
            state = self.correct(b, r)?;
            if !state.velocity.value().all_finite() {
                return Err(Error::RolloutDiverged { step: i });
            }
            out.decoded.push(self.decode(b, &state.velocity)?);
            out.latent.push(state.velocity.clone());
            out.markers.push(state.marker.clone());
        }
        Ok(out)
    }

    /// Rollout over a window of `steps + 1` frames together with the
    /// references and encoder targets of frames `1..=steps`.
    pub fn record<'t>(
        &self,
        b: &Bound<'t, T>,
        tape: &'t Tape<T>,
        data: &WindowData<T>,
        steps: usize,
    ) -> Result<RolloutRecord<'t, T>> {
        if data.len() < steps + 1 {
            return Err(Error::shape("rollout", format!("{} frames for {steps} steps", data.len())));
        }
        let roll = self.rollout(b, tape, data, steps)?;
        let mut reference = Vec::with_capacity(steps);
        let mut encoded = Vec::with_capacity(steps);
        for i in 1..=steps {
            let f = tape.constant(data.velocity[i].clone());
            reference.push(self.transfer.fine_centered(&f)?);
            let m = self.reduce_marker(tape, data.marker[i].as_ref())?;
            encoded.push(self.encode(b, &f, m.as_ref())?);
        }
        Ok(RolloutRecord { latent: roll.latent[1..].to_vec(), decoded: roll.decoded, reference, encoded })
    }
}

/// Joint-model rollout record with every network trainable.
pub fn rollout_ato<'t, T: Real>(
    tape: &'t Tape<T>,
    models: &ModelSet<T>,
    ablations: Ablations,
    transfer: &Transfer<T>,
    context: &SimContext<T>,
    data: &WindowData<T>,
    steps: usize,
) -> Result<(RolloutRecord<'t, T>, Bound<'t, T>)> {
    let p = Pipeline::new(PipelineKind::Ato(ablations), models, transfer, context)?;
    let roles: Vec<ModelRole> = models.networks.keys().copied().collect();
    let b = p.bind(tape, &roles);
    let rec = p.record(&b, tape, data, steps)?;
    Ok((rec, b))
}
