//! Reference data for the four scenarios: Karman vortex street, decaying and
//! forced turbulence, and a buoyant smoke plume.
//!
//! All simulations run the fine solver in 64-bit precision. Stored frames
//! are rounded to 32-bit values at capture so a saved dataset reloads
//! bit-identically.

mod dataset;
mod force;
mod init;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{centered_to_staggered, BoundarySpec, CenteredGrid, Domain, Side, StaggeredGrid};
use crate::nn::{Padding, REYNOLDS_SCALE};
use crate::rng::derive_seed;
use crate::solver::{PhysicsParams, SimState, Solver};

pub use dataset::{decode_frames, encode_frames, Dataset, Frame, Simulation, SimulationMeta, Split, DATASET_VERSION, FRAME_MAGIC};
pub use force::{synthesize_force, ForceParams, ForceRanges, ForceTerm, FORCE_TERMS, WAVE_NUMBERS};
pub use init::{curl_of_corner_stream, disc_mask, init_random_vortices, smoke_marker};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Karman,
    DecayingTurbulence,
    ForcedTurbulence,
    SmokePlume,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Karman => "karman",
            ScenarioKind::DecayingTurbulence => "decaying_turbulence",
            ScenarioKind::ForcedTurbulence => "forced_turbulence",
            ScenarioKind::SmokePlume => "smoke_plume",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KarmanParams {
    /// One simulation per entry, cycled when there are more simulations.
    pub reynolds: Vec<f64>,
    /// Inflow speed through the bottom side.
    #[serde(default = "default_inflow")]
    pub inflow: f64,
    /// Obstacle center as fractions of the domain extent.
    #[serde(default = "default_obstacle_center")]
    pub obstacle_center: [f64; 2],
    /// Obstacle diameter in fine cells.
    #[serde(default = "default_obstacle_diameter")]
    pub obstacle_diameter: f64,
    /// Amplitude of the symmetry-breaking noise, relative to the inflow.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
}

fn default_inflow() -> f64 {
    0.5
}
fn default_obstacle_center() -> [f64; 2] {
    [0.5, 0.25]
}
fn default_obstacle_diameter() -> f64 {
    8.0
}
fn default_perturbation() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmokeParams {
    #[serde(default = "default_buoyancy")]
    pub buoyancy: f64,
    /// Marker disc radius as a fraction of the smaller extent.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_smoke_center")]
    pub center: [f64; 2],
    /// Close the top side as well.
    #[serde(default)]
    pub closed: bool,
}

fn default_buoyancy() -> f64 {
    0.25
}
fn default_radius() -> f64 {
    0.12
}
fn default_smoke_center() -> [f64; 2] {
    [0.5, 0.25]
}

impl Default for SmokeParams {
    fn default() -> Self {
        Self { buoyancy: 0.25, radius: 0.12, center: [0.5, 0.25], closed: false }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_reduction() -> usize {
    4
}
fn default_dx() -> f64 {
    1.0
}
fn default_validation_fraction() -> f64 {
    0.05
}

/// Data-generation recipe. Written as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub kind: ScenarioKind,
    /// Fine `[nx, ny]`.
    pub resolution: [usize; 2],
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Fine cell spacing.
    #[serde(default = "default_dx")]
    pub dx: f64,
    pub dt: f64,
    /// Viscosity. Karman derives it from the Reynolds number instead.
    #[serde(default)]
    pub nu: Option<f64>,
    /// Stored frames per simulation.
    pub frames: usize,
    /// Steps simulated before the first stored frame.
    #[serde(default)]
    pub warmup: usize,
    pub simulations: usize,
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub karman: Option<KarmanParams>,
    #[serde(default)]
    pub forced: Option<ForceRanges>,
    #[serde(default)]
    pub smoke: Option<SmokeParams>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config("version", format!("unsupported version {}", self.version)));
        }
        let [nx, ny] = self.resolution;
        if nx == 0 || ny == 0 {
            return Err(Error::config("resolution", "must be positive"));
        }
        if self.reduction == 0 || nx % self.reduction != 0 || ny % self.reduction != 0 {
            return Err(Error::config("reduction", format!("{} does not divide {nx}x{ny}", self.reduction)));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::config("dx", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if let Some(nu) = self.nu {
            if !(nu >= 0.0 && nu.is_finite()) {
                return Err(Error::config("nu", "must be non-negative"));
            }
        }
        if self.frames == 0 {
            return Err(Error::config("frames", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction", "must lie in [0, 1]"));
        }
        match self.kind {
            ScenarioKind::Karman => {
                let k = self.karman.as_ref().ok_or_else(|| Error::config("karman", "required for kind karman"))?;
                if k.reynolds.is_empty() || k.reynolds.iter().any(|&r| !(r > 0.0)) {
                    return Err(Error::config("karman.reynolds", "needs at least one positive value"));
                }
                if !(k.inflow > 0.0) || !(k.obstacle_diameter > 0.0) {
                    return Err(Error::config("karman", "inflow and obstacle_diameter must be positive"));
                }
            }
            ScenarioKind::ForcedTurbulence => {
                let f = self.forced.as_ref().ok_or_else(|| Error::config("forced", "required for forced_turbulence"))?;
                if f.wave_numbers.is_empty() || f.terms == 0 {
                    return Err(Error::config("forced", "needs wave numbers and at least one term"));
                }
            }
            ScenarioKind::SmokePlume => {
                let s = self.smoke.as_ref().ok_or_else(|| Error::config("smoke", "required for smoke_plume"))?;
                if !(s.radius > 0.0 && s.radius < 0.5) {
                    return Err(Error::config("smoke.radius", "must lie in (0, 0.5)"));
                }
            }
            ScenarioKind::DecayingTurbulence => {}
        }
        Ok(())
    }

    pub fn boundary(&self) -> BoundarySpec {
        match self.kind {
            ScenarioKind::DecayingTurbulence | ScenarioKind::ForcedTurbulence => BoundarySpec::periodic(),
            ScenarioKind::Karman => {
                let u = self.karman.as_ref().map_or(default_inflow(), |k| k.inflow);
                BoundarySpec {
                    left: Side::Closed,
                    right: Side::Closed,
                    bottom: Side::Inflow { vx: 0.0, vy: u },
                    top: Side::Open,
                }
            }
            ScenarioKind::SmokePlume => {
                let closed = self.smoke.as_ref().is_some_and(|s| s.closed);
                BoundarySpec { top: if closed { Side::Closed } else { Side::Open }, ..BoundarySpec::closed() }
            }
        }
    }

    pub fn fine_domain(&self) -> Result<Domain> {
        Domain::new(self.resolution[0], self.resolution[1], self.dx, self.boundary())
    }

    pub fn coarse_domain(&self) -> Result<Domain> {
        self.fine_domain()?.coarsen(self.reduction)
    }

    /// Circular for periodic scenarios, zero otherwise.
    pub fn padding(&self) -> Padding {
        if self.boundary().periodic_x() {
            Padding::Circular
        } else {
            Padding::Zero
        }
    }

    /// Input channels beyond the two velocity components: the Reynolds
    /// number for Karman, the reduced marker for smoke.
    pub fn extra_inputs(&self) -> usize {
        match self.kind {
            ScenarioKind::Karman | ScenarioKind::SmokePlume => 1,
            _ => 0,
        }
    }

    pub fn has_marker(&self) -> bool {
        self.kind == ScenarioKind::SmokePlume
    }

    pub fn has_force(&self) -> bool {
        self.kind == ScenarioKind::ForcedTurbulence
    }

    /// Viscosity of one simulation.
    pub fn viscosity(&self, reynolds: Option<f64>) -> f64 {
        match (self.kind, &self.karman, reynolds) {
            (ScenarioKind::Karman, Some(k), Some(re)) => k.inflow * k.obstacle_diameter * self.dx / re,
            _ => self.nu.unwrap_or(match self.kind {
                ScenarioKind::SmokePlume => 0.0,
                _ => 0.1,
            }),
        }
    }

    fn obstacle(&self, domain: &Domain) -> Option<CenteredGrid> {
        let k = self.karman.as_ref().filter(|_| self.kind == ScenarioKind::Karman)?;
        let [lx, ly] = domain.extent();
        let center = [k.obstacle_center[0] * lx, k.obstacle_center[1] * ly];
        Some(disc_mask(domain, center, k.obstacle_diameter * self.dx))
    }

    /// Solver parameters of one simulation at fine or reduced resolution.
    pub fn physics(&self, meta: &SimulationMeta, coarse: bool) -> Result<PhysicsParams> {
        let domain = if coarse { self.coarse_domain()? } else { self.fine_domain()? };
        let mut p = PhysicsParams::new(meta.nu, self.dt);
        if let Some(mask) = self.obstacle(&domain) {
            p = p.with_obstacle(mask);
        }
        if let Some(s) = self.smoke.as_ref().filter(|_| self.has_marker()) {
            p = p.with_buoyancy(s.buoyancy);
        }
        Ok(p)
    }

    pub fn solver(&self, meta: &SimulationMeta, coarse: bool) -> Result<Solver<f64>> {
        let domain = if coarse { self.coarse_domain()? } else { self.fine_domain()? };
        Solver::new(domain, self.physics(meta, coarse)?)
    }

    /// Conditioning scalars fed to the networks for one simulation.
    pub fn conditioning(&self, meta: &SimulationMeta) -> Vec<f64> {
        match (self.kind, meta.reynolds) {
            (ScenarioKind::Karman, Some(re)) => vec![re * REYNOLDS_SCALE],
            _ => Vec::new(),
        }
    }

    /// Simulation indices held out for validation.
    pub fn validation_indices(&self) -> Vec<usize> {
        let n = self.simulations;
        let n_val = (self.validation_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::stream(self.seed, &[0x73_706c_6974]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut val = order[..n_val.min(n)].to_vec();
        val.sort_unstable();
        val
    }
}

/// Field name from a TOML error, e.g. `kind` for "missing field `kind`".
fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    let mut parts = msg.split('`');
    match (parts.next(), parts.next()) {
        (Some(_), Some(name)) if !name.is_empty() => name.to_string(),
        _ => "config".to_string(),
    }
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// A frame rounded to 32-bit values.
fn capture(state: &SimState, force: Option<&CenteredGrid>) -> Result<Frame> {
    let d = state.velocity.domain();
    let velocity = StaggeredGrid::from_parts(&d, quantize(&state.velocity.u), quantize(&state.velocity.v))?;
    let marker = state.marker.as_ref().map(|m| CenteredGrid::from_data(&d, 1, quantize(&m.data))).transpose()?;
    let force = force.map(|g| CenteredGrid::from_data(&d, 2, quantize(&g.data))).transpose()?;
    Ok(Frame { velocity, marker, force })
}

/// Runs simulation `index` of a dataset.
pub fn generate_simulation(config: &ScenarioConfig, index: usize) -> Result<Simulation> {
    config.validate()?;
    let seed = derive_seed(config.seed, &[index as u64]);
    let domain = config.fine_domain()?;
    let reynolds = config.karman.as_ref().filter(|_| config.kind == ScenarioKind::Karman).map(|k| k.reynolds[index % k.reynolds.len()]);
    let force = config.forced.as_ref().filter(|_| config.has_force()).map(|r| {
        ForceParams::sample(r, &mut crate::rng::stream(seed, &[0x666f_7263]))
    });
    let split = if config.validation_indices().contains(&index) { Split::Validation } else { Split::Train };
    let mut meta = SimulationMeta {
        index,
        seed,
        nu: config.viscosity(reynolds),
        reynolds,
        force,
        frames: config.frames,
        split,
    };
    let solver = config.solver(&meta, false)?;
    let mut state = initial_state(config, &domain, seed, solver.params())?;

    let force_at = |step: usize| {
        meta.force.as_ref().map(|p| synthesize_force(p, &domain, step as f64 * config.dt))
    };
    let total = config.warmup + config.frames;
    let mut frames = Vec::with_capacity(config.frames);
    for step in 0..total {
        let g = force_at(step);
        if step >= config.warmup {
            frames.push(capture(&state, g.as_ref())?);
        }
        if step + 1 == total {
            break;
        }
        let faces = g.as_ref().map(centered_to_staggered);
        state = solver
            .step(&state, faces.as_ref())
            .map_err(|e| Error::SimulationFailed { step, source: Box::new(e) })?;
        if !state.velocity.max_abs().is_finite() {
            return Err(Error::SimulationFailed { step, source: Box::new(Error::RolloutDiverged { step }) });
        }
    }
    meta.frames = frames.len();
    Ok(Simulation { meta, frames })
}

fn initial_state(config: &ScenarioConfig, domain: &Domain, seed: u64, params: &PhysicsParams) -> Result<SimState> {
    match config.kind {
        ScenarioKind::DecayingTurbulence | ScenarioKind::ForcedTurbulence => {
            Ok(SimState::new(init_random_vortices(seed, domain)?))
        }
        ScenarioKind::Karman => {
            let k = config.karman.as_ref().expect("validated");
            let mut rng = crate::rng::stream(seed, &[0x6b61_726d]);
            let amp = k.perturbation * k.inflow;
            let mut v = StaggeredGrid::from_fn(domain, |_, _| 0.0, |_, _| k.inflow);
            for u in v.u.iter_mut() {
                *u = amp * rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
            let (v, _) = crate::solver::make_incompressible(&v, params)?;
            Ok(SimState::new(v))
        }
        ScenarioKind::SmokePlume => {
            let s = config.smoke.as_ref().expect("validated");
            let marker = smoke_marker(seed, domain, s.center, s.radius);
            Ok(SimState::new(StaggeredGrid::zeros(domain)).with_marker(marker))
        }
    }
}

/// Runs every simulation of the config, in parallel.
pub fn generate(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let simulations =
        (0..config.simulations).into_par_iter().map(|i| generate_simulation(config, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: config.clone(), simulations })
}
