//! Incompressible Navier-Stokes integrator on a MAC grid.
//!
//! One [`Solver`] step applies, in order: marker advection, velocity
//! self-advection (both semi-Lagrangian), explicit diffusion, external force
//! and buoyancy, boundary/obstacle masking, and a Chorin pressure projection
//! solved with unpreconditioned conjugate gradients. Every stage is a tape
//! primitive or a composition of them, so a rollout can be differentiated with
//! respect to its initial state and any force input.
//!
//! Velocities are carried as compact face vectors (see [`Domain::faces`]),
//! markers as flat cell vectors.

mod api;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{
    centered_to_staggered_matrix, divergence_matrix, laplacian_matrix, resample_matrix, sample_matrix,
    staggered_to_centered_matrix, AxisMode, CenteredGrid, Domain, Lattice, Side, SparseMatrix, StaggeredGrid,
};

pub use api::{advect_semi_lagrangian, apply_buoyancy, apply_forces, diffuse_explicit, make_incompressible};

/// Physical and numerical parameters of a simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    /// Kinematic viscosity.
    pub nu: f64,
    /// Density. Only scales the reported pressure.
    pub rho: f64,
    pub dt: f64,
    /// Upward acceleration per unit marker density.
    pub buoyancy_factor: f64,
    /// Solid cells are 1, fluid cells 0.
    #[serde(skip)]
    pub obstacle_mask: Option<CenteredGrid>,
    /// Relative residual at which CG stops; `None` picks a precision default.
    pub cg_tolerance: Option<f64>,
    pub cg_max_iterations: usize,
}

impl PhysicsParams {
    pub fn new(nu: f64, dt: f64) -> Self {
        Self {
            nu,
            rho: 1.0,
            dt,
            buoyancy_factor: 0.0,
            obstacle_mask: None,
            cg_tolerance: None,
            cg_max_iterations: 2000,
        }
    }

    pub fn with_buoyancy(mut self, factor: f64) -> Self {
        self.buoyancy_factor = factor;
        self
    }

    pub fn with_obstacle(mut self, mask: CenteredGrid) -> Self {
        self.obstacle_mask = Some(mask);
        self
    }

    pub fn validate(&self, domain: &Domain) -> Result<()> {
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::config("nu", format!("must be finite and non-negative, got {}", self.nu)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("rho", "must be positive"));
        }
        if self.cg_max_iterations == 0 {
            return Err(Error::config("cg_max_iterations", "must be at least 1"));
        }
        if let Some(mask) = &self.obstacle_mask {
            if (mask.nx, mask.ny, mask.channels) != (domain.nx, domain.ny, 1) {
                return Err(Error::InvalidShape(format!(
                    "obstacle mask {}x{}x{} on a {}x{} domain",
                    mask.channels, mask.nx, mask.ny, domain.nx, domain.ny
                )));
            }
            if mask.data.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::config("obstacle_mask", "must be binary"));
            }
        }
        Ok(())
    }

    /// Explicit diffusion number `ν·dt/dx²`; above 0.25 the scheme is unstable.
    pub fn diffusion_number(&self, dx: f64) -> f64 {
        self.nu * self.dt / (dx * dx)
    }
}

/// Velocity (and optional marker) at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub velocity: StaggeredGrid,
    pub marker: Option<CenteredGrid>,
    /// Pressure of the last projection, in physical units.
    pub pressure: Option<CenteredGrid>,
    pub time: usize,
}

impl SimState {
    pub fn new(velocity: StaggeredGrid) -> Self {
        Self { velocity, marker: None, pressure: None, time: 0 }
    }

    pub fn with_marker(mut self, marker: CenteredGrid) -> Self {
        self.marker = Some(marker);
        self
    }
}

/// Tape-resident state: compact face velocity and optional cell marker.
#[derive(Clone, Debug)]
pub struct StateVar<'t, T: Real> {
    pub velocity: Var<'t, T>,
    pub marker: Option<Var<'t, T>>,
}

fn shared<T: Real>(m: SparseMatrix<f64>) -> Arc<SparseMatrix<T>> {
    Arc::new(m.cast())
}

fn tensor<T: Real>(v: &[f64]) -> Tensor<T> {
    Tensor::from_parts(vec![v.len()], v.iter().map(|&x| T::cast(x)).collect())
}

fn norm(v: &[impl Real]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Same lattice measured in index units.
fn unit(l: Lattice) -> Lattice {
    Lattice { dx: 1.0, ..l }
}

/// The integrator for one domain, with all linear stencils assembled once.
pub struct Solver<T: Real> {
    domain: Domain,
    params: PhysicsParams,
    tolerance: f64,
    floating: bool,
    fluid_cells: usize,
    has_obstacle: bool,
    divergence: Arc<SparseMatrix<T>>,
    /// `D·M·Dᵀ`: positive semi-definite pressure operator.
    poisson: Arc<SparseMatrix<T>>,
    /// `M·Dᵀ`: maps pressure to the velocity correction (`−∇p` on free faces).
    correction: Arc<SparseMatrix<T>>,
    /// `I + ν·dt·L` on both face components.
    diffusion: Arc<SparseMatrix<T>>,
    /// `v` interpolated at `u` faces, and `u` at `v` faces.
    cross_u: Arc<SparseMatrix<T>>,
    cross_v: Arc<SparseMatrix<T>>,
    /// Face velocity averaged to cell centers, x and y parts.
    center_x: Arc<SparseMatrix<T>>,
    center_y: Arc<SparseMatrix<T>>,
    /// Marker to `v` faces, pre-scaled by `dt·buoyancy_factor`.
    buoyancy: Arc<SparseMatrix<T>>,
    /// Two-channel centered field to faces.
    to_faces: Arc<SparseMatrix<T>>,
    keep: Tensor<T>,
    fixed: Tensor<T>,
    fluid: Tensor<T>,
    u_pos: [Tensor<T>; 2],
    v_pos: [Tensor<T>; 2],
    cell_pos: [Tensor<T>; 2],
}

impl<T: Real> Solver<T> {
    pub fn new(domain: Domain, params: PhysicsParams) -> Result<Self> {
        params.validate(&domain)?;
        let dn = params.diffusion_number(domain.dx);
        if dn > 0.25 {
            log::warn!("explicit diffusion is unstable: nu*dt/dx^2 = {dn:.3} > 0.25");
        }
        let (nx, ny) = (domain.nx, domain.ny);
        let (ul, vl, cl) = (domain.u_lattice(), domain.v_lattice(), domain.cell_lattice());
        let (nu, nv, faces, cells) = (ul.len(), vl.len(), domain.faces(), domain.cells());

        let solid: Vec<bool> = match &params.obstacle_mask {
            Some(m) => m.data.iter().map(|&x| x == 1.0).collect(),
            None => vec![false; cells],
        };
        let has_obstacle = solid.iter().any(|&s| s);

        // Faces whose value is prescribed: closed or inflow boundaries and
        // faces touching a solid cell.
        let mut keep = vec![1.0; faces];
        let mut fixed = vec![0.0; faces];
        let b = domain.boundary;
        let mut prescribe = |f: usize, side: Side, normal: fn(f64, f64) -> f64| match side {
            Side::Closed => keep[f] = 0.0,
            Side::Inflow { vx, vy } => {
                keep[f] = 0.0;
                fixed[f] = normal(vx, vy);
            }
            Side::Open | Side::Periodic => {}
        };
        if !b.periodic_x() {
            for j in 0..ny {
                prescribe(j * ul.n[0], b.left, |vx, _| vx);
                prescribe(j * ul.n[0] + nx, b.right, |vx, _| vx);
            }
        }
        if !b.periodic_y() {
            for i in 0..nx {
                prescribe(nu + i, b.bottom, |_, vy| vy);
                prescribe(nu + ny * nx + i, b.top, |_, vy| vy);
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                if solid[j * nx + i] {
                    let right = if i + 1 == ul.n[0] { 0 } else { i + 1 };
                    let top = if j + 1 == vl.n[1] { 0 } else { j + 1 };
                    for f in [j * ul.n[0] + i, j * ul.n[0] + right, nu + j * nx + i, nu + top * nx + i] {
                        keep[f] = 0.0;
                        fixed[f] = 0.0;
                    }
                }
            }
        }

        let div = divergence_matrix(&domain);
        let free = SparseMatrix::from_triplets(
            faces,
            faces,
            &keep.iter().enumerate().map(|(f, &k)| (f, f, k)).collect::<Vec<_>>(),
        );
        let correction = free.matmul(&div.transpose());
        let poisson = div.matmul(&correction);

        let lap = SparseMatrix::block_diag(&laplacian_matrix(&ul), &laplacian_matrix(&vl));
        let diffusion = SparseMatrix::identity(faces).combine(1.0, &lap, params.nu * params.dt);

        let (uxs, uys) = ul.positions();
        let (vxs, vys) = vl.positions();
        let cross_u = SparseMatrix::hstack(&SparseMatrix::from_triplets(nu, nu, &[]), &sample_matrix(&vl, &uxs, &uys));
        let cross_v = SparseMatrix::hstack(&sample_matrix(&ul, &vxs, &vys), &SparseMatrix::from_triplets(nv, nv, &[]));

        let centers = staggered_to_centered_matrix(&domain);
        let split = |lo: usize| {
            let t: Vec<_> = centers
                .triplets()
                .into_iter()
                .filter(|&(r, _, _)| r >= lo && r < lo + cells)
                .map(|(r, c, v)| (r - lo, c, v))
                .collect();
            SparseMatrix::from_triplets(cells, faces, &t)
        };
        let (center_x, center_y) = (split(0), split(cells));

        let to_v = resample_matrix(&cl, &vl, [AxisMode::Linear, AxisMode::Linear]);
        let buoyancy = SparseMatrix::vstack(&SparseMatrix::from_triplets(nu, cells, &[]), &to_v)
            .scaled(params.dt * params.buoyancy_factor);

        let positions = |l: Lattice| {
            let (x, y) = unit(l).positions();
            [tensor(&x), tensor(&y)]
        };
        let fluid: Vec<f64> = solid.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
        let tolerance = params.cg_tolerance.unwrap_or_else(T::default_cg_tolerance);
        Ok(Self {
            floating: b.pressure_is_floating(),
            fluid_cells: solid.iter().filter(|&&s| !s).count(),
            has_obstacle,
            tolerance,
            divergence: shared(div),
            poisson: shared(poisson),
            correction: shared(correction),
            diffusion: shared(diffusion),
            cross_u: shared(cross_u),
            cross_v: shared(cross_v),
            center_x: shared(center_x),
            center_y: shared(center_y),
            buoyancy: shared(buoyancy),
            to_faces: shared(centered_to_staggered_matrix(&domain)),
            keep: tensor(&keep),
            fixed: tensor(&fixed),
            fluid: tensor(&fluid),
            u_pos: positions(ul),
            v_pos: positions(vl),
            cell_pos: positions(cl),
            domain,
            params,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn params(&self) -> &PhysicsParams {
        &self.params
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Cell-major `1.0` for fluid and `0.0` for solid cells.
    pub fn fluid_mask(&self) -> &Tensor<T> {
        &self.fluid
    }

    fn check_faces(&self, op: &'static str, w: &Var<'_, T>) -> Result<()> {
        if w.len() != self.domain.faces() {
            return Err(Error::shape(op, format!("{} face values, domain has {}", w.len(), self.domain.faces())));
        }
        Ok(())
    }

    fn check_cells(&self, op: &'static str, m: &Var<'_, T>) -> Result<()> {
        if m.is_empty() || !m.len().is_multiple_of(self.domain.cells()) {
            return Err(Error::shape(op, format!("{} values on {} cells", m.len(), self.domain.cells())));
        }
        Ok(())
    }

    /// Back-traced sample positions `x − dt·vel`, in index units of the lattice.
    fn backtrace<'t>(
        &self,
        pos: &[Tensor<T>; 2],
        vx: &Var<'t, T>,
        vy: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = vx.tape();
        let s = T::cast(self.params.dt / self.domain.dx);
        Ok((tape.constant(pos[0].clone()).sub(&vx.scale(s))?, tape.constant(pos[1].clone()).sub(&vy.scale(s))?))
    }

    /// Semi-Lagrangian transport of a (possibly multi-channel) cell field.
    pub fn advect_cells<'t>(&self, field: &Var<'t, T>, velocity: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("advect", velocity)?;
        self.check_cells("advect", field)?;
        let cells = self.domain.cells();
        let vx = velocity.linear(&self.center_x, &[cells])?;
        let vy = velocity.linear(&self.center_y, &[cells])?;
        let (xs, ys) = self.backtrace(&self.cell_pos, &vx, &vy)?;
        let out = field.bilinear_sample(&unit(self.domain.cell_lattice()), &xs, &ys)?;
        out.reshape(field.shape())
    }

    /// Semi-Lagrangian self-advection; each face component back-traces from
    /// its own face position.
    pub fn advect_velocity<'t>(&self, velocity: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("advect", velocity)?;
        let (nu, faces) = (self.domain.nu(), self.domain.faces());
        let nv = faces - nu;
        let u = velocity.slice(0, nu)?;
        let v = velocity.slice(nu, faces)?;
        let (xs, ys) = self.backtrace(&self.u_pos, &u, &velocity.linear(&self.cross_u, &[nu])?)?;
        let new_u = u.bilinear_sample(&unit(self.domain.u_lattice()), &xs, &ys)?.reshape(&[nu])?;
        let (xs, ys) = self.backtrace(&self.v_pos, &velocity.linear(&self.cross_v, &[nv])?, &v)?;
        let new_v = v.bilinear_sample(&unit(self.domain.v_lattice()), &xs, &ys)?.reshape(&[nv])?;
        Var::concat(&[&new_u, &new_v])
    }

    /// `w + ν·dt·∇²w` per face component.
    pub fn diffuse<'t>(&self, velocity: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("diffuse", velocity)?;
        if self.params.nu == 0.0 {
            return Ok(velocity.clone());
        }
        velocity.linear(&self.diffusion, &[self.domain.faces()])
    }

    /// `w + dt·g` for a face-vector force `g`.
    pub fn apply_force<'t>(&self, velocity: &Var<'t, T>, force: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("apply_force", velocity)?;
        self.check_faces("apply_force", force)?;
        velocity.add(&force.scale(T::cast(self.params.dt)))
    }

    /// Interpolates a two-channel centered field to faces.
    pub fn centered_to_faces<'t>(&self, field: &Var<'t, T>) -> Result<Var<'t, T>> {
        if field.len() != 2 * self.domain.cells() {
            return Err(Error::shape("centered_to_faces", format!("{} values, expected 2 channels", field.len())));
        }
        field.linear(&self.to_faces, &[self.domain.faces()])
    }

    /// Adds `dt·factor·marker` (resampled to `v` faces) to the vertical component.
    pub fn apply_buoyancy<'t>(&self, velocity: &Var<'t, T>, marker: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("apply_buoyancy", velocity)?;
        if marker.len() != self.domain.cells() {
            return Err(Error::shape("apply_buoyancy", format!("marker has {} values", marker.len())));
        }
        velocity.add(&marker.linear(&self.buoyancy, &[self.domain.faces()])?)
    }

    /// Imposes prescribed boundary and obstacle face values.
    pub fn apply_boundary<'t>(&self, velocity: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("apply_boundary", velocity)?;
        let tape = velocity.tape();
        velocity.mul(&tape.constant(self.keep.clone()))?.add(&tape.constant(self.fixed.clone()))
    }

    /// Discrete divergence of a face vector.
    pub fn divergence<'t>(&self, velocity: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_faces("divergence", velocity)?;
        velocity.linear(&self.divergence, &[self.domain.cells()])
    }

    fn remove_fluid_mean<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        let n = self.domain.cells();
        let mean = x.sum().scale(T::one() / T::cast(self.fluid_cells.max(1) as f64)).broadcast(&[n])?;
        if self.has_obstacle {
            x.sub(&mean.mul(&tape.constant(self.fluid.clone()))?)
        } else {
            x.sub(&mean)
        }
    }

    /// Conjugate gradients for `A·x = rhs` with the Poisson operator, fully
    /// recorded on the tape.
    fn conjugate_gradient<'t>(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = rhs.tape();
        let n = rhs.len();
        let bnorm = norm(rhs.data());
        let mut x = tape.constant(Tensor::zeros(&[n]));
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = rhs.clone();
        let mut p = r.clone();
        let mut rr = r.dot(&r)?;
        let mut residual = 1.0;
        for _ in 0..self.params.cg_max_iterations {
            let ap = p.linear(&self.poisson, &[n])?;
            let alpha = rr.div(&p.dot(&ap)?)?;
            x = x.add_scaled(&alpha, &p)?;
            r = r.add_scaled(&alpha.neg(), &ap)?;
            let rr_next = r.dot(&r)?;
            residual = rr_next.item().as_f64().sqrt() / bnorm;
            if !residual.is_finite() {
                break;
            }
            if residual <= self.tolerance {
                return Ok(x);
            }
            let beta = rr_next.div(&rr)?;
            p = r.add_scaled(&beta, &p)?;
            rr = rr_next;
        }
        Err(Error::PoissonDivergence { iterations: self.params.cg_max_iterations, residual })
    }

    /// Chorin projection. Returns the divergence-free velocity and the solver
    /// pressure (see [`Solver::physical_pressure`]).
    pub fn project<'t>(&self, velocity: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = velocity.tape();
        let mut b = self.divergence(velocity)?;
        if self.has_obstacle {
            b = b.mul(&tape.constant(self.fluid.clone()))?;
        }
        if self.floating {
            b = self.remove_fluid_mean(&b)?;
        }
        // D·M·Dᵀ·p = −D·w, then w + M·Dᵀ·p is divergence free.
        let mut p = self.conjugate_gradient(&b.neg())?;
        if self.floating {
            p = self.remove_fluid_mean(&p)?;
        }
        let out = velocity.add(&p.linear(&self.correction, &[self.domain.faces()])?)?;
        Ok((out, p))
    }

    /// Converts solver pressure (the potential whose gradient was removed)
    /// to physical pressure `ρ·p/dt`.
    pub fn physical_pressure(&self, p: &[T]) -> Vec<f64> {
        let s = self.params.rho / self.params.dt;
        p.iter().map(|x| x.as_f64() * s).collect()
    }

    /// One full split step. `force` is a face vector.
    pub fn step_var<'t>(&self, state: &StateVar<'t, T>, force: Option<&Var<'t, T>>) -> Result<StateVar<'t, T>> {
        Ok(self.step_var_with_pressure(state, force)?.0)
    }

    pub fn step_var_with_pressure<'t>(
        &self,
        state: &StateVar<'t, T>,
        force: Option<&Var<'t, T>>,
    ) -> Result<(StateVar<'t, T>, Var<'t, T>)> {
        let w = &state.velocity;
        self.check_faces("step", w)?;
        let marker = match &state.marker {
            Some(m) => Some(self.advect_cells(m, w)?),
            None => None,
        };
        let mut w = self.diffuse(&self.advect_velocity(w)?)?;
        if let Some(g) = force {
            w = self.apply_force(&w, g)?;
        }
        if let (Some(m), true) = (&marker, self.params.buoyancy_factor != 0.0) {
            w = self.apply_buoyancy(&w, m)?;
        }
        let w = self.apply_boundary(&w)?;
        let (w, p) = self.project(&w)?;
        Ok((StateVar { velocity: w, marker }, p))
    }

    pub fn state_var<'t>(&self, tape: &'t Tape<T>, state: &SimState) -> Result<StateVar<'t, T>> {
        if state.velocity.domain() != self.domain {
            return Err(Error::InvalidShape("state does not live on the solver's domain".into()));
        }
        Ok(StateVar {
            velocity: tape.constant(tensor(&state.velocity.to_compact())),
            marker: state.marker.as_ref().map(|m| tape.constant(tensor(&m.data))),
        })
    }

    pub fn sim_state(&self, state: &StateVar<'_, T>, pressure: Option<&Var<'_, T>>, time: usize) -> Result<SimState> {
        let d = &self.domain;
        let to64 = |v: &Var<'_, T>| v.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        Ok(SimState {
            velocity: StaggeredGrid::from_compact(d, &to64(&state.velocity))?,
            marker: state.marker.as_ref().map(|m| CenteredGrid::from_data(d, 1, to64(m))).transpose()?,
            pressure: pressure
                .map(|p| CenteredGrid::from_data(d, 1, self.physical_pressure(p.data())))
                .transpose()?,
            time,
        })
    }

    /// Advances a grid state by one step without recording gradients.
    pub fn step(&self, state: &SimState, force: Option<&StaggeredGrid>) -> Result<SimState> {
        let tape = Tape::no_grad();
        let s = self.state_var(&tape, state)?;
        let g = force.map(|g| tape.constant(tensor(&g.to_compact())));
        let (next, p) = self.step_var_with_pressure(&s, g.as_ref())?;
        if let Some(name) = tape.first_non_finite() {
            return Err(Error::NumericalFailure { primitive: name.to_string() });
        }
        self.sim_state(&next, Some(&p), state.time + 1)
    }

    /// `steps` consecutive unforced steps.
    pub fn rollout(&self, state: &SimState, steps: usize) -> Result<Vec<SimState>> {
        let mut out = Vec::with_capacity(steps);
        let mut cur = state.clone();
        for k in 0..steps {
            cur = self.step(&cur, None).map_err(|e| Error::SimulationFailed { step: k, source: Box::new(e) })?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Largest absolute cell divergence of a face vector.
    pub fn max_divergence(&self, faces: &[T]) -> f64 {
        let mut out = vec![T::zero(); self.domain.cells()];
        self.divergence.apply(faces, &mut out);
        let fluid = self.fluid.data();
        out.iter().zip(fluid).filter(|(_, &f)| f > T::zero()).fold(0.0, |m, (d, _)| m.max(d.as_f64().abs()))
    }
}

#[cfg(test)]
mod tests;
