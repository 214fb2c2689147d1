//! Grid-level entry points over `f64` fields, for one-off use and testing.

use super::{tensor, PhysicsParams, Solver};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::grid::{laplacian_matrix, CenteredGrid, Domain, StaggeredGrid};

fn solver(domain: Domain, params: PhysicsParams) -> Result<Solver<f64>> {
    Solver::new(domain, params)
}

/// Transports every channel of `field` along `velocity` for one step of `dt`.
pub fn advect_semi_lagrangian(field: &CenteredGrid, velocity: &StaggeredGrid, dt: f64) -> Result<CenteredGrid> {
    let d = velocity.domain();
    let s = solver(d, PhysicsParams::new(0.0, dt))?;
    let tape = Tape::no_grad();
    let f = tape.constant(tensor(&field.data));
    let w = tape.constant(tensor(&velocity.to_compact()));
    let out = s.advect_cells(&f, &w)?;
    CenteredGrid::from_data(&d, field.channels, out.data().to_vec())
}

/// `field + ν·dt·∇²field` with the five-point Laplacian of the field's lattice.
pub fn diffuse_explicit(field: &CenteredGrid, nu: f64, dt: f64) -> CenteredGrid {
    let params = PhysicsParams::new(nu, dt);
    let dn = params.diffusion_number(field.dx);
    if dn > 0.25 {
        log::warn!("explicit diffusion is unstable: nu*dt/dx^2 = {dn:.3} > 0.25");
    }
    let lap = laplacian_matrix(&field.lattice());
    let mut out = field.clone();
    let n = field.nx * field.ny;
    let mut tmp = vec![0.0; n];
    for c in 0..field.channels {
        lap.apply(field.channel(c), &mut tmp);
        for (o, l) in out.channel_mut(c).iter_mut().zip(&tmp) {
            *o += nu * dt * l;
        }
    }
    out
}

/// Removes the divergent part of `velocity`. Returns the projected velocity
/// and the pressure.
pub fn make_incompressible(
    velocity: &StaggeredGrid,
    params: &PhysicsParams,
) -> Result<(StaggeredGrid, CenteredGrid)> {
    let d = velocity.domain();
    let s = solver(d, params.clone())?;
    let tape = Tape::no_grad();
    let w = s.apply_boundary(&tape.constant(tensor(&velocity.to_compact())))?;
    let (w, p) = s.project(&w)?;
    let w64: Vec<f64> = w.data().to_vec();
    Ok((StaggeredGrid::from_compact(&d, &w64)?, CenteredGrid::from_data(&d, 1, s.physical_pressure(p.data()))?))
}

/// `velocity + dt·force`.
pub fn apply_forces(velocity: &StaggeredGrid, force: &StaggeredGrid, dt: f64) -> StaggeredGrid {
    let mut out = velocity.clone();
    out.u.iter_mut().zip(&force.u).for_each(|(a, b)| *a += dt * b);
    out.v.iter_mut().zip(&force.v).for_each(|(a, b)| *a += dt * b);
    out
}

/// Adds `dt·factor·marker`, interpolated to horizontal faces, to the vertical
/// velocity component.
pub fn apply_buoyancy(velocity: &StaggeredGrid, marker: &CenteredGrid, factor: f64, dt: f64) -> Result<StaggeredGrid> {
    let d = velocity.domain();
    let s = solver(d, PhysicsParams::new(0.0, dt).with_buoyancy(factor))?;
    let tape = Tape::no_grad();
    let w = tape.constant(tensor(&velocity.to_compact()));
    let m = tape.constant(tensor(&marker.data));
    let out = s.apply_buoyancy(&w, &m)?;
    StaggeredGrid::from_compact(&d, out.data())
}
