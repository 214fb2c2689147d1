//! Discrete fields on regular 2D grids.
//!
//! Layout conventions:
//! - cell `(i, j)` has its center at `((i + ½)·dx, (j + ½)·dx)`;
//! - `u` lives on vertical faces at `(i·dx, (j + ½)·dx)`, `(nx + 1) × ny` of them;
//! - `v` lives on horizontal faces at `((i + ½)·dx, j·dx)`, `nx × (ny + 1)` of them;
//! - storage is row-major (`j` outer, `i` inner) with channels outermost.
//!
//! Along a periodic axis the first and last face coincide. [`StaggeredGrid`]
//! stores both copies; the solver works on the *compact* face vector, which
//! drops the duplicate (see [`Domain::u_lattice`]).

mod ops;
mod resample;
mod sample;
pub mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{
    centered_to_staggered, centered_to_staggered_matrix, divergence, divergence_matrix, laplacian_matrix,
    staggered_to_centered, staggered_to_centered_matrix, vorticity, vorticity_centered,
};
pub use resample::{
    axis_weights, lerp_resample, resample_matrix, staggered_resample, staggered_resample_matrix, AxisMode,
};
pub use sample::{bilinear_sample, bilinear_sample_staggered, sample_matrix, Lattice, Stencil};
pub use sparse::SparseMatrix;

/// Condition on one side of the domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Zero normal velocity.
    Closed,
    /// Zero pressure outside, velocity extrapolated from the interior.
    Open,
    /// Prescribed velocity on the boundary faces.
    Inflow { vx: f64, vy: f64 },
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub left: Side,
    pub right: Side,
    pub bottom: Side,
    pub top: Side,
}

impl BoundarySpec {
    pub fn periodic() -> Self {
        Self::uniform(Side::Periodic)
    }

    pub fn closed() -> Self {
        Self::uniform(Side::Closed)
    }

    pub fn open() -> Self {
        Self::uniform(Side::Open)
    }

    pub fn uniform(side: Side) -> Self {
        Self { left: side, right: side, bottom: side, top: side }
    }

    pub fn validate(&self) -> Result<()> {
        let px = matches!(self.left, Side::Periodic) as u8 + matches!(self.right, Side::Periodic) as u8;
        let py = matches!(self.bottom, Side::Periodic) as u8 + matches!(self.top, Side::Periodic) as u8;
        if px == 1 || py == 1 {
            return Err(Error::config("boundary", "periodic sides must come in opposing pairs"));
        }
        Ok(())
    }

    pub fn periodic_x(&self) -> bool {
        matches!(self.left, Side::Periodic)
    }

    pub fn periodic_y(&self) -> bool {
        matches!(self.bottom, Side::Periodic)
    }

    /// True when no side fixes the pressure level.
    pub fn pressure_is_floating(&self) -> bool {
        ![self.left, self.right, self.bottom, self.top].iter().any(|s| matches!(s, Side::Open))
    }
}

/// Grid extent, spacing and boundary conditions shared by all fields of a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub boundary: BoundarySpec,
}

impl Domain {
    pub fn new(nx: usize, ny: usize, dx: f64, boundary: BoundarySpec) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidShape(format!("empty domain {nx}x{ny}")));
        }
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::InvalidShape(format!("cell spacing must be positive, got {dx}")));
        }
        boundary.validate()?;
        Ok(Self { nx, ny, dx, boundary })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_lattice(&self) -> Lattice {
        Lattice {
            n: [self.nx, self.ny],
            offset: [0.5, 0.5],
            dx: self.dx,
            wrap: [self.boundary.periodic_x(), self.boundary.periodic_y()],
        }
    }

    /// Lattice of the compact `u` faces (duplicate periodic face dropped).
    pub fn u_lattice(&self) -> Lattice {
        let px = self.boundary.periodic_x();
        Lattice {
            n: [if px { self.nx } else { self.nx + 1 }, self.ny],
            offset: [0.0, 0.5],
            dx: self.dx,
            wrap: [px, self.boundary.periodic_y()],
        }
    }

    pub fn v_lattice(&self) -> Lattice {
        let py = self.boundary.periodic_y();
        Lattice {
            n: [self.nx, if py { self.ny } else { self.ny + 1 }],
            offset: [0.5, 0.0],
            dx: self.dx,
            wrap: [self.boundary.periodic_x(), py],
        }
    }

    pub fn nu(&self) -> usize {
        self.u_lattice().len()
    }

    pub fn nv(&self) -> usize {
        self.v_lattice().len()
    }

    /// Length of the compact face vector `[u; v]`.
    pub fn faces(&self) -> usize {
        self.nu() + self.nv()
    }

    /// The same physical domain with `factor`-times fewer cells per axis.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.nx.is_multiple_of(factor) || !self.ny.is_multiple_of(factor) {
            return Err(Error::InvalidShape(format!(
                "factor {factor} does not divide {}x{}",
                self.nx, self.ny
            )));
        }
        Domain::new(self.nx / factor, self.ny / factor, self.dx * factor as f64, self.boundary)
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.nx as f64 * self.dx, self.ny as f64 * self.dx]
    }
}

/// Scalar or multi-channel field sampled at cell centers.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredGrid {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub dx: f64,
    pub boundary: BoundarySpec,
    pub data: Vec<f64>,
}

impl CenteredGrid {
    pub fn zeros(domain: &Domain, channels: usize) -> Self {
        Self {
            nx: domain.nx,
            ny: domain.ny,
            channels,
            dx: domain.dx,
            boundary: domain.boundary,
            data: vec![0.0; channels * domain.cells()],
        }
    }

    pub fn from_data(domain: &Domain, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * domain.cells() {
            return Err(Error::InvalidShape(format!(
                "expected {} values for {channels}x{}x{}, got {}",
                channels * domain.cells(),
                domain.ny,
                domain.nx,
                data.len()
            )));
        }
        Ok(Self { nx: domain.nx, ny: domain.ny, channels, dx: domain.dx, boundary: domain.boundary, data })
    }

    /// Evaluates `f(x, y)` at every cell center; `f` returns one value per channel.
    pub fn from_fn(domain: &Domain, channels: usize, f: impl Fn(f64, f64) -> Vec<f64>) -> Self {
        let mut g = Self::zeros(domain, channels);
        let n = domain.cells();
        for j in 0..domain.ny {
            for i in 0..domain.nx {
                let vals = f((i as f64 + 0.5) * domain.dx, (j as f64 + 0.5) * domain.dx);
                for (c, v) in vals.into_iter().enumerate().take(channels) {
                    g.data[c * n + j * domain.nx + i] = v;
                }
            }
        }
        g
    }

    pub fn domain(&self) -> Domain {
        Domain { nx: self.nx, ny: self.ny, dx: self.dx, boundary: self.boundary }
    }

    pub fn lattice(&self) -> Lattice {
        self.domain().cell_lattice()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.nx * self.ny;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.nx * self.ny;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.ny + j) * self.nx + i]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, value: f64) {
        self.data[(c * self.ny + j) * self.nx + i] = value;
    }

    pub fn mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().sum::<f64>() / ch.len() as f64
    }
}

/// Velocity on a MAC grid: `u` on vertical faces, `v` on horizontal faces.
#[derive(Clone, Debug, PartialEq)]
pub struct StaggeredGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub boundary: BoundarySpec,
    /// `(nx + 1) × ny`, index `j·(nx + 1) + i`.
    pub u: Vec<f64>,
    /// `nx × (ny + 1)`, index `j·nx + i`.
    pub v: Vec<f64>,
}

impl StaggeredGrid {
    pub fn zeros(domain: &Domain) -> Self {
        Self {
            nx: domain.nx,
            ny: domain.ny,
            dx: domain.dx,
            boundary: domain.boundary,
            u: vec![0.0; (domain.nx + 1) * domain.ny],
            v: vec![0.0; domain.nx * (domain.ny + 1)],
        }
    }

    pub fn from_parts(domain: &Domain, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != (domain.nx + 1) * domain.ny || v.len() != domain.nx * (domain.ny + 1) {
            return Err(Error::InvalidShape(format!(
                "staggered {}x{} needs u: {}, v: {}; got {}, {}",
                domain.nx,
                domain.ny,
                (domain.nx + 1) * domain.ny,
                domain.nx * (domain.ny + 1),
                u.len(),
                v.len()
            )));
        }
        let mut g = Self { nx: domain.nx, ny: domain.ny, dx: domain.dx, boundary: domain.boundary, u, v };
        g.sync_periodic();
        Ok(g)
    }

    /// Samples an analytic velocity `(fu, fv)` at the face positions.
    pub fn from_fn(domain: &Domain, fu: impl Fn(f64, f64) -> f64, fv: impl Fn(f64, f64) -> f64) -> Self {
        let mut g = Self::zeros(domain);
        let dx = domain.dx;
        for j in 0..domain.ny {
            for i in 0..=domain.nx {
                g.u[j * (domain.nx + 1) + i] = fu(i as f64 * dx, (j as f64 + 0.5) * dx);
            }
        }
        for j in 0..=domain.ny {
            for i in 0..domain.nx {
                g.v[j * domain.nx + i] = fv((i as f64 + 0.5) * dx, j as f64 * dx);
            }
        }
        g.sync_periodic();
        g
    }

    pub fn domain(&self) -> Domain {
        Domain { nx: self.nx, ny: self.ny, dx: self.dx, boundary: self.boundary }
    }

    pub fn u_at(&self, i: usize, j: usize) -> f64 {
        self.u[j * (self.nx + 1) + i]
    }

    pub fn v_at(&self, i: usize, j: usize) -> f64 {
        self.v[j * self.nx + i]
    }

    /// Copies the first face onto the duplicated last face along periodic axes.
    pub fn sync_periodic(&mut self) {
        if self.boundary.periodic_x() {
            for j in 0..self.ny {
                self.u[j * (self.nx + 1) + self.nx] = self.u[j * (self.nx + 1)];
            }
        }
        if self.boundary.periodic_y() {
            let (head, tail) = self.v.split_at_mut(self.ny * self.nx);
            tail[..self.nx].copy_from_slice(&head[..self.nx]);
        }
    }

    /// Compact face vector `[u; v]` matching [`Domain::u_lattice`] / [`Domain::v_lattice`].
    pub fn to_compact(&self) -> Vec<f64> {
        let d = self.domain();
        let (ul, vl) = (d.u_lattice(), d.v_lattice());
        let mut out = Vec::with_capacity(d.faces());
        for j in 0..ul.n[1] {
            out.extend_from_slice(&self.u[j * (self.nx + 1)..j * (self.nx + 1) + ul.n[0]]);
        }
        out.extend_from_slice(&self.v[..vl.n[1] * self.nx]);
        out
    }

    pub fn from_compact(domain: &Domain, faces: &[f64]) -> Result<Self> {
        if faces.len() != domain.faces() {
            return Err(Error::InvalidShape(format!(
                "compact face vector needs {} values, got {}",
                domain.faces(),
                faces.len()
            )));
        }
        let mut g = Self::zeros(domain);
        let (ul, vl) = (domain.u_lattice(), domain.v_lattice());
        for j in 0..ul.n[1] {
            let src = &faces[j * ul.n[0]..(j + 1) * ul.n[0]];
            g.u[j * (domain.nx + 1)..j * (domain.nx + 1) + ul.n[0]].copy_from_slice(src);
        }
        let nu = ul.len();
        g.v[..vl.n[1] * domain.nx].copy_from_slice(&faces[nu..nu + vl.len()]);
        g.sync_periodic();
        Ok(g)
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staggered_shapes_and_periodic_identification() {
        let d = Domain::new(4, 3, 1.0, BoundarySpec::periodic()).unwrap();
        let g = StaggeredGrid::from_fn(&d, |x, y| x + 10.0 * y, |x, y| x * y);
        assert_eq!(g.u.len(), 5 * 3);
        assert_eq!(g.v.len(), 4 * 4);
        for j in 0..3 {
            assert_eq!(g.u_at(0, j), g.u_at(4, j));
        }
        for i in 0..4 {
            assert_eq!(g.v_at(i, 0), g.v_at(i, 3));
        }
        let back = StaggeredGrid::from_compact(&d, &g.to_compact()).unwrap();
        assert_eq!(back, g);
        assert_eq!(d.faces(), 4 * 3 + 4 * 3);
    }

    #[test]
    fn closed_compact_keeps_boundary_faces() {
        let d = Domain::new(3, 2, 0.5, BoundarySpec::closed()).unwrap();
        assert_eq!(d.nu(), 4 * 2);
        assert_eq!(d.nv(), 3 * 3);
        let g = StaggeredGrid::from_fn(&d, |x, _| x, |_, y| y);
        let back = StaggeredGrid::from_compact(&d, &g.to_compact()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn boundary_validation() {
        let mut b = BoundarySpec::closed();
        b.left = Side::Periodic;
        assert!(b.validate().is_err());
        assert!(Domain::new(0, 3, 1.0, BoundarySpec::closed()).is_err());
        assert!(Domain::new(3, 3, 0.0, BoundarySpec::closed()).is_err());
        let d = Domain::new(8, 12, 1.0, BoundarySpec::periodic()).unwrap();
        let c = d.coarsen(4).unwrap();
        assert_eq!((c.nx, c.ny, c.dx), (2, 3, 4.0));
        assert!(d.coarsen(3).is_err());
    }
}
