use num_traits::Float;

use super::{CenteredGrid, SparseMatrix, StaggeredGrid};
use crate::error::{Error, Result};

/// A regular lattice of sample points: `n[0] × n[1]` samples at
/// `((i + offset[0])·dx, (j + offset[1])·dx)`, row-major.
///
/// A wrapped axis is periodic with period `n·dx`; otherwise lookups outside
/// the sample range clamp to the nearest edge sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub n: [usize; 2],
    pub offset: [f64; 2],
    pub dx: f64,
    pub wrap: [bool; 2],
}

/// Bilinear weights of one lookup together with their derivatives with
/// respect to the lookup position.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub index: [usize; 4],
    pub weight: [T; 4],
    pub dweight_dx: [T; 4],
    pub dweight_dy: [T; 4],
}

/// Returns `(i0, i1, t, dt/dcoord)` for one axis.
pub(crate) fn axis<T: Float>(n: usize, offset: f64, dx: f64, wrap: bool, coord: T) -> (usize, usize, T, T) {
    let dx_t = T::from(dx).unwrap();
    let f = coord / dx_t - T::from(offset).unwrap();
    if wrap {
        let fl = f.floor();
        let t = f - fl;
        let i0 = fl.to_i64().unwrap().rem_euclid(n as i64) as usize;
        (i0, (i0 + 1) % n, t, T::one() / dx_t)
    } else if n == 1 {
        (0, 0, T::zero(), T::zero())
    } else if f < T::zero() {
        (0, 1, T::zero(), T::zero())
    } else if f >= T::from(n - 1).unwrap() {
        (n - 2, n - 1, T::one(), T::zero())
    } else {
        let fl = f.floor();
        let i0 = fl.to_usize().unwrap();
        (i0, i0 + 1, f - fl, T::one() / dx_t)
    }
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + self.offset[0]) * self.dx, (j as f64 + self.offset[1]) * self.dx)
    }

    pub fn positions(&self) -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::with_capacity(self.len());
        let mut ys = Vec::with_capacity(self.len());
        for j in 0..self.n[1] {
            for i in 0..self.n[0] {
                let (x, y) = self.position(i, j);
                xs.push(x);
                ys.push(y);
            }
        }
        (xs, ys)
    }

    pub fn stencil<T: Float>(&self, x: T, y: T) -> Stencil<T> {
        let (i0, i1, tx, dtx) = axis(self.n[0], self.offset[0], self.dx, self.wrap[0], x);
        let (j0, j1, ty, dty) = axis(self.n[1], self.offset[1], self.dx, self.wrap[1], y);
        let one = T::one();
        let w = self.n[0];
        Stencil {
            index: [j0 * w + i0, j0 * w + i1, j1 * w + i0, j1 * w + i1],
            weight: [(one - tx) * (one - ty), tx * (one - ty), (one - tx) * ty, tx * ty],
            dweight_dx: [-dtx * (one - ty), dtx * (one - ty), -dtx * ty, dtx * ty],
            dweight_dy: [-(one - tx) * dty, -tx * dty, (one - tx) * dty, tx * dty],
        }
    }

    /// Bilinear interpolation of `values` (one sample per lattice point) at `(x, y)`.
    pub fn interpolate<T: Float>(&self, values: &[T], x: T, y: T) -> T {
        let s = self.stencil(x, y);
        (0..4).fold(T::zero(), |acc, k| acc + s.weight[k] * values[s.index[k]])
    }
}

fn check_positions(positions: &[(f64, f64)]) -> Result<()> {
    match positions.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        Some(&(x, y)) => Err(Error::InvalidPosition { x, y }),
        None => Ok(()),
    }
}

/// Bilinear samples of every channel of `grid` at `positions`.
/// Result is channel-major: `out[c * positions.len() + k]`.
pub fn bilinear_sample(grid: &CenteredGrid, positions: &[(f64, f64)]) -> Result<Vec<f64>> {
    if grid.data.is_empty() {
        return Err(Error::InvalidShape("cannot sample an empty grid".into()));
    }
    check_positions(positions)?;
    let lat = grid.lattice();
    let mut out = Vec::with_capacity(grid.channels * positions.len());
    for c in 0..grid.channels {
        let ch = grid.channel(c);
        out.extend(positions.iter().map(|&(x, y)| lat.interpolate(ch, x, y)));
    }
    Ok(out)
}

/// Bilinear samples of both velocity components at `positions`, as `(u, v)` pairs.
pub fn bilinear_sample_staggered(grid: &StaggeredGrid, positions: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    check_positions(positions)?;
    let d = grid.domain();
    let faces = grid.to_compact();
    let (ul, vl) = (d.u_lattice(), d.v_lattice());
    let (u, v) = faces.split_at(ul.len());
    Ok(positions.iter().map(|&(x, y)| (ul.interpolate(u, x, y), vl.interpolate(v, x, y))).collect())
}

/// Sparse matrix `S` with `S · values == bilinear samples at positions`.
pub fn sample_matrix(lattice: &Lattice, xs: &[f64], ys: &[f64]) -> SparseMatrix<f64> {
    assert_eq!(xs.len(), ys.len());
    let mut t = Vec::with_capacity(4 * xs.len());
    for (r, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let s = lattice.stencil(x, y);
        for k in 0..4 {
            t.push((r, s.index[k], s.weight[k]));
        }
    }
    SparseMatrix::from_triplets(xs.len(), lattice.len(), &t)
}
