use super::resample::{resample_matrix, AxisMode};
use super::{CenteredGrid, Domain, Lattice, SparseMatrix, StaggeredGrid};

/// `(cells × faces)` matrix of the discrete divergence on compact faces.
pub fn divergence_matrix(domain: &Domain) -> SparseMatrix<f64> {
    let (nx, ny) = (domain.nx, domain.ny);
    let ul = domain.u_lattice();
    let nu = ul.len();
    let inv = 1.0 / domain.dx;
    let mut t = Vec::with_capacity(4 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let c = j * nx + i;
            let right = if i + 1 == ul.n[0] { 0 } else { i + 1 };
            t.push((c, j * ul.n[0] + right, inv));
            t.push((c, j * ul.n[0] + i, -inv));
            let top = if j + 1 == domain.v_lattice().n[1] { 0 } else { j + 1 };
            t.push((c, nu + top * nx + i, inv));
            t.push((c, nu + j * nx + i, -inv));
        }
    }
    SparseMatrix::from_triplets(nx * ny, domain.faces(), &t)
}

pub fn divergence(velocity: &StaggeredGrid) -> CenteredGrid {
    let d = velocity.domain();
    let mut out = CenteredGrid::zeros(&d, 1);
    divergence_matrix(&d).apply(&velocity.to_compact(), &mut out.data);
    out
}

/// Five-point Laplacian on a lattice. Wrapped axes are periodic; elsewhere a
/// missing neighbor contributes no flux.
pub fn laplacian_matrix(lattice: &Lattice) -> SparseMatrix<f64> {
    let [nx, ny] = lattice.n;
    let inv2 = 1.0 / (lattice.dx * lattice.dx);
    let mut t = Vec::with_capacity(5 * nx * ny);
    let neighbor = |k: usize, n: usize, wrap: bool, step: isize| -> Option<usize> {
        let m = k as isize + step;
        if (0..n as isize).contains(&m) {
            Some(m as usize)
        } else if wrap && n > 1 {
            Some(m.rem_euclid(n as isize) as usize)
        } else {
            None
        }
    };
    for j in 0..ny {
        for i in 0..nx {
            let r = j * nx + i;
            for (di, dj) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let nb = if di != 0 {
                    neighbor(i, nx, lattice.wrap[0], di).map(|ii| j * nx + ii)
                } else {
                    neighbor(j, ny, lattice.wrap[1], dj).map(|jj| jj * nx + i)
                };
                if let Some(c) = nb {
                    t.push((r, c, inv2));
                    t.push((r, r, -inv2));
                }
            }
        }
    }
    SparseMatrix::from_triplets(nx * ny, nx * ny, &t)
}

/// `(2·cells × faces)` matrix averaging face values to cell centers, `[u_c; v_c]`.
pub fn staggered_to_centered_matrix(domain: &Domain) -> SparseMatrix<f64> {
    let cl = domain.cell_lattice();
    let lin = [AxisMode::Linear, AxisMode::Linear];
    SparseMatrix::block_diag(
        &resample_matrix(&domain.u_lattice(), &cl, lin),
        &resample_matrix(&domain.v_lattice(), &cl, lin),
    )
}

/// `(faces × 2·cells)` matrix interpolating cell-centered components to faces.
pub fn centered_to_staggered_matrix(domain: &Domain) -> SparseMatrix<f64> {
    let cl = domain.cell_lattice();
    let lin = [AxisMode::Linear, AxisMode::Linear];
    SparseMatrix::block_diag(
        &resample_matrix(&cl, &domain.u_lattice(), lin),
        &resample_matrix(&cl, &domain.v_lattice(), lin),
    )
}

pub fn staggered_to_centered(velocity: &StaggeredGrid) -> CenteredGrid {
    let d = velocity.domain();
    let mut out = CenteredGrid::zeros(&d, 2);
    staggered_to_centered_matrix(&d).apply(&velocity.to_compact(), &mut out.data);
    out
}

/// Interpolates the first two channels of `field` to faces.
pub fn centered_to_staggered(field: &CenteredGrid) -> StaggeredGrid {
    let d = field.domain();
    let mut faces = vec![0.0; d.faces()];
    centered_to_staggered_matrix(&d).apply(&field.data[..2 * d.cells()], &mut faces);
    StaggeredGrid::from_compact(&d, &faces).expect("face count matches domain")
}

/// `∂v/∂x − ∂u/∂y` of a two-channel centered velocity, central differences
/// inside, wrapped across periodic sides, one-sided at other boundaries.
pub fn vorticity_centered(velocity: &CenteredGrid) -> CenteredGrid {
    assert!(velocity.channels >= 2, "vorticity needs two velocity channels");
    let (nx, ny) = (velocity.nx, velocity.ny);
    let (px, py) = (velocity.boundary.periodic_x(), velocity.boundary.periodic_y());
    let dx = velocity.dx;
    // derivative along one axis from the values at neighbors k-1, k+1
    let diff = |k: usize, n: usize, wrap: bool, at: &dyn Fn(usize) -> f64| -> f64 {
        if n == 1 {
            0.0
        } else if wrap {
            (at((k + 1) % n) - at((k + n - 1) % n)) / (2.0 * dx)
        } else if k == 0 {
            (at(1) - at(0)) / dx
        } else if k == n - 1 {
            (at(n - 1) - at(n - 2)) / dx
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * dx)
        }
    };
    let mut out = CenteredGrid::zeros(&velocity.domain(), 1);
    for j in 0..ny {
        for i in 0..nx {
            let dvdx = diff(i, nx, px, &|ii| velocity.get(1, ii, j));
            let dudy = diff(j, ny, py, &|jj| velocity.get(0, i, jj));
            out.set(0, i, j, dvdx - dudy);
        }
    }
    out
}

/// Vorticity at cell centers, computed from the centered-interpolated velocity.
pub fn vorticity(velocity: &StaggeredGrid) -> CenteredGrid {
    vorticity_centered(&staggered_to_centered(velocity))
}
