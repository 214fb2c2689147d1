use super::sample::axis;
use super::{CenteredGrid, Domain, Lattice, SparseMatrix, StaggeredGrid};
use crate::error::{Error, Result};

/// How one axis is resampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisMode {
    /// Overlap-weighted average over the footprint of each target cell.
    Area,
    /// Linear interpolation at the target sample positions.
    Linear,
}

/// One-dimensional resampling weights: entry `k` lists `(source index, weight)`
/// pairs for target sample `k`.
///
/// Axes are described as `(count, offset, spacing)`; `Area` requires cell-type
/// axes (offset ½) on both sides.
pub fn axis_weights(
    src: (usize, f64, f64),
    dst: (usize, f64, f64),
    wrap: bool,
    mode: AxisMode,
) -> Vec<Vec<(usize, f64)>> {
    let (sn, soff, sdx) = src;
    let (dn, doff, ddx) = dst;
    match mode {
        AxisMode::Linear => (0..dn)
            .map(|k| {
                let p = (k as f64 + doff) * ddx;
                let (i0, i1, t, _) = axis(sn, soff, sdx, wrap, p);
                if i0 == i1 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else if t == 1.0 {
                    vec![(i1, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect(),
        AxisMode::Area => {
            assert!(soff == 0.5 && doff == 0.5, "area resampling needs cell-centered axes");
            (0..dn)
                .map(|k| {
                    let (lo, hi) = (k as f64 * ddx, (k + 1) as f64 * ddx);
                    let first = ((lo / sdx).floor().max(0.0)) as usize;
                    let mut w = Vec::new();
                    let mut total = 0.0;
                    let mut i = first;
                    while i < sn && (i as f64) * sdx < hi {
                        let overlap = ((i + 1) as f64 * sdx).min(hi) - (i as f64 * sdx).max(lo);
                        if overlap > 0.0 {
                            w.push((i, overlap));
                            total += overlap;
                        }
                        i += 1;
                    }
                    w.iter_mut().for_each(|(_, x)| *x /= total);
                    w
                })
                .collect()
        }
    }
}

/// Tensor-product resampling matrix from `src` samples to `dst` samples.
/// Both lattices must cover the same physical domain.
pub fn resample_matrix(src: &Lattice, dst: &Lattice, modes: [AxisMode; 2]) -> SparseMatrix<f64> {
    let wx = axis_weights(
        (src.n[0], src.offset[0], src.dx),
        (dst.n[0], dst.offset[0], dst.dx),
        src.wrap[0],
        modes[0],
    );
    let wy = axis_weights(
        (src.n[1], src.offset[1], src.dx),
        (dst.n[1], dst.offset[1], dst.dx),
        src.wrap[1],
        modes[1],
    );
    let mut t = Vec::new();
    for (j, wyj) in wy.iter().enumerate() {
        for (i, wxi) in wx.iter().enumerate() {
            let r = j * dst.n[0] + i;
            for &(sj, a) in wyj {
                for &(si, b) in wxi {
                    t.push((r, sj * src.n[0] + si, a * b));
                }
            }
        }
    }
    SparseMatrix::from_triplets(dst.len(), src.len(), &t)
}

fn mode_for(src_n: usize, dst_n: usize) -> AxisMode {
    if dst_n < src_n {
        AxisMode::Area
    } else {
        AxisMode::Linear
    }
}

fn target_domain(src: &Domain, tnx: usize, tny: usize) -> Result<Domain> {
    if tnx == 0 || tny == 0 {
        return Err(Error::InvalidShape(format!("target size {tnx}x{tny} must be positive")));
    }
    let sx = src.nx as f64 / tnx as f64;
    let sy = src.ny as f64 / tny as f64;
    if (sx - sy).abs() > 1e-12 * sx.max(sy) {
        return Err(Error::InvalidShape(format!(
            "resampling {}x{} to {tnx}x{tny} would make cells non-square",
            src.nx, src.ny
        )));
    }
    Domain::new(tnx, tny, src.dx * sx, src.boundary)
}

/// Resamples a centered field to `tnx × tny` cells over the same domain.
///
/// Shrinking axes average over each target cell's footprint, growing axes
/// interpolate linearly at the target cell centers.
pub fn lerp_resample(field: &CenteredGrid, tnx: usize, tny: usize) -> Result<CenteredGrid> {
    let src = field.domain();
    let dst = target_domain(&src, tnx, tny)?;
    let m = resample_matrix(
        &src.cell_lattice(),
        &dst.cell_lattice(),
        [mode_for(src.nx, tnx), mode_for(src.ny, tny)],
    );
    let mut out = CenteredGrid::zeros(&dst, field.channels);
    for c in 0..field.channels {
        m.apply(field.channel(c), out.channel_mut(c));
    }
    Ok(out)
}

/// Resampling matrix on compact face vectors between two discretizations of
/// the same domain.
///
/// The normal axis of each component is always interpolated linearly, which
/// for nested grids picks the coincident fine face; the tangential axis is
/// area-averaged when shrinking. Averaging fluxes over coincident face lines
/// makes the coarse divergence of a block the mean of the fine divergences.
pub fn staggered_resample_matrix(src: &Domain, dst: &Domain) -> SparseMatrix<f64> {
    let mu = resample_matrix(
        &src.u_lattice(),
        &dst.u_lattice(),
        [AxisMode::Linear, mode_for(src.ny, dst.ny)],
    );
    let mv = resample_matrix(
        &src.v_lattice(),
        &dst.v_lattice(),
        [mode_for(src.nx, dst.nx), AxisMode::Linear],
    );
    SparseMatrix::block_diag(&mu, &mv)
}

pub fn staggered_resample(grid: &StaggeredGrid, tnx: usize, tny: usize) -> Result<StaggeredGrid> {
    let src = grid.domain();
    let dst = target_domain(&src, tnx, tny)?;
    let m = staggered_resample_matrix(&src, &dst);
    let mut out = vec![0.0; dst.faces()];
    m.apply(&grid.to_compact(), &mut out);
    StaggeredGrid::from_compact(&dst, &out)
}
