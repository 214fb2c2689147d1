//! Initial conditions.

use rand::Rng;

use crate::error::Result;
use crate::grid::{CenteredGrid, Domain, StaggeredGrid};
use crate::solver::{make_incompressible, PhysicsParams};

/// Velocity of a stream function sampled at cell corners. The discrete
/// divergence of the result vanishes identically.
pub fn curl_of_corner_stream(domain: &Domain, psi: impl Fn(f64, f64) -> f64) -> StaggeredGrid {
    let h = domain.dx;
    StaggeredGrid::from_fn(
        domain,
        |x, y| (psi(x, y + 0.5 * h) - psi(x, y - 0.5 * h)) / h,
        |x, y| -(psi(x + 0.5 * h, y) - psi(x - 0.5 * h, y)) / h,
    )
}

struct Bump {
    cx: f64,
    cy: f64,
    sigma: f64,
    strength: f64,
}

/// 8 to 12 Gaussian stream-function bumps at random positions with random
/// sign, width and strength. Periodic axes sum the nearest images so the
/// stream function is smooth across the seam. The curl is projected once.
pub fn init_random_vortices(seed: u64, domain: &Domain) -> Result<StaggeredGrid> {
    let mut rng = crate::rng::stream(seed, &[0x766f_7274]);
    let [lx, ly] = domain.extent();
    let size = lx.min(ly);
    let count = rng.random_range(8..=12);
    let bumps: Vec<Bump> = (0..count)
        .map(|_| {
            let sigma = size * rng.random_range(0.04..0.09);
            let speed = rng.random_range(0.4..1.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            // Peak speed of a Gaussian bump is strength / (σ·√e).
            Bump {
                cx: rng.random_range(0.0..lx),
                cy: rng.random_range(0.0..ly),
                sigma,
                strength: sign * speed * sigma * std::f64::consts::E.sqrt(),
            }
        })
        .collect();
    let images = |period: f64, wrap: bool| if wrap { vec![-period, 0.0, period] } else { vec![0.0] };
    let (ix, iy) = (images(lx, domain.boundary.periodic_x()), images(ly, domain.boundary.periodic_y()));
    let psi = |x: f64, y: f64| {
        let mut s = 0.0;
        for b in &bumps {
            for ox in &ix {
                for oy in &iy {
                    let (dx, dy) = (x - b.cx - ox, y - b.cy - oy);
                    s += b.strength * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
                }
            }
        }
        s
    };
    let v = curl_of_corner_stream(domain, psi);
    let mut params = PhysicsParams::new(0.0, 1.0);
    params.cg_tolerance = Some(1e-12);
    Ok(make_incompressible(&v, &params)?.0)
}

/// Solid cells of a disc, by cell center.
pub fn disc_mask(domain: &Domain, center: [f64; 2], diameter: f64) -> CenteredGrid {
    let r2 = 0.25 * diameter * diameter;
    CenteredGrid::from_fn(domain, 1, |x, y| {
        let (dx, dy) = (x - center[0], y - center[1]);
        vec![if dx * dx + dy * dy <= r2 { 1.0 } else { 0.0 }]
    })
}

/// Uniform noise in `[0, 1]` inside a disc of radius `radius·min(extent)`,
/// zero outside. `center` is in fractions of the extent.
pub fn smoke_marker(seed: u64, domain: &Domain, center: [f64; 2], radius: f64) -> CenteredGrid {
    let mut rng = crate::rng::stream(seed, &[0x736d_6f6b]);
    let [lx, ly] = domain.extent();
    let (cx, cy, r) = (center[0] * lx, center[1] * ly, radius * lx.min(ly));
    let mut m = CenteredGrid::zeros(domain, 1);
    for j in 0..domain.ny {
        for i in 0..domain.nx {
            let (x, y) = ((i as f64 + 0.5) * domain.dx, (j as f64 + 0.5) * domain.dx);
            let inside = (x - cx).powi(2) + (y - cy).powi(2) <= r * r;
            // Draw for every cell so the stream does not depend on the disc.
            let u: f64 = rng.random();
            if inside {
                m.set(0, i, j, u);
            }
        }
    }
    m
}
