use rand::Rng;

use super::*;
use crate::autodiff::{gradient_check, gradient_check_with, Stencil};
use crate::grid::{divergence, BoundarySpec};
use crate::rng::stream;

fn random_velocity(d: &Domain, seed: u64) -> StaggeredGrid {
    let mut rng = stream(seed, &[]);
    let u = (0..(d.nx + 1) * d.ny).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = (0..d.nx * (d.ny + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    StaggeredGrid::from_parts(d, u, v).unwrap()
}

fn random_cells(d: &Domain, seed: u64) -> CenteredGrid {
    let mut rng = stream(seed, &[1]);
    CenteredGrid::from_data(d, 1, (0..d.cells()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_div(v: &StaggeredGrid) -> f64 {
    divergence(v).data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Velocity from a corner-sampled stream function: discretely solenoidal.
fn solenoidal(d: &Domain, psi: impl Fn(f64, f64) -> f64) -> StaggeredGrid {
    let h = d.dx;
    StaggeredGrid::from_fn(
        d,
        |x, y| (psi(x, y + 0.5 * h) - psi(x, y - 0.5 * h)) / h,
        |x, y| -(psi(x + 0.5 * h, y) - psi(x - 0.5 * h, y)) / h,
    )
}

#[test]
fn zero_velocity_leaves_field_bit_exact() {
    for dx in [1.0, 0.37] {
        let d = Domain::new(12, 9, dx, BoundarySpec::closed()).unwrap();
        let f = random_cells(&d, 3);
        let out = advect_semi_lagrangian(&f, &StaggeredGrid::zeros(&d), 0.7).unwrap();
        assert_eq!(out.data, f.data);
    }
}

#[test]
fn unit_shift_matches_roll_oracle() {
    let d = Domain::new(10, 6, 1.0, BoundarySpec::periodic()).unwrap();
    let f = random_cells(&d, 5);
    let vel = StaggeredGrid::from_fn(&d, |_, _| 1.0, |_, _| 0.0);
    let out = advect_semi_lagrangian(&f, &vel, 1.0).unwrap();
    for j in 0..6 {
        for i in 0..10 {
            let expect = f.get(0, (i + 9) % 10, j);
            assert!((out.get(0, i, j) - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn advection_respects_bilinear_max_principle() {
    for (seed, b) in [(1, BoundarySpec::periodic()), (2, BoundarySpec::closed()), (3, BoundarySpec::open())] {
        let d = Domain::new(16, 12, 1.0, b).unwrap();
        let f = random_cells(&d, seed);
        let vel = random_velocity(&d, seed + 10);
        let out = advect_semi_lagrangian(&f, &vel, 2.3).unwrap();
        let (lo, hi) = f.data.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(out.data.iter().all(|&x| x <= hi + 1e-9 && x >= lo - 1e-9));
    }
}

#[test]
fn diffusion_of_constant_is_identity() {
    let d = Domain::new(8, 8, 1.0, BoundarySpec::closed()).unwrap();
    let f = CenteredGrid::from_fn(&d, 1, |_, _| vec![2.5]);
    assert_eq!(diffuse_explicit(&f, 0.2, 1.0).data, f.data);
}

#[test]
fn diffusion_of_spike_matches_stencil() {
    let d = Domain::new(7, 7, 0.5, BoundarySpec::periodic()).unwrap();
    let mut f = CenteredGrid::zeros(&d, 1);
    f.set(0, 3, 3, 1.0);
    let (nu, dt) = (0.01, 0.5);
    let out = diffuse_explicit(&f, nu, dt);
    let a = nu * dt / 0.25;
    for j in 0..7 {
        for i in 0..7 {
            let expect = match (i as i32 - 3).abs() + (j as i32 - 3).abs() {
                0 => 1.0 - 4.0 * a,
                1 if i == 3 || j == 3 => a,
                _ => 0.0,
            };
            assert!((out.get(0, i, j) - expect).abs() <= 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn diffusion_damps_sine_mode_by_discrete_eigenvalue() {
    let n = 32;
    let d = Domain::new(n, 4, 1.0, BoundarySpec::periodic()).unwrap();
    let (nu, dt, k) = (0.1, 1.0, 3.0);
    let l = n as f64;
    let f = CenteredGrid::from_fn(&d, 1, |x, _| vec![(2.0 * std::f64::consts::PI * k * x / l).sin()]);
    let out = diffuse_explicit(&f, nu, dt);
    let factor = 1.0 - nu * dt * (2.0 - 2.0 * (2.0 * std::f64::consts::PI * k / n as f64).cos());
    for (o, i) in out.data.iter().zip(&f.data) {
        assert!((o - factor * i).abs() <= 1e-10);
    }
}

#[test]
fn solenoidal_field_is_fixed_point_of_projection() {
    let d = Domain::new(16, 16, 1.0, BoundarySpec::periodic()).unwrap();
    let l = 16.0;
    let tau = 2.0 * std::f64::consts::PI;
    let v = solenoidal(&d, |x, y| (tau * x / l).sin() * (tau * 2.0 * y / l).cos() + 0.3 * (tau * y / l).sin());
    assert!(max_div(&v) < 1e-12);
    let (out, _) = make_incompressible(&v, &PhysicsParams::new(0.0, 1.0)).unwrap();
    for (a, b) in out.u.iter().zip(&v.u).chain(out.v.iter().zip(&v.v)) {
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn gradient_field_projects_to_its_mean() {
    let d = Domain::new(16, 16, 1.0, BoundarySpec::periodic()).unwrap();
    let mut rng = stream(9, &[]);
    let phi: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at = |i: usize, j: usize| phi[(j % 16) * 16 + (i % 16)];
    // Discrete gradient on faces plus a constant drift.
    let mut v = StaggeredGrid::zeros(&d);
    for j in 0..16 {
        for i in 0..=16 {
            v.u[j * 17 + i] = at(i, j) - at(i + 15, j) + 0.25;
        }
    }
    for j in 0..=16 {
        for i in 0..16 {
            v.v[j * 16 + i] = at(i, j) - at(i, j + 15) - 0.5;
        }
    }
    let (out, _) = make_incompressible(&v, &PhysicsParams::new(0.0, 1.0)).unwrap();
    assert!(out.u.iter().all(|x| (x - 0.25).abs() <= 1e-6));
    assert!(out.v.iter().all(|x| (x + 0.5).abs() <= 1e-6));
}

/// Dense periodic Poisson oracle: `Lap p = div v` with `Σp = 0`.
fn dense_periodic_pressure(v: &StaggeredGrid) -> Vec<f64> {
    let (nx, ny) = (v.nx, v.ny);
    let n = nx * ny;
    let h2 = v.dx * v.dx;
    let div = divergence(v);
    let mut a = nalgebra::DMatrix::<f64>::zeros(n + 1, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n + 1);
    for j in 0..ny {
        for i in 0..nx {
            let r = j * nx + i;
            a[(r, r)] -= 4.0 / h2;
            for (ii, jj) in [((i + 1) % nx, j), ((i + nx - 1) % nx, j), (i, (j + 1) % ny), (i, (j + ny - 1) % ny)] {
                a[(r, jj * nx + ii)] += 1.0 / h2;
            }
            b[r] = div.data[r];
            a[(n, r)] = 1.0;
        }
    }
    let at = a.transpose();
    let p = (&at * &a).lu().solve(&(&at * b)).unwrap();
    p.iter().copied().collect()
}

#[test]
fn random_periodic_projection_matches_dense_oracle() {
    let d = Domain::new(16, 16, 1.0, BoundarySpec::periodic()).unwrap();
    let v = random_velocity(&d, 21);
    let (out, p) = make_incompressible(&v, &PhysicsParams::new(0.0, 1.0)).unwrap();
    assert!(max_div(&out) <= 1e-6);
    let oracle = dense_periodic_pressure(&v);
    let shift = p.mean(0) - oracle.iter().sum::<f64>() / oracle.len() as f64;
    for (a, b) in p.data.iter().zip(&oracle) {
        assert!((a - b - shift).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn projection_bounds_in_both_precisions() {
    for (k, b) in [BoundarySpec::periodic(), BoundarySpec::closed(), BoundarySpec::open()].into_iter().enumerate() {
        for n in [16, 32, 64] {
            let d = Domain::new(n, n, 1.0, b).unwrap();
            let v = random_velocity(&d, 100 + k as u64 * 7 + n as u64);
            let tape64 = Tape::<f64>::no_grad();
            let s64 = Solver::<f64>::new(d, PhysicsParams::new(0.0, 1.0)).unwrap();
            let w = s64.apply_boundary(&tape64.constant(tensor(&v.to_compact()))).unwrap();
            let (w, _) = s64.project(&w).unwrap();
            assert!(s64.max_divergence(w.data()) <= 1e-9, "f64 {n} {b:?}");

            let tape32 = Tape::<f32>::no_grad();
            let s32 = Solver::<f32>::new(d, PhysicsParams::new(0.0, 1.0)).unwrap();
            let w = s32.apply_boundary(&tape32.constant(tensor(&v.to_compact()))).unwrap();
            let (w, _) = s32.project(&w).unwrap();
            assert!(s32.max_divergence(w.data()) <= 1e-5, "f32 {n} {b:?}: {}", s32.max_divergence(w.data()));
        }
    }
}

#[test]
fn projection_is_idempotent() {
    let d = Domain::new(24, 16, 1.0, BoundarySpec::closed()).unwrap();
    let params = PhysicsParams::new(0.0, 1.0);
    let (once, _) = make_incompressible(&random_velocity(&d, 4), &params).unwrap();
    let (twice, _) = make_incompressible(&once, &params).unwrap();
    let tol = f64::default_cg_tolerance();
    for (a, b) in once.u.iter().zip(&twice.u).chain(once.v.iter().zip(&twice.v)) {
        assert!((a - b).abs() <= 10.0 * tol.max(1e-12));
    }
}

#[test]
fn forces_and_buoyancy() {
    let d = Domain::new(6, 5, 1.0, BoundarySpec::closed()).unwrap();
    let v = random_velocity(&d, 8);
    assert_eq!(apply_forces(&v, &StaggeredGrid::zeros(&d), 0.3), v);
    let g = random_velocity(&d, 9);
    let out = apply_forces(&v, &g, 0.3);
    for ((o, i), g) in out.u.iter().zip(&v.u).zip(&g.u) {
        assert_eq!(*o, i + 0.3 * g);
    }
    let marker = CenteredGrid::from_fn(&d, 1, |_, _| vec![1.0]);
    let out = apply_buoyancy(&v, &marker, 0.25, 0.2).unwrap();
    assert_eq!(out.u, v.u);
    for (o, i) in out.v.iter().zip(&v.v) {
        assert!((o - i - 0.05).abs() < 1e-15);
    }
}

#[test]
fn zero_state_is_fixed_point() {
    let d = Domain::new(8, 8, 1.0, BoundarySpec::periodic()).unwrap();
    let s = Solver::<f64>::new(d, PhysicsParams::new(0.1, 1.0)).unwrap();
    let out = s.step(&SimState::new(StaggeredGrid::zeros(&d)), None).unwrap();
    assert!(out.velocity.u.iter().chain(&out.velocity.v).all(|&x| x == 0.0));
    assert_eq!(out.time, 1);
}

#[test]
fn rollout_is_composition_of_steps() {
    let d = Domain::new(12, 12, 1.0, BoundarySpec::periodic()).unwrap();
    let s = Solver::<f32>::new(d, PhysicsParams::new(0.1, 1.0)).unwrap();
    let (v, _) = make_incompressible(&random_velocity(&d, 2), &PhysicsParams::new(0.0, 1.0)).unwrap();
    let s0 = SimState::new(v);
    let two = s.step(&s.step(&s0, None).unwrap(), None).unwrap();
    let fused = s.rollout(&s0, 2).unwrap();
    assert_eq!(fused[1], two);
    assert_eq!(s.rollout(&s0, 2).unwrap(), fused);
}

fn obstacle_domain() -> (Domain, PhysicsParams) {
    let b = BoundarySpec {
        left: Side::Closed,
        right: Side::Closed,
        bottom: Side::Inflow { vx: 0.0, vy: 1.0 },
        top: Side::Open,
    };
    let d = Domain::new(32, 64, 1.0, b).unwrap();
    let mask = CenteredGrid::from_fn(&d, 1, |x, y| {
        vec![if (x - 16.0).powi(2) + (y - 16.0).powi(2) <= 16.0 { 1.0 } else { 0.0 }]
    });
    (d, PhysicsParams::new(0.02, 1.0).with_obstacle(mask))
}

#[test]
fn obstacle_flow_stays_solenoidal_and_masked() {
    let (d, params) = obstacle_domain();
    let mask = params.obstacle_mask.clone().unwrap();
    let s = Solver::<f64>::new(d, params).unwrap();
    let mut state = SimState::new(StaggeredGrid::from_fn(&d, |_, _| 0.0, |_, _| 1.0));
    for _ in 0..20 {
        state = s.step(&state, None).unwrap();
        assert!(s.max_divergence(&state.velocity.to_compact()) <= 1e-5);
        for j in 0..d.ny {
            for i in 0..d.nx {
                if mask.get(0, i, j) == 1.0 {
                    let v = &state.velocity;
                    assert_eq!([v.u_at(i, j), v.u_at(i + 1, j), v.v_at(i, j), v.v_at(i, j + 1)], [0.0; 4]);
                }
            }
        }
    }
}

#[test]
fn mean_momentum_drift_is_small_on_periodic_domain() {
    let d = Domain::new(16, 16, 1.0, BoundarySpec::periodic()).unwrap();
    let s = Solver::<f64>::new(d, PhysicsParams::new(0.05, 1.0)).unwrap();
    let tau = 2.0 * std::f64::consts::PI / 16.0;
    let swirl = solenoidal(&d, |x, y| 0.1 * (tau * x).sin() * (tau * y).sin() + 0.05 * (2.0 * tau * x + 1.0).cos());
    let v = StaggeredGrid::from_fn(&d, |_, _| 0.2, |_, _| -0.1);
    let v = apply_forces(&v, &swirl, 1.0);
    assert!(max_div(&v) < 1e-12);
    let mean = |g: &StaggeredGrid| {
        let c = g.to_compact();
        let nu = d.nu();
        (c[..nu].iter().sum::<f64>() / nu as f64, c[nu..].iter().sum::<f64>() / (c.len() - nu) as f64)
    };
    let m0 = mean(&v);
    let states = s.rollout(&SimState::new(v), 50).unwrap();
    let m1 = mean(&states[49].velocity);
    assert!((m0.0 - m1.0).abs() <= 1e-3 && (m0.1 - m1.1).abs() <= 1e-3, "{m0:?} {m1:?}");
}

#[test]
fn diffusion_alone_does_not_increase_energy() {
    let d = Domain::new(16, 16, 1.0, BoundarySpec::periodic()).unwrap();
    let s = Solver::<f64>::new(d, PhysicsParams::new(0.2, 1.0)).unwrap();
    let tape = Tape::no_grad();
    let mut w = tape.constant(tensor(&random_velocity(&d, 5).to_compact()));
    let energy = |w: &Var<'_, f64>| w.data().iter().map(|x| x * x).sum::<f64>();
    for _ in 0..10 {
        let next = s.diffuse(&w).unwrap();
        assert!(energy(&next) <= energy(&w));
        w = next;
    }
}

#[test]
fn projection_jacobian_is_self_consistent() {
    let d = Domain::new(10, 8, 1.0, BoundarySpec::closed()).unwrap();
    let s = Solver::<f64>::new(d, PhysicsParams::new(0.0, 1.0)).unwrap();
    let v = tensor::<f64>(&random_velocity(&d, 31).to_compact());
    let w = tensor::<f64>(&random_velocity(&d, 32).to_compact());
    // J v: projection is linear, so its value at v is J v.
    let tape = Tape::new();
    let x = tape.param(v.clone());
    let (jv, _) = s.project(&x).unwrap();
    let lhs: f64 = jv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let loss = jv.dot(&tape.constant(w)).unwrap();
    let jtw = tape.backward(&loss).unwrap().wrt(&x);
    let rhs: f64 = v.data().iter().zip(jtw.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn one_step_gradient_matches_finite_differences() {
    let d = Domain::new(8, 8, 1.0, BoundarySpec::periodic()).unwrap();
    // Finite differences resolve the CG truncation unless the solve is tight.
    let params = PhysicsParams { cg_tolerance: Some(1e-14), ..PhysicsParams::new(0.05, 1.0) };
    let s = Solver::<f64>::new(d, params).unwrap();
    let (v, _) = make_incompressible(&random_velocity(&d, 12), &PhysicsParams::new(0.0, 1.0)).unwrap();
    let target = tensor::<f64>(&random_velocity(&d, 13).to_compact());
    let start = tensor::<f64>(&v.to_compact().iter().map(|x| 0.4 * x).collect::<Vec<_>>());
    fn loss<'t>(s: &Solver<f64>, target: &Tensor<f64>, tape: &'t Tape<f64>, x: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        let st = StateVar { velocity: x[0].clone(), marker: None };
        let next = s.step_var(&st, None)?;
        Ok(next.velocity.sub(&tape.constant(target.clone()))?.square().mean())
    }
    let central = gradient_check(|t, x| loss(&s, &target, t, x), std::slice::from_ref(&start), 1e-5).unwrap();
    assert!(central.max_rel_error < 1e-4, "{}", central.max_rel_error);
    // One component is ~1e-7 in magnitude, where central-difference rounding
    // noise alone reaches ~1e-5 relative. The five-point stencil at a larger
    // step resolves it while staying below the bilinear kink scale.
    let all: Vec<_> = (0..start.len()).map(|k| (0, k)).collect();
    let five = gradient_check_with(|t, x| loss(&s, &target, t, x), &[start], &all, 1e-4, Stencil::FivePoint).unwrap();
    assert!(five.max_rel_error < 1e-5, "{}", five.max_rel_error);
}

#[test]
fn nonconvergent_solve_reports_residual() {
    let d = Domain::new(16, 16, 1.0, BoundarySpec::periodic()).unwrap();
    let mut params = PhysicsParams::new(0.0, 1.0);
    params.cg_max_iterations = 2;
    match make_incompressible(&random_velocity(&d, 1), &params) {
        Err(Error::PoissonDivergence { iterations: 2, residual }) => assert!(residual > 0.0),
        other => panic!("unexpected {other:?}"),
    }
}
