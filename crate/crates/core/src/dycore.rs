//! Minimal prognostic model for the dry boundary layer case.
//!
//! Not atmospheric science: first-order upwind advection, constant
//! viscosity diffusion, relaxation toward the geostrophic wind and a linear
//! buoyancy term, stepped with explicit Euler. It exists to generate
//! realistic pressure-solver workloads and diagnostics traffic.
//!
//! Velocities live on a C-grid: `u` on east faces, `v` on north faces, `w`
//! on top faces with `w = 0` on the lid (`k = nz - 1`) and an implied zero
//! below the first level. Scalars sit at cell centres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomp::{Field3D, ReduceOp};
use crate::error::{Error, Result};
use crate::options::OptionsDatabase;
use crate::state::ModelState;

pub const GRAVITY: f64 = 9.81;
pub const REFERENCE_THETA: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DryBoundaryLayer {
    pub ug: f64,
    pub vg: f64,
    pub amplitude: f64,
    pub seed: u64,
}

impl DryBoundaryLayer {
    pub fn from_options(opts: &OptionsDatabase) -> Result<Self> {
        let seed = opts.int("seed")?;
        Ok(DryBoundaryLayer {
            ug: opts.real("ug")?,
            vg: opts.real("vg")?,
            amplitude: opts.real("theta_perturbation_amplitude")?,
            seed: seed as u64,
        })
    }
}

/// Uniform noise in `[-amplitude, amplitude)` for a global cell. The stream
/// position is keyed by the cell's global index, so the value does not
/// depend on the decomposition.
pub fn perturbation(seed: u64, global_index: usize, amplitude: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(2 * global_index as u128);
    amplitude * (2.0 * rng.random::<f64>() - 1.0)
}

/// Sets `u = ug`, `v = vg`, `w = 0`, `p = rhs = 0` and seeds `theta` with
/// noise in the lowest quarter of the column.
pub fn init_dry_boundary_layer(state: &mut ModelState) -> Result<()> {
    let cfg = DryBoundaryLayer::from_options(&state.options)?;
    let layout = state.layout.clone();
    let g = layout.grid;
    let levels = (g.nz / 4).max(1);
    state.set_field("u", Field3D::from_global_fn(&layout, |_, _, _| cfg.ug));
    state.set_field("v", Field3D::from_global_fn(&layout, |_, _, _| cfg.vg));
    state.set_field("w", Field3D::for_layout(&layout));
    state.set_field("p", Field3D::for_layout(&layout));
    state.set_field("rhs", Field3D::for_layout(&layout));
    let theta = Field3D::from_global_fn(&layout, |k, j, i| {
        if k < levels && cfg.amplitude != 0.0 {
            perturbation(cfg.seed, g.index(k, j, i), cfg.amplitude)
        } else {
            0.0
        }
    });
    state.set_field("theta", theta);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsConfig {
    pub viscosity: f64,
    /// Relaxation rate toward the geostrophic wind, 1/s.
    pub forcing_rate: f64,
    pub ug: f64,
    pub vg: f64,
}

impl DynamicsConfig {
    pub fn from_options(opts: &OptionsDatabase) -> Result<Self> {
        Ok(DynamicsConfig {
            viscosity: opts.real_or("viscosity", 0.0)?,
            forcing_rate: opts.real_or("forcing_rate", 0.0)?,
            ug: opts.real_or("ug", 0.0)?,
            vg: opts.real_or("vg", 0.0)?,
        })
    }
}

/// Largest per-axis Courant number over all ranks.
pub fn courant_number(state: &mut ModelState) -> Result<f64> {
    let g = state.grid();
    let dt = state.dtm;
    let mut c = 0.0f64;
    for (name, d) in [("u", g.dx), ("v", g.dy), ("w", g.dz)] {
        let m = state.field(name)?.interior().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        c = c.max(m * dt / d);
    }
    Ok(state.comm.all_reduce_scalar(c, ReduceOp::Max)?)
}

/// One explicit Euler step of advection, diffusion and forcing, writing
/// provisional `u`, `v`, `w` and the new `theta`. Collective.
pub fn timestep_dynamics(state: &mut ModelState) -> Result<()> {
    let cfg = DynamicsConfig::from_options(&state.options)?;
    let courant = courant_number(state)?;
    if courant > 1.0 {
        return Err(Error::Stability { courant });
    }
    state.exchange_halos(&["u", "v", "w", "theta"])?;
    let g = state.grid();
    let dt = state.dtm;
    let (u, v, w, th) = (
        state.field("u")?.clone(),
        state.field("v")?.clone(),
        state.field("w")?.clone(),
        state.field("theta")?.clone(),
    );
    let (nz, ny, nx) = u.dims();
    let (idx, idy, idz) = (1.0 / g.dx, 1.0 / g.dy, 1.0 / g.dz);
    let step = |phi: &Field3D<f64>, k: usize, j: isize, i: isize| -> f64 {
        let c = phi.get(k, j, i);
        let (uc, vc, wc) = (u.get(k, j, i), v.get(k, j, i), w.get(k, j, i));
        let upwind = |vel: f64, lo: f64, hi: f64, inv: f64| {
            if vel > 0.0 {
                vel * (c - lo) * inv
            } else {
                vel * (hi - c) * inv
            }
        };
        let below = if k > 0 { phi.get(k - 1, j, i) } else { c };
        let above = if k + 1 < nz { phi.get(k + 1, j, i) } else { c };
        let advection = upwind(uc, phi.get(k, j, i - 1), phi.get(k, j, i + 1), idx)
            + upwind(vc, phi.get(k, j - 1, i), phi.get(k, j + 1, i), idy)
            + upwind(wc, below, above, idz);
        let laplacian = (phi.get(k, j, i + 1) + phi.get(k, j, i - 1) - 2.0 * c) * idx * idx
            + (phi.get(k, j + 1, i) + phi.get(k, j - 1, i) - 2.0 * c) * idy * idy
            + (above + below - 2.0 * c) * idz * idz;
        c + dt * (cfg.viscosity * laplacian - advection)
    };
    let mut un = u.clone();
    let mut vn = v.clone();
    let mut wn = w.clone();
    let mut thn = th.clone();
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            for k in 0..nz {
                un.set(k, j, i, step(&u, k, j, i) + dt * cfg.forcing_rate * (cfg.ug - u.get(k, j, i)));
                vn.set(k, j, i, step(&v, k, j, i) + dt * cfg.forcing_rate * (cfg.vg - v.get(k, j, i)));
                let wv = if k + 1 < nz {
                    step(&w, k, j, i) + dt * GRAVITY * th.get(k, j, i) / REFERENCE_THETA
                } else {
                    0.0
                };
                wn.set(k, j, i, wv);
                thn.set(k, j, i, step(&th, k, j, i));
            }
        }
    }
    state.set_field("u", un);
    state.set_field("v", vn);
    state.set_field("w", wn);
    state.set_field("theta", thn);
    Ok(())
}

/// Cell-centred divergence of the face velocities, scaled by `1 / dtm`,
/// with its global mean removed. Refreshes the `u` and `v` halos.
pub fn compute_divergence(state: &mut ModelState) -> Result<Field3D<f64>> {
    state.exchange_halos(&["u", "v"])?;
    let g = state.grid();
    let (u, v, w) = (state.field("u")?, state.field("v")?, state.field("w")?);
    let (nz, ny, nx) = u.dims();
    let scale = if state.dtm > 0.0 { 1.0 / state.dtm } else { 1.0 };
    let mut rhs = Field3D::for_layout(&state.layout);
    let mut local = 0.0;
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            for k in 0..nz {
                let below = if k > 0 { w.get(k - 1, j, i) } else { 0.0 };
                let d = (u.get(k, j, i) - u.get(k, j, i - 1)) / g.dx
                    + (v.get(k, j, i) - v.get(k, j - 1, i)) / g.dy
                    + (w.get(k, j, i) - below) / g.dz;
                let d = d * scale;
                local += d;
                rhs.set(k, j, i, d);
            }
        }
    }
    let mean = state.comm.all_reduce_scalar(local, ReduceOp::Sum)? / g.points() as f64;
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            for c in rhs.column_mut(j, i) {
                *c -= mean;
            }
        }
    }
    Ok(rhs)
}

/// Subtracts `dtm * grad p` from the face velocities. Refreshes the `p`
/// halo.
pub fn pressure_projection(state: &mut ModelState) -> Result<()> {
    state.exchange_halos(&["p"])?;
    let g = state.grid();
    let dt = if state.dtm > 0.0 { state.dtm } else { 1.0 };
    let p = state.field("p")?.clone();
    let (nz, ny, nx) = p.dims();
    for (name, di, dj, d) in [("u", 1isize, 0isize, g.dx), ("v", 0, 1, g.dy)] {
        let f = state.field_mut(name)?;
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                for k in 0..nz {
                    let grad = (p.get(k, j + dj, i + di) - p.get(k, j, i)) / d;
                    f.set(k, j, i, f.get(k, j, i) - dt * grad);
                }
            }
        }
    }
    let w = state.field_mut("w")?;
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            for k in 0..nz {
                let v = if k + 1 < nz {
                    w.get(k, j, i) - dt * (p.get(k + 1, j, i) - p.get(k, j, i)) / g.dz
                } else {
                    0.0
                };
                w.set(k, j, i, v);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose, gather_global, run_ranks, Comm, GlobalGrid, PencilLayout};
    use crate::fft::FftSolver;
    use crate::solver::SolverConfig;
    use std::sync::Arc;

    fn state(layout: &PencilLayout, comm: Comm, config: &str) -> ModelState {
        let opts = OptionsDatabase::load_config(config).unwrap();
        ModelState::new(layout.clone(), Arc::new(opts), comm).unwrap()
    }

    const BASE: &str = "ug=0\nvg=0\ntheta_perturbation_amplitude=0.5\nseed=7\ndtm=0.1";

    #[test]
    fn missing_option_named() {
        let g = GlobalGrid::unit(2, 2, 2).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "ug=1\nseed=1\ntheta_perturbation_amplitude=0");
        let err = init_dry_boundary_layer(&mut s).unwrap_err();
        assert!(err.to_string().contains("`vg`"), "{err}");
    }

    #[test]
    fn zero_amplitude_is_uniform() {
        let g = GlobalGrid::unit(8, 4, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "ug=3\nvg=-1\ntheta_perturbation_amplitude=0\nseed=1");
        init_dry_boundary_layer(&mut s).unwrap();
        assert!(s.field("theta").unwrap().interior().iter().all(|&v| v == 0.0));
        assert!(s.field("u").unwrap().interior().iter().all(|&v| v == 3.0));
        assert!(s.field("v").unwrap().interior().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn theta_independent_of_decomposition() {
        let g = GlobalGrid::unit(8, 8, 8).unwrap();
        let gathered: Vec<Vec<f64>> = [1, 4]
            .into_iter()
            .map(|w| {
                let layouts = decompose(g, w).unwrap();
                run_ranks(w, |comm| {
                    let l = &layouts[comm.rank()];
                    let mut s = state(l, comm, BASE);
                    init_dry_boundary_layer(&mut s).unwrap();
                    let f = s.field("theta").unwrap().clone();
                    gather_global(&f, l, &mut s.comm, 0).unwrap()
                })
                .remove(0)
                .unwrap()
            })
            .collect();
        assert_eq!(gathered[0], gathered[1]);
        let nonzero = gathered[0].iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 2 * 64);
        assert!(gathered[0].iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn weak_scaling_cell_point_count() {
        let g = GlobalGrid::unit(64, 32, 32).unwrap();
        assert_eq!(decompose(g, 1).unwrap()[0].local_points(), 65536);
    }

    #[test]
    fn rest_state_is_a_fixed_point() {
        let g = GlobalGrid::unit(4, 4, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "viscosity=0.1\ndtm=0.1");
        timestep_dynamics(&mut s).unwrap();
        for name in ["u", "v", "w", "theta"] {
            assert!(s.field(name).unwrap().interior().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn diffusion_conserves_theta() {
        let g = GlobalGrid::unit(4, 6, 6).unwrap();
        let layouts = decompose(g, 2).unwrap();
        run_ranks(2, |comm| {
            let l = &layouts[comm.rank()];
            let mut s = state(l, comm, "viscosity=0.05\ndtm=0.5");
            s.set_field("theta", Field3D::from_global_fn(l, |k, j, i| if (k, j, i) == (1, 2, 3) { 1.0 } else { 0.0 }));
            // one step: w starts at rest, so buoyancy has not yet fed advection
            timestep_dynamics(&mut s).unwrap();
            let local: f64 = s.field("theta").unwrap().interior().iter().sum();
            let total = s.comm.all_reduce_scalar(local, ReduceOp::Sum).unwrap();
            assert!((total - 1.0).abs() <= 1e-12, "total {total}");
        });
    }

    #[test]
    fn unit_courant_shifts_by_one_cell() {
        let g = GlobalGrid::unit(2, 4, 8).unwrap();
        let layouts = decompose(g, 2).unwrap();
        let blob = |k: usize, j: usize, i: usize| if i == 2 && j == 1 { 1.0 + k as f64 } else { 0.0 };
        run_ranks(2, |comm| {
            let l = &layouts[comm.rank()];
            let mut s = state(l, comm, "dtm=0.5");
            s.set_field("u", Field3D::from_global_fn(l, |_, _, _| 2.0));
            s.set_field("theta", Field3D::from_global_fn(l, blob));
            timestep_dynamics(&mut s).unwrap();
            let want = Field3D::from_global_fn(l, |k, j, i| blob(k, j, (i + 7) % 8));
            assert_eq!(s.field("theta").unwrap().interior(), want.interior());
        });
    }

    #[test]
    fn cfl_violation_reported() {
        let g = GlobalGrid::unit(2, 2, 2).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "dtm=1");
        s.set_field("u", Field3D::from_global_fn(l, |_, _, _| 1.5));
        match timestep_dynamics(&mut s) {
            Err(Error::Stability { courant }) => assert_eq!(courant, 1.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn divergence_of_uniform_flow_is_zero() {
        let g = GlobalGrid::unit(3, 4, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "dtm=0.1");
        s.set_field("u", Field3D::from_global_fn(l, |_, _, _| 4.0));
        s.set_field("v", Field3D::from_global_fn(l, |_, _, _| -2.0));
        let d = compute_divergence(&mut s).unwrap();
        assert!(d.interior().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_of_sawtooth_matches_hand_differences() {
        let g = GlobalGrid::new(2, 2, 4, 1.0, 1.0, 0.5).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "dtm=2");
        s.set_field("u", Field3D::from_global_fn(l, |_, _, i| i as f64));
        let d = compute_divergence(&mut s).unwrap();
        // u = 0,1,2,3 periodic: backward differences 1,1,1,-3 over dx = 0.5,
        // divided by dtm = 2; their mean is zero already.
        for i in 0..4 {
            let want = if i == 0 { -3.0 } else { 1.0 } / 0.5 / 2.0;
            assert_eq!(d.get(0, 0, i), want);
        }
    }

    #[test]
    fn projection_removes_divergence() {
        let g = GlobalGrid::unit(8, 8, 8).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut s = state(l, Comm::local_group(1).pop().unwrap(), "dtm=0.2");
        for (n, name) in ["u", "v", "w"].into_iter().enumerate() {
            let seed = n as u64 + 10;
            s.set_field(
                name,
                Field3D::from_global_fn(l, |k, j, i| {
                    if name == "w" && k == 7 {
                        0.0
                    } else {
                        perturbation(seed, g.index(k, j, i), 1.0)
                    }
                }),
            );
        }
        let before = compute_divergence(&mut s).unwrap().max_abs();
        let rhs = compute_divergence(&mut s).unwrap();
        let solver = FftSolver::<f64>::new(l, SolverConfig::default().kernel).unwrap();
        let p = solver.solve(&rhs, &mut s.comm).unwrap();
        s.set_field("p", p);
        pressure_projection(&mut s).unwrap();
        let after = compute_divergence(&mut s).unwrap().max_abs();
        assert!(before > 1.0);
        assert!(after * 0.2 < 1e-10, "{after}");
    }
}
