//! Spectral pressure solver.
//!
//! Horizontal transforms along Y then X (each on complete lines after a
//! pencil transpose), a tridiagonal solve per horizontal wavenumber along Z,
//! and the inverse path back. One solve performs eight single-step
//! transposes.

mod kernel;

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex;

pub use kernel::{is_transformable, plan, Kernel1d, KernelChoice, NaiveDft, RustFftKernel};

use crate::decomp::{pencil_transpose, Comm, Field3D, GlobalGrid, Orientation, Pencil, PencilLayout, ReduceOp};
use crate::error::{Error, Result, SolverError};
use crate::precision::Real;
use crate::solver::SolverConfig;

/// Eigenvalues of the periodic second difference, `(2 - 2cos(2 pi k / N)) / d^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedWavenumbers {
    pub lambda_y: Vec<f64>,
    pub lambda_x: Vec<f64>,
}

impl ModifiedWavenumbers {
    pub fn new(grid: &GlobalGrid) -> Self {
        let axis = |n: usize, d: f64| -> Vec<f64> {
            (0..n)
                .map(|k| (2.0 - 2.0 * (2.0 * PI * k as f64 / n as f64).cos()) / (d * d))
                .collect()
        };
        ModifiedWavenumbers {
            lambda_y: axis(grid.ny, grid.dy),
            lambda_x: axis(grid.nx, grid.dx),
        }
    }
}

/// Complex coefficients `(z, ky, kx)` held in Z pencils.
pub type SpectralField<T> = Pencil<Complex<T>>;

/// Solves `(D2z - lambda) p = f` in place with zero-gradient rows at both
/// ends. For `lambda == 0` the system is singular; `p[0]` is pinned, the
/// remaining rows are solved, and the column mean is removed.
pub fn thomas_column<T: Real>(f: &mut [Complex<T>], lambda: f64, dz: f64) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let a = 1.0 / (dz * dz);
    let singular = lambda == 0.0;
    if n == 1 {
        f[0] = if singular {
            Complex::default()
        } else {
            f[0] * T::of(-1.0 / lambda)
        };
        return;
    }
    let diag = |k: usize| {
        let couplings = if k == 0 || k == n - 1 { 1.0 } else { 2.0 };
        -couplings * a - lambda
    };
    let first = if singular { 1 } else { 0 };
    // Forward sweep in f64 coefficients; the right-hand side stays in T.
    let mut cprime = vec![0.0f64; n];
    let mut d: Vec<Complex<f64>> = f.iter().map(|c| Complex::new(c.re.f64(), c.im.f64())).collect();
    let mut denom = diag(first);
    cprime[first] = a / denom;
    d[first] /= denom;
    for k in first + 1..n {
        denom = diag(k) - a * cprime[k - 1];
        cprime[k] = if k + 1 < n { a / denom } else { 0.0 };
        d[k] = (d[k] - d[k - 1] * a) / denom;
    }
    for k in (first..n - 1).rev() {
        d[k] = d[k] - d[k + 1] * cprime[k];
    }
    if singular {
        d[0] = Complex::new(0.0, 0.0);
        let mean = d.iter().sum::<Complex<f64>>() / n as f64;
        for v in d.iter_mut() {
            *v -= mean;
        }
    }
    for (out, v) in f.iter_mut().zip(d) {
        *out = Complex::new(T::of(v.re), T::of(v.im));
    }
}

/// Planned transforms and wavenumbers for one layout.
pub struct FftSolver<T: Real> {
    layout: PencilLayout,
    wavenumbers: ModifiedWavenumbers,
    along_y: Arc<dyn Kernel1d<T>>,
    along_x: Arc<dyn Kernel1d<T>>,
}

impl<T: Real> FftSolver<T> {
    pub fn new(layout: &PencilLayout, kernel: KernelChoice) -> Result<Self> {
        let g = layout.grid;
        for (axis, n) in [("y", g.ny), ("x", g.nx)] {
            if !is_transformable(n) {
                return Err(Error::config(format!(
                    "FFT solver needs {axis} size with prime factors 2, 3, 5 only; got {n}"
                )));
            }
        }
        if layout.py > g.nz {
            return Err(Error::Decomposition(format!(
                "FFT transposes split z ({}) across {} worker rows",
                g.nz, layout.py
            )));
        }
        Ok(FftSolver {
            layout: layout.clone(),
            wavenumbers: ModifiedWavenumbers::new(&g),
            along_y: plan(kernel, g.ny),
            along_x: plan(kernel, g.nx),
        })
    }

    pub fn layout(&self) -> &PencilLayout {
        &self.layout
    }

    pub fn wavenumbers(&self) -> &ModifiedWavenumbers {
        &self.wavenumbers
    }

    /// Unnormalised forward transform; the result is in Z pencils.
    pub fn forward(&self, field: &Field3D<T>, comm: &mut Comm) -> Result<SpectralField<T>> {
        let l = &self.layout;
        let z = Pencil::from_field(field, l).map(|v| Complex::new(v, T::zero()));
        let mut y = pencil_transpose(&z, l, Orientation::Y, comm)?;
        for (_, line) in y.lines_mut() {
            self.along_y.forward(line);
        }
        let mut x = pencil_transpose(&y, l, Orientation::X, comm)?;
        for (_, line) in x.lines_mut() {
            self.along_x.forward(line);
        }
        let y = pencil_transpose(&x, l, Orientation::Y, comm)?;
        Ok(pencil_transpose(&y, l, Orientation::Z, comm)?)
    }

    /// Inverse transform normalised by `1 / (Nx Ny)`; the imaginary part is
    /// discarded.
    pub fn backward(&self, spec: &SpectralField<T>, comm: &mut Comm) -> Result<Field3D<T>> {
        let l = &self.layout;
        let mut x = pencil_transpose(spec, l, Orientation::X, comm)?;
        for (_, line) in x.lines_mut() {
            self.along_x.inverse(line);
        }
        let mut y = pencil_transpose(&x, l, Orientation::Y, comm)?;
        for (_, line) in y.lines_mut() {
            self.along_y.inverse(line);
        }
        let z = pencil_transpose(&y, l, Orientation::Z, comm)?;
        let scale = T::of(1.0 / (l.grid.nx * l.grid.ny) as f64);
        Ok(z.map(|c| c.re * scale).to_field())
    }

    /// Per-wavenumber vertical solve on Z pencils.
    pub fn vertical_solve(&self, spec: &mut SpectralField<T>) {
        let dz = self.layout.grid.dz;
        let wn = &self.wavenumbers;
        for ([ky, kx], column) in spec.lines_mut() {
            thomas_column(column, wn.lambda_y[ky] + wn.lambda_x[kx], dz);
        }
    }

    /// Solves `A p = rhs` with the mean-zero gauge. Collective.
    pub fn solve(&self, rhs: &Field3D<T>, comm: &mut Comm) -> Result<Field3D<T>> {
        check_compatible(rhs, self.layout.grid.points(), comm)?;
        let mut spec = self.forward(rhs, comm)?;
        self.vertical_solve(&mut spec);
        let p = self.backward(&spec, comm)?;
        if p.raw().iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite("FFT pressure solve").into());
        }
        Ok(p)
    }
}

/// Rejects a source whose global mean is not negligible relative to its
/// max-norm (the periodic/Neumann problem has no solution then).
fn check_compatible<T: Real>(rhs: &Field3D<T>, points: usize, comm: &mut Comm) -> Result<()> {
    let interior = rhs.interior();
    let sum: f64 = interior.iter().map(|v| v.f64()).sum();
    let maxabs = interior.iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    let sum = comm.all_reduce_scalar(sum, ReduceOp::Sum)?;
    let maxabs = comm.all_reduce_scalar(maxabs, ReduceOp::Max)?;
    let mean = sum / points as f64;
    let threshold = 1e-10f64.max(10.0 * T::epsilon().f64());
    if mean.abs() > threshold * maxabs {
        return Err(SolverError::Singular { mean, scale: maxabs }.into());
    }
    Ok(())
}

/// One-shot solve at the precision selected in `config`. The returned field
/// has unset halos.
pub fn solve_pressure_fft(
    rhs: &Field3D<f64>,
    layout: &PencilLayout,
    comm: &mut Comm,
    config: &SolverConfig,
) -> Result<Field3D<f64>> {
    match config.precision {
        crate::Precision::Double => FftSolver::<f64>::new(layout, config.kernel)?.solve(rhs, comm),
        crate::Precision::Single => Ok(FftSolver::<f32>::new(layout, config.kernel)?
            .solve(&rhs.cast(), comm)?
            .cast()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose, gather_global, run_ranks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_tridiagonal(n: usize, lambda: f64, dz: f64) -> Vec<Vec<f64>> {
        let a = 1.0 / (dz * dz);
        let mut m = vec![vec![0.0; n]; n];
        for k in 0..n {
            if k > 0 {
                m[k][k - 1] = a;
                m[k][k] -= a;
            }
            if k + 1 < n {
                m[k][k + 1] = a;
                m[k][k] -= a;
            }
            m[k][k] -= lambda;
        }
        m
    }

    #[test]
    fn scalar_column() {
        let mut f = [Complex::new(3.0f64, -1.0)];
        thomas_column(&mut f, 2.0, 1.0);
        assert_eq!(f[0], Complex::new(-1.5, 0.5));
        let mut z = [Complex::new(0.0f64, 0.0); 5];
        thomas_column(&mut z, 0.0, 1.0);
        assert!(z.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn column_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, lambda, dz) = (8, 0.7, 0.5);
        let f: Vec<Complex<f64>> = (0..n)
            .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut p = f.clone();
        thomas_column(&mut p, lambda, dz);
        let m = dense_tridiagonal(n, lambda, dz);
        for k in 0..n {
            let ap: Complex<f64> = (0..n).map(|c| p[c] * m[k][c]).sum();
            assert!((ap - f[k]).norm() < 1e-12, "row {k}");
        }
    }

    #[test]
    fn singular_column_is_gauged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let mut f: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.random_range(-1.0..1.0), 0.0)).collect();
        let mean = f.iter().sum::<Complex<f64>>() / n as f64;
        f.iter_mut().for_each(|v| *v -= mean);
        let mut p = f.clone();
        thomas_column(&mut p, 0.0, 1.0);
        let m = dense_tridiagonal(n, 0.0, 1.0);
        for k in 0..n {
            let ap: Complex<f64> = (0..n).map(|c| p[c] * m[k][c]).sum();
            assert!((ap - f[k]).norm() < 1e-12);
        }
        assert!(p.iter().sum::<Complex<f64>>().norm() < 1e-12);
    }

    #[test]
    fn wavenumbers_closed_form() {
        let g = GlobalGrid::new(4, 8, 6, 1.0, 2.0, 0.5).unwrap();
        let wn = ModifiedWavenumbers::new(&g);
        assert_eq!(wn.lambda_y[0], 0.0);
        assert!((wn.lambda_y[4] - 1.0).abs() < 1e-15);
        assert!((wn.lambda_x[3] - 16.0).abs() < 1e-12);
        assert!(wn.lambda_x.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn constant_field_is_pure_dc() {
        let g = GlobalGrid::unit(3, 4, 6).unwrap();
        let layout = &decompose(g, 1).unwrap()[0];
        let solver = FftSolver::<f64>::new(layout, KernelChoice::RustFft).unwrap();
        let mut comm = Comm::local_group(1).pop().unwrap();
        let f = Field3D::from_global_fn(layout, |_, _, _| 2.5);
        let spec = solver.forward(&f, &mut comm).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..6 {
                    let want = if y == 0 && x == 0 { 2.5 * 24.0 } else { 0.0 };
                    assert!((spec.at_global(z, y, x) - Complex::new(want, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cosine_has_two_coefficients() {
        let g = GlobalGrid::unit(2, 4, 16).unwrap();
        let layout = &decompose(g, 1).unwrap()[0];
        let solver = FftSolver::<f64>::new(layout, KernelChoice::Naive).unwrap();
        let mut comm = Comm::local_group(1).pop().unwrap();
        let f = Field3D::from_global_fn(layout, |_, _, i| (2.0 * PI * 3.0 * i as f64 / 16.0).cos());
        let spec = solver.forward(&f, &mut comm).unwrap();
        let nonzero: Vec<(usize, usize)> = (0..4)
            .flat_map(|y| (0..16).map(move |x| (y, x)))
            .filter(|&(y, x)| spec.at_global(0, y, x).norm() > 1e-9)
            .collect();
        assert_eq!(nonzero, vec![(0, 3), (0, 13)]);
    }

    #[test]
    fn round_trip_over_ranks() {
        let g = GlobalGrid::unit(4, 8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let global: Vec<f64> = (0..g.points()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for w in [1, 2, 4] {
            let layouts = decompose(g, w).unwrap();
            let global = &global;
            run_ranks(w, |mut comm| {
                let l = &layouts[comm.rank()];
                let solver = FftSolver::<f64>::new(l, KernelChoice::RustFft).unwrap();
                let f = Field3D::from_global(l, global);
                let back = solver.backward(&solver.forward(&f, &mut comm).unwrap(), &mut comm).unwrap();
                for (a, b) in back.interior().iter().zip(f.interior()) {
                    assert!((a - b).abs() < 1e-12);
                }
            });
        }
    }

    #[test]
    fn single_mode_closed_form() {
        let g = GlobalGrid::unit(3, 4, 8).unwrap();
        let layout = &decompose(g, 1).unwrap()[0];
        let mut comm = Comm::local_group(1).pop().unwrap();
        let rhs = Field3D::from_global_fn(layout, |_, _, i| (2.0 * PI * i as f64 / 8.0).sin());
        let p = solve_pressure_fft(&rhs, layout, &mut comm, &SolverConfig::default()).unwrap();
        let lx1 = ModifiedWavenumbers::new(&g).lambda_x[1];
        for (pv, rv) in p.interior().iter().zip(rhs.interior()) {
            assert!((pv + rv / lx1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_source_and_incompatible_source() {
        let g = GlobalGrid::unit(4, 4, 4).unwrap();
        let layout = &decompose(g, 1).unwrap()[0];
        let mut comm = Comm::local_group(1).pop().unwrap();
        let cfg = SolverConfig::default();
        let p = solve_pressure_fft(&Field3D::for_layout(layout), layout, &mut comm, &cfg).unwrap();
        assert!(p.interior().iter().all(|&v| v == 0.0));
        let ones = Field3D::from_global_fn(layout, |_, _, _| 1.0);
        assert!(matches!(
            solve_pressure_fft(&ones, layout, &mut comm, &cfg),
            Err(Error::Solver(SolverError::Singular { .. }))
        ));
    }

    #[test]
    fn bad_sizes_rejected() {
        let g = GlobalGrid::unit(4, 7, 4).unwrap();
        let layout = &decompose(g, 1).unwrap()[0];
        assert!(matches!(FftSolver::<f64>::new(layout, KernelChoice::RustFft), Err(Error::Config(_))));
    }

    #[test]
    fn gathered_solution_independent_of_workers() {
        let g = GlobalGrid::unit(4, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut global: Vec<f64> = (0..g.points()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = global.iter().sum::<f64>() / global.len() as f64;
        global.iter_mut().for_each(|v| *v -= mean);
        let solve = |w: usize| {
            let layouts = decompose(g, w).unwrap();
            let global = &global;
            run_ranks(w, |mut comm| {
                let l = &layouts[comm.rank()];
                let p = solve_pressure_fft(&Field3D::from_global(l, global), l, &mut comm, &SolverConfig::default())
                    .unwrap();
                gather_global(&p, l, &mut comm, 0).unwrap()
            })
            .into_iter()
            .next()
            .unwrap()
            .unwrap()
        };
        let (a, b) = (solve(1), solve(4));
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * scale);
        }
    }
}
