//! ILU(0)-preconditioned BiCGStab on the 7-point Laplacian.
//!
//! The operator is periodic in X and Y (through the halo) and zero-gradient
//! at the bottom and top of every column. The preconditioner is block Jacobi:
//! each rank factors its own block with couplings that leave the block
//! dropped, so applying it needs no communication.

pub mod dense;
mod ilu;

pub use ilu::{Csr, Ilu0Factors};

use serde::{Deserialize, Serialize};

use crate::decomp::{halo_exchange, Comm, Field3D, GlobalGrid, PencilLayout, ReduceOp};
use crate::error::{Result, SolverError};
use crate::precision::{Precision, Real};
use crate::solver::{Preconditioner, SolverConfig};

/// Restarts with residual replacement allowed once the recursive residual
/// claims convergence but the true residual disagrees.
const MAX_RESTARTS: usize = 5;

/// Coefficients of the 7-point Laplacian for one grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilOperator {
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl StencilOperator {
    pub fn new(grid: &GlobalGrid) -> Self {
        StencilOperator {
            ax: 1.0 / (grid.dx * grid.dx),
            ay: 1.0 / (grid.dy * grid.dy),
            az: 1.0 / (grid.dz * grid.dz),
        }
    }

    /// `out = A x` over the interior of `x`, whose halos must be current.
    /// `out` is in Z-fastest interior order.
    pub fn apply<T: Real>(&self, x: &Field3D<T>, out: &mut [T]) {
        let (nz, ny, nx) = x.dims();
        let (ax, ay, az) = (T::of(self.ax), T::of(self.ay), T::of(self.az));
        let two = T::of(2.0);
        let mut o = 0;
        for i in 0..nx as isize {
            for j in 0..ny as isize {
                let c = x.column(j, i);
                let (n, s) = (x.column(j + 1, i), x.column(j - 1, i));
                let (e, w) = (x.column(j, i + 1), x.column(j, i - 1));
                for k in 0..nz {
                    let mut vert = T::zero();
                    if k + 1 < nz {
                        vert += c[k + 1] - c[k];
                    }
                    if k > 0 {
                        vert += c[k - 1] - c[k];
                    }
                    out[o] = ax * (e[k] + w[k] - two * c[k]) + ay * (n[k] + s[k] - two * c[k]) + az * vert;
                    o += 1;
                }
            }
        }
    }

    /// Local block in Z-fastest order. Couplings that cross the block edge
    /// (to another rank or through the periodic wrap) are dropped; the
    /// diagonal keeps its full weight, which acts as a Dirichlet closure.
    pub fn local_matrix<T: Real>(&self, layout: &PencilLayout) -> Csr<T> {
        let (nz, ny, nx) = (layout.grid.nz, layout.y.size, layout.x.size);
        let at = |k: usize, j: usize, i: usize| k + nz * (j + ny * i);
        let mut rows = Vec::with_capacity(nz * ny * nx);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let mut row = Vec::with_capacity(7);
                    let mut diag = -2.0 * self.ax - 2.0 * self.ay;
                    if k > 0 {
                        row.push((at(k - 1, j, i), T::of(self.az)));
                        diag -= self.az;
                    }
                    if k + 1 < nz {
                        row.push((at(k + 1, j, i), T::of(self.az)));
                        diag -= self.az;
                    }
                    if j > 0 {
                        row.push((at(k, j - 1, i), T::of(self.ay)));
                    }
                    if j + 1 < ny {
                        row.push((at(k, j + 1, i), T::of(self.ay)));
                    }
                    if i > 0 {
                        row.push((at(k, j, i - 1), T::of(self.ax)));
                    }
                    if i + 1 < nx {
                        row.push((at(k, j, i + 1), T::of(self.ax)));
                    }
                    row.push((at(k, j, i), T::of(diag)));
                    rows.push(row);
                }
            }
        }
        Csr::from_rows(rows)
    }
}

/// Returns `A x` after refreshing the halos of `x`. Collective.
pub fn apply_operator<T: Real>(x: &mut Field3D<T>, layout: &PencilLayout, comm: &mut Comm) -> Result<Field3D<T>> {
    halo_exchange(x, layout, comm)?;
    let mut out = vec![T::zero(); x.interior_len()];
    StencilOperator::new(&layout.grid).apply(x, &mut out);
    let mut f = Field3D::for_layout(layout);
    f.set_interior(&out);
    Ok(f)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// True relative residual `||rhs - A p|| / ||rhs||` of the returned `p`.
    pub residual: f64,
    pub restarts: usize,
    /// Recursive relative residual after each (half) iteration.
    pub history: Vec<f64>,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

/// Per-layout solver state; the factorisation is computed once and reused.
pub struct KrylovSolver<T: Real> {
    layout: PencilLayout,
    op: StencilOperator,
    factors: Option<Ilu0Factors<T>>,
    config: SolverConfig,
    work: Field3D<T>,
}

impl<T: Real> KrylovSolver<T> {
    pub fn new(layout: &PencilLayout, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let op = StencilOperator::new(&layout.grid);
        let factors = match config.preconditioner {
            Preconditioner::Ilu0 => Some(Ilu0Factors::factor(&op.local_matrix::<T>(layout))?),
            Preconditioner::None => None,
        };
        Ok(KrylovSolver {
            layout: layout.clone(),
            op,
            factors,
            config,
            work: Field3D::for_layout(layout),
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn factors(&self) -> Option<&Ilu0Factors<T>> {
        self.factors.as_ref()
    }

    fn apply_a(&mut self, x: &[T], out: &mut [T], comm: &mut Comm) -> Result<()> {
        self.work.set_interior(x);
        halo_exchange(&mut self.work, &self.layout, comm)?;
        self.op.apply(&self.work, out);
        Ok(())
    }

    fn precondition(&self, r: &[T], z: &mut [T]) {
        match &self.factors {
            Some(f) => f.apply(r, z),
            None => z.copy_from_slice(r),
        }
    }

    /// Subtracts the global mean of `x`, then returns `(r = b - A x, ||r||^2)`.
    fn finish(&mut self, b: &[T], x: &mut [T], points: f64, comm: &mut Comm) -> Result<(Vec<T>, f64)> {
        let local: f64 = x.iter().map(|v| v.f64()).sum();
        let mean = T::of(comm.all_reduce_scalar(local, ReduceOp::Sum)? / points);
        x.iter_mut().for_each(|v| *v -= mean);
        let mut ax = vec![T::zero(); x.len()];
        self.apply_a(x, &mut ax, comm)?;
        let r: Vec<T> = b.iter().zip(&ax).map(|(&bi, &a)| bi - a).collect();
        let rr = comm.all_reduce_scalar(dot(&r, &r), ReduceOp::Sum)?;
        Ok((r, rr))
    }

    /// Right-preconditioned BiCGStab from a zero initial guess. Returns the
    /// mean-zero solution. Each full iteration performs two halo exchanges
    /// and four global reductions. Collective.
    pub fn solve(&mut self, rhs: &Field3D<T>, comm: &mut Comm) -> Result<(Field3D<T>, SolveReport)> {
        let b = rhs.interior();
        let n = b.len();
        let points = self.layout.grid.points() as f64;
        let tol = self.config.tolerance;
        let mut report = SolveReport::default();

        let bb = comm.all_reduce_scalar(dot(&b, &b), ReduceOp::Sum)?;
        if bb == 0.0 {
            return Ok((Field3D::for_layout(&self.layout), report));
        }
        if !bb.is_finite() {
            return Err(SolverError::NonFinite("BiCGStab source").into());
        }
        let bnorm = bb.sqrt();

        let mut x = vec![T::zero(); n];
        let mut r = b.clone();
        let mut rhat = r.clone();
        let mut p = vec![T::zero(); n];
        let mut v = vec![T::zero(); n];
        let mut s = vec![T::zero(); n];
        let mut t = vec![T::zero(); n];
        let mut phat = vec![T::zero(); n];
        let mut shat = vec![T::zero(); n];
        let (mut rho, mut rho_old, mut alpha, mut omega) = (bb, 1.0, 1.0, 1.0);
        let mut rel = 1.0;
        report.history.push(rel);

        loop {
            if rel <= tol {
                let (r_true, rr) = self.finish(&b, &mut x, points, comm)?;
                let true_rel = rr.sqrt() / bnorm;
                if true_rel <= tol || report.restarts == MAX_RESTARTS {
                    report.residual = true_rel;
                    if true_rel > tol {
                        return Err(SolverError::NonConvergence {
                            iterations: report.iterations,
                            history: report.history,
                        }
                        .into());
                    }
                    let mut out = Field3D::for_layout(&self.layout);
                    out.set_interior(&x);
                    return Ok((out, report));
                }
                report.restarts += 1;
                r = r_true;
                rhat.copy_from_slice(&r);
                p.fill(T::zero());
                v.fill(T::zero());
                (rho, rho_old, alpha, omega) = (rr, 1.0, 1.0, 1.0);
            }
            if report.iterations == self.config.max_iterations {
                return Err(SolverError::NonConvergence {
                    iterations: report.iterations,
                    history: report.history,
                }
                .into());
            }
            report.iterations += 1;
            let it = report.iterations;
            if rho.abs() < 1e-30 * bb {
                return Err(SolverError::Breakdown { iteration: it, quantity: "rho" }.into());
            }
            let beta = T::of((rho / rho_old) * (alpha / omega));
            let om = T::of(omega);
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - om * v[i]);
            }
            self.precondition(&p, &mut phat);
            self.apply_a(&phat, &mut v, comm)?;
            let rv = comm.all_reduce_scalar(dot(&rhat, &v), ReduceOp::Sum)?;
            if rv.abs() < 1e-30 * bb || !rv.is_finite() {
                return Err(SolverError::Breakdown { iteration: it, quantity: "(r0, v)" }.into());
            }
            alpha = rho / rv;
            let al = T::of(alpha);
            for i in 0..n {
                s[i] = r[i] - al * v[i];
            }
            let ss = comm.all_reduce_scalar(dot(&s, &s), ReduceOp::Sum)?;
            if !ss.is_finite() {
                return Err(SolverError::NonFinite("BiCGStab residual").into());
            }
            if ss.sqrt() / bnorm <= tol {
                for i in 0..n {
                    x[i] += al * phat[i];
                }
                r.copy_from_slice(&s);
                rel = ss.sqrt() / bnorm;
                report.history.push(rel);
                continue;
            }
            self.precondition(&s, &mut shat);
            self.apply_a(&shat, &mut t, comm)?;
            let ts_tt = comm.all_reduce(&[dot(&t, &s), dot(&t, &t)], ReduceOp::Sum)?;
            if ts_tt[1] == 0.0 {
                return Err(SolverError::Breakdown { iteration: it, quantity: "omega" }.into());
            }
            omega = ts_tt[0] / ts_tt[1];
            if omega.abs() < 1e-30 {
                return Err(SolverError::Breakdown { iteration: it, quantity: "omega" }.into());
            }
            let om = T::of(omega);
            for i in 0..n {
                x[i] += al * phat[i] + om * shat[i];
                r[i] = s[i] - om * t[i];
            }
            rho_old = rho;
            let rr_rho = comm.all_reduce(&[dot(&r, &r), dot(&rhat, &r)], ReduceOp::Sum)?;
            rho = rr_rho[1];
            rel = rr_rho[0].sqrt() / bnorm;
            if !rel.is_finite() {
                return Err(SolverError::NonFinite("BiCGStab residual").into());
            }
            report.history.push(rel);
        }
    }
}

/// One-shot solve at the precision selected in `config`.
pub fn bicgstab_solve(
    rhs: &Field3D<f64>,
    layout: &PencilLayout,
    comm: &mut Comm,
    config: &SolverConfig,
) -> Result<(Field3D<f64>, SolveReport)> {
    match config.precision {
        Precision::Double => KrylovSolver::<f64>::new(layout, *config)?.solve(rhs, comm),
        Precision::Single => {
            let (p, report) = KrylovSolver::<f32>::new(layout, *config)?.solve(&rhs.cast(), comm)?;
            Ok((p.cast(), report))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose, gather_global, run_ranks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mean_zero(g: &GlobalGrid, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<f64> = (0..g.points()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        q.iter_mut().for_each(|v| *v -= mean);
        q
    }

    #[test]
    fn constant_in_null_space() {
        let g = GlobalGrid::new(4, 4, 6, 0.5, 1.0, 2.0).unwrap();
        let layouts = decompose(g, 4).unwrap();
        run_ranks(4, |mut comm| {
            let l = &layouts[comm.rank()];
            let mut x = Field3D::from_global_fn(l, |_, _, _| 3.0f64);
            let ax = apply_operator(&mut x, l, &mut comm).unwrap();
            assert!(ax.interior().iter().all(|&v| v == 0.0));
        });
    }

    #[test]
    fn matches_dense_assembly_bitwise_across_workers() {
        let g = GlobalGrid::new(4, 4, 4, 1.0, 0.5, 2.0).unwrap();
        let x: Vec<f64> = (0..g.points()).map(|n| n as f64).collect();
        let dense = dense::laplacian(&g);
        let want: Vec<f64> = dense.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let mut gathered = Vec::new();
        for w in [1, 4] {
            let layouts = decompose(g, w).unwrap();
            let x = &x;
            let got = run_ranks(w, |mut comm| {
                let l = &layouts[comm.rank()];
                let mut f = Field3D::from_global(l, x);
                let ax = apply_operator(&mut f, l, &mut comm).unwrap();
                gather_global(&ax, l, &mut comm, 0).unwrap()
            })
            .remove(0)
            .unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
            }
            gathered.push(got);
        }
        assert_eq!(gathered[0], gathered[1]);
    }

    #[test]
    fn zero_source_zero_iterations() {
        let g = GlobalGrid::unit(4, 4, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut comm = Comm::local_group(1).pop().unwrap();
        let (p, rep) = bicgstab_solve(&Field3D::for_layout(l), l, &mut comm, &SolverConfig::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(p.interior().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recovers_random_solution_and_reports_true_residual() {
        let g = GlobalGrid::unit(8, 8, 8).unwrap();
        let q = random_mean_zero(&g, 1);
        let rhs = dense::apply(&dense::laplacian(&g), &q);
        for w in [1, 4] {
            let layouts = decompose(g, w).unwrap();
            let (q, rhs) = (&q, &rhs);
            run_ranks(w, |mut comm| {
                let l = &layouts[comm.rank()];
                let cfg = SolverConfig::new(1e-10, Precision::Double);
                let (p, rep) = bicgstab_solve(&Field3D::from_global(l, rhs), l, &mut comm, &cfg).unwrap();
                let p = gather_global(&p, l, &mut comm, 0).unwrap();
                if let Some(p) = p {
                    let err = p.iter().zip(q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    let qmax = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    assert!(err / qmax <= 1e-8, "error {err}");
                    let ap = dense::apply(&dense::laplacian(&g), &p);
                    let res = ap.iter().zip(rhs).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
                    let bn = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(((res / bn) - rep.residual).abs() <= 1e-12 * rep.residual.max(1e-300) + 1e-15);
                }
            });
        }
    }

    #[test]
    fn single_precision_paper_tolerance() {
        let g = GlobalGrid::unit(8, 8, 8).unwrap();
        let rhs = dense::apply(&dense::laplacian(&g), &random_mean_zero(&g, 2));
        let l = &decompose(g, 1).unwrap()[0];
        let mut comm = Comm::local_group(1).pop().unwrap();
        let cfg = SolverConfig::new(1e-4, Precision::Single);
        let (_, rep) = bicgstab_solve(&Field3D::from_global(l, &rhs), l, &mut comm, &cfg).unwrap();
        assert!(rep.residual <= 1e-4, "{}", rep.residual);
        assert!(rep.iterations > 0);
    }

    #[test]
    fn four_reductions_and_two_halo_exchanges_per_iteration() {
        let g = GlobalGrid::unit(8, 8, 8).unwrap();
        let rhs = dense::apply(&dense::laplacian(&g), &random_mean_zero(&g, 3));
        let layouts = decompose(g, 4).unwrap();
        let rhs = &rhs;
        run_ranks(4, |mut comm| {
            let l = &layouts[comm.rank()];
            let mut counts = Vec::new();
            for iters in [3, 4] {
                let cfg = SolverConfig {
                    tolerance: 1e-300,
                    max_iterations: iters,
                    ..SolverConfig::default()
                };
                let mut solver = KrylovSolver::<f64>::new(l, cfg).unwrap();
                comm.reset_stats();
                let err = solver.solve(&Field3D::from_global(l, rhs), &mut comm).unwrap_err();
                assert!(matches!(err, crate::Error::Solver(SolverError::NonConvergence { .. })));
                counts.push(comm.stats());
            }
            assert_eq!(counts[1].reductions - counts[0].reductions, 4);
            assert_eq!(counts[1].halo_exchanges - counts[0].halo_exchanges, 2);
            assert_eq!(counts[1].transposes, 0);
        });
    }

    #[test]
    fn non_convergence_carries_history() {
        let g = GlobalGrid::unit(8, 8, 8).unwrap();
        let rhs = dense::apply(&dense::laplacian(&g), &random_mean_zero(&g, 4));
        let l = &decompose(g, 1).unwrap()[0];
        let mut comm = Comm::local_group(1).pop().unwrap();
        let cfg = SolverConfig {
            tolerance: 1e-14,
            max_iterations: 2,
            ..SolverConfig::default()
        };
        match bicgstab_solve(&Field3D::from_global(l, &rhs), l, &mut comm, &cfg) {
            Err(crate::Error::Solver(SolverError::NonConvergence { iterations, history })) => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preconditioner_reduces_iterations() {
        let g = GlobalGrid::unit(16, 16, 16).unwrap();
        let rhs = dense::apply_stencil(&g, &random_mean_zero(&g, 5));
        let l = &decompose(g, 1).unwrap()[0];
        let mut comm = Comm::local_group(1).pop().unwrap();
        let mut its = Vec::new();
        for pc in [Preconditioner::Ilu0, Preconditioner::None] {
            let cfg = SolverConfig {
                tolerance: 1e-6,
                preconditioner: pc,
                ..SolverConfig::default()
            };
            its.push(bicgstab_solve(&Field3D::from_global(l, &rhs), l, &mut comm, &cfg).unwrap().1.iterations);
        }
        assert!(its[0] < its[1], "{its:?}");
    }

    #[test]
    fn ilu_contracts_better_than_jacobi() {
        let g = GlobalGrid::unit(4, 4, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let op = StencilOperator::new(&g);
        let a = op.local_matrix::<f64>(l);
        let f = Ilu0Factors::factor(&a).unwrap();
        let n = a.n;
        let radius = |apply: &dyn Fn(&[f64], &mut [f64])| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut est = 0.0;
            for _ in 0..300 {
                let mut ax = vec![0.0; n];
                a.mul(&x, &mut ax);
                let mut z = vec![0.0; n];
                apply(&ax, &mut z);
                let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a - b).collect();
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                est = norm / xn;
                x = y.iter().map(|v| v / norm).collect();
            }
            est
        };
        let ilu = radius(&|r, z| f.apply(r, z));
        let jacobi = radius(&|r, z| {
            for i in 0..n {
                z[i] = r[i] / a.get(i, i);
            }
        });
        assert!(ilu < jacobi, "ilu {ilu} jacobi {jacobi}");
    }

    #[test]
    fn factors_keep_the_sparsity_pattern() {
        let g = GlobalGrid::unit(3, 4, 4).unwrap();
        let layouts = decompose(g, 4).unwrap();
        let a = StencilOperator::new(&g).local_matrix::<f64>(&layouts[1]);
        let f = Ilu0Factors::factor(&a).unwrap();
        assert_eq!(f.lu.cols, a.cols);
        assert_eq!(f.lu.row_ptr, a.row_ptr);
    }
}
