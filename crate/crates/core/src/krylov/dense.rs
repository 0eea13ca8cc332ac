//! Dense reference operator and direct solver, used as test oracles.
//!
//! Assembled cell by cell from the global grid, independently of the
//! halo-based stencil.

use crate::decomp::GlobalGrid;

/// Dense 7-point Laplacian over the whole grid, Z-fastest ordering.
pub fn laplacian(g: &GlobalGrid) -> Vec<Vec<f64>> {
    let n = g.points();
    let mut a = vec![vec![0.0; n]; n];
    let (cx, cy, cz) = (1.0 / (g.dx * g.dx), 1.0 / (g.dy * g.dy), 1.0 / (g.dz * g.dz));
    for i in 0..g.nx {
        for j in 0..g.ny {
            for k in 0..g.nz {
                let row = g.index(k, j, i);
                let mut couple = |col: usize, c: f64| {
                    a[row][col] += c;
                    a[row][row] -= c;
                };
                couple(g.index(k, j, (i + 1) % g.nx), cx);
                couple(g.index(k, j, (i + g.nx - 1) % g.nx), cx);
                couple(g.index(k, (j + 1) % g.ny, i), cy);
                couple(g.index(k, (j + g.ny - 1) % g.ny, i), cy);
                if k + 1 < g.nz {
                    couple(g.index(k + 1, j, i), cz);
                }
                if k > 0 {
                    couple(g.index(k - 1, j, i), cz);
                }
            }
        }
    }
    a
}

pub fn apply(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// `A x` computed matrix-free with periodic wrap, for grids too large for
/// a dense matrix.
pub fn apply_stencil(g: &GlobalGrid, x: &[f64]) -> Vec<f64> {
    let (cx, cy, cz) = (1.0 / (g.dx * g.dx), 1.0 / (g.dy * g.dy), 1.0 / (g.dz * g.dz));
    let mut out = vec![0.0; g.points()];
    for i in 0..g.nx {
        for j in 0..g.ny {
            for k in 0..g.nz {
                let c = x[g.index(k, j, i)];
                let mut v = cx * (x[g.index(k, j, (i + 1) % g.nx)] + x[g.index(k, j, (i + g.nx - 1) % g.nx)] - 2.0 * c)
                    + cy * (x[g.index(k, (j + 1) % g.ny, i)] + x[g.index(k, (j + g.ny - 1) % g.ny, i)] - 2.0 * c);
                if k + 1 < g.nz {
                    v += cz * (x[g.index(k + 1, j, i)] - c);
                }
                if k > 0 {
                    v += cz * (x[g.index(k - 1, j, i)] - c);
                }
                out[g.index(k, j, i)] = v;
            }
        }
    }
    out
}

/// Minimum-norm solution of the singular symmetric system `A p = b` for a
/// mean-zero `b`: solves `(A - J/n) p = b`, which moves the constant null
/// vector to a nonzero eigenvalue without touching the rest of the
/// spectrum, so `p` is mean-zero.
pub fn solve_mean_zero(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .map(|row| row.iter().map(|v| v - 1.0 / n as f64).collect())
        .collect();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))
            .unwrap();
        m.swap(col, piv);
        x.swap(col, piv);
        let d = m[col][col];
        for r in col + 1..n {
            let f = m[r][col] / d;
            if f != 0.0 {
                for c in col..n {
                    m[r][c] -= f * m[col][c];
                }
                x[r] -= f * x[col];
            }
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (x[r] - s) / m[r][r];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_zero_and_symmetric() {
        let g = GlobalGrid::new(3, 4, 2, 1.0, 0.5, 2.0).unwrap();
        let a = laplacian(&g);
        for (i, row) in a.iter().enumerate() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            for j in 0..row.len() {
                assert_eq!(a[i][j], a[j][i]);
            }
        }
    }

    #[test]
    fn stencil_matches_dense() {
        let g = GlobalGrid::new(3, 4, 5, 1.0, 0.5, 2.0).unwrap();
        let x: Vec<f64> = (0..g.points()).map(|n| ((n * 7) % 11) as f64).collect();
        let a = apply(&laplacian(&g), &x);
        let b = apply_stencil(&g, &x);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_inverse_recovers_mean_zero_vector() {
        let g = GlobalGrid::unit(3, 3, 3).unwrap();
        let a = laplacian(&g);
        let mut q: Vec<f64> = (0..g.points()).map(|n| (n as f64).sin()).collect();
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        q.iter_mut().for_each(|v| *v -= mean);
        let p = solve_mean_zero(&a, &apply(&a, &q));
        for (x, y) in p.iter().zip(&q) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
