use crate::error::SolverError;
use crate::precision::Real;

/// Compressed sparse rows with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr<T> {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<T>,
}

impl<T: Real> Csr<T> {
    /// Builds from per-row `(col, value)` lists; columns are sorted here.
    pub fn from_rows(rows: Vec<Vec<(usize, T)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Csr { n, row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|p| v[p]).unwrap_or_else(|_| T::zero())
    }

    pub fn mul(&self, x: &[T], y: &mut [T]) {
        for (i, out) in y.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            *out = c.iter().zip(v).fold(T::zero(), |acc, (&j, &a)| acc + a * x[j]);
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                row[j] = a.f64();
            }
        }
        d
    }
}

/// ILU(0) factors stored in one matrix with the sparsity of the original:
/// the strict lower part is `L` (unit diagonal implied), the rest is `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ilu0Factors<T> {
    pub lu: Csr<T>,
    diag: Vec<usize>,
}

impl<T: Real> Ilu0Factors<T> {
    /// Gaussian elimination restricted to the existing nonzeros (IKJ order).
    pub fn factor(a: &Csr<T>) -> Result<Self, SolverError> {
        let mut lu = a.clone();
        let n = lu.n;
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            let (c, _) = lu.row(i);
            if let Ok(p) = c.binary_search(&i) {
                diag[i] = lu.row_ptr[i] + p;
            } else {
                return Err(SolverError::ZeroPivot { cell: i });
            }
        }
        // Position of each column in the current row, reset after each row.
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for p in start..end {
                pos[lu.cols[p]] = p;
            }
            for p in start..end {
                let k = lu.cols[p];
                if k >= i {
                    break;
                }
                let pivot = lu.vals[diag[k]];
                let factor = lu.vals[p] / pivot;
                lu.vals[p] = factor;
                for q in diag[k] + 1..lu.row_ptr[k + 1] {
                    let j = lu.cols[q];
                    if pos[j] != usize::MAX {
                        let uq = lu.vals[q];
                        lu.vals[pos[j]] -= factor * uq;
                    }
                }
            }
            let d = lu.vals[diag[i]];
            if d == T::zero() || !d.is_finite() {
                return Err(SolverError::ZeroPivot { cell: i });
            }
            for p in start..end {
                pos[lu.cols[p]] = usize::MAX;
            }
        }
        Ok(Ilu0Factors { lu, diag })
    }

    /// Returns `(LU)^-1 r`.
    pub fn apply(&self, r: &[T], z: &mut [T]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut acc = r[i];
            for p in lu.row_ptr[i]..self.diag[i] {
                acc -= lu.vals[p] * z[lu.cols[p]];
            }
            z[i] = acc;
        }
        for i in (0..lu.n).rev() {
            let mut acc = z[i];
            for p in self.diag[i] + 1..lu.row_ptr[i + 1] {
                acc -= lu.vals[p] * z[lu.cols[p]];
            }
            z[i] = acc / lu.vals[self.diag[i]];
        }
    }

    pub fn lower_dense(&self) -> Vec<Vec<f64>> {
        let mut d = self.lu.to_dense();
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = match j.cmp(&i) {
                    std::cmp::Ordering::Less => *v,
                    std::cmp::Ordering::Equal => 1.0,
                    std::cmp::Ordering::Greater => 0.0,
                };
            }
        }
        d
    }

    pub fn upper_dense(&self) -> Vec<Vec<f64>> {
        let mut d = self.lu.to_dense();
        for (i, row) in d.iter_mut().enumerate() {
            for v in row.iter_mut().take(i) {
                *v = 0.0;
            }
        }
        d
    }
}
