use super::layout::PencilLayout;
use crate::precision::{Precision, Real};

/// Halo-padded scalar field on one worker's subdomain.
///
/// Storage is `(nz, ny + 2, nx + 2)` with z fastest, so every vertical column
/// is contiguous. Horizontal indices passed to the accessors are relative to
/// the interior and may be `-1` or `n` to address halo cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3D<T> {
    nz: usize,
    ny: usize,
    nx: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Field3D<T> {
    pub fn zeros(nz: usize, ny: usize, nx: usize) -> Self {
        Field3D {
            nz,
            ny,
            nx,
            data: vec![T::default(); nz * (ny + 2) * (nx + 2)],
        }
    }

    pub fn for_layout(layout: &PencilLayout) -> Self {
        Self::zeros(layout.grid.nz, layout.y.size, layout.x.size)
    }

    /// Interior filled from a function of global `(k, j, i)`; halos are zero.
    pub fn from_global_fn(layout: &PencilLayout, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut field = Self::for_layout(layout);
        for i in 0..layout.x.size {
            for j in 0..layout.y.size {
                for k in 0..layout.grid.nz {
                    let v = f(k, layout.y.start + j, layout.x.start + i);
                    field.set(k, j as isize, i as isize, v);
                }
            }
        }
        field
    }

    /// Extracts this rank's interior from a Z-fastest global array.
    pub fn from_global(layout: &PencilLayout, global: &[T]) -> Self {
        let g = layout.grid;
        Self::from_global_fn(layout, |k, j, i| global[g.index(k, j, i)])
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nz, self.ny, self.nx)
    }

    #[inline]
    pub fn interior_len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    #[inline]
    pub fn idx(&self, k: usize, j: isize, i: isize) -> usize {
        debug_assert!(k < self.nz);
        debug_assert!(j >= -1 && j <= self.ny as isize);
        debug_assert!(i >= -1 && i <= self.nx as isize);
        let jh = (j + 1) as usize;
        let ih = (i + 1) as usize;
        k + self.nz * (jh + (self.ny + 2) * ih)
    }

    #[inline]
    pub fn get(&self, k: usize, j: isize, i: isize) -> T {
        self.data[self.idx(k, j, i)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, j: isize, i: isize, v: T) {
        let at = self.idx(k, j, i);
        self.data[at] = v;
    }

    /// Contiguous vertical column at interior/halo position `(j, i)`.
    pub fn column(&self, j: isize, i: isize) -> &[T] {
        let s = self.idx(0, j, i);
        &self.data[s..s + self.nz]
    }

    pub fn column_mut(&mut self, j: isize, i: isize) -> &mut [T] {
        let s = self.idx(0, j, i);
        &mut self.data[s..s + self.nz]
    }

    /// Interior values in Z-fastest order `k + nz * (j + ny * i)`.
    pub fn interior(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.interior_len());
        for i in 0..self.nx as isize {
            for j in 0..self.ny as isize {
                out.extend_from_slice(self.column(j, i));
            }
        }
        out
    }

    pub fn set_interior(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.interior_len(), "interior length mismatch");
        let nz = self.nz;
        let mut chunks = values.chunks_exact(nz);
        for i in 0..self.nx as isize {
            for j in 0..self.ny as isize {
                self.column_mut(j, i).copy_from_slice(chunks.next().unwrap());
            }
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// Raw storage including halos.
    pub fn raw(&self) -> &[T] {
        &self.data
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Field3D<U> {
        Field3D {
            nz: self.nz,
            ny: self.ny,
            nx: self.nx,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Real> Field3D<T> {
    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn cast<U: Real>(&self) -> Field3D<U> {
        self.map(|v| U::of(v.f64()))
    }

    /// Max-norm over the interior.
    pub fn max_abs(&self) -> T {
        self.interior()
            .into_iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::grid::GlobalGrid;

    #[test]
    fn interior_round_trip_and_global_extract() {
        let g = GlobalGrid::unit(3, 4, 6).unwrap();
        let layouts = crate::decomp::decompose(g, 2).unwrap();
        let global: Vec<f64> = (0..g.points()).map(|v| v as f64).collect();
        for l in &layouts {
            let f = Field3D::from_global(l, &global);
            assert_eq!(f.dims(), (3, 4, 3));
            assert_eq!(f.get(2, 1, 0), g.index(2, 1, l.x.start) as f64);
            let mut h = Field3D::<f64>::for_layout(l);
            h.set_interior(&f.interior());
            assert_eq!(h, f);
        }
    }

    #[test]
    fn halo_cells_addressable() {
        let mut f = Field3D::<f32>::zeros(2, 2, 2);
        f.set(1, -1, 2, 7.0);
        assert_eq!(f.get(1, -1, 2), 7.0);
        assert_eq!(f.interior().iter().sum::<f32>(), 0.0);
        assert_eq!(f.precision(), Precision::Single);
    }
}
