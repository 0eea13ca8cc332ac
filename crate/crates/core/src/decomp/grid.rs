use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global Cartesian grid. Horizontal directions are periodic, the vertical is
/// bounded by rigid lids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalGrid {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl GlobalGrid {
    pub fn new(nz: usize, ny: usize, nx: usize, dz: f64, dy: f64, dx: f64) -> Result<Self> {
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::config(format!(
                "grid sizes must be positive, got {nz}x{ny}x{nx}"
            )));
        }
        for (name, d) in [("dz", dz), ("dy", dy), ("dx", dx)] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config(format!("grid spacing {name} must be > 0, got {d}")));
            }
        }
        Ok(GlobalGrid {
            nz,
            ny,
            nx,
            dz,
            dy,
            dx,
        })
    }

    /// Unit-spaced grid, mostly for tests.
    pub fn unit(nz: usize, ny: usize, nx: usize) -> Result<Self> {
        Self::new(nz, ny, nx, 1.0, 1.0, 1.0)
    }

    pub fn points(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    /// Z-fastest global linear index.
    #[inline]
    pub fn index(&self, k: usize, j: usize, i: usize) -> usize {
        k + self.nz * (j + self.ny * i)
    }
}
