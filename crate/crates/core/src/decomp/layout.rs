use serde::{Deserialize, Serialize};

use super::grid::GlobalGrid;
use crate::error::{Error, Result};

/// Contiguous 1D range owned by one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub start: usize,
    pub size: usize,
}

impl Extent {
    pub fn end(&self) -> usize {
        self.start + self.size
    }

    pub fn contains(&self, v: usize) -> bool {
        v >= self.start && v < self.end()
    }

    pub fn intersect(&self, other: &Extent) -> Extent {
        let start = self.start.max(other.start);
        let end = self.end().min(other.end());
        Extent {
            start,
            size: end.saturating_sub(start),
        }
    }
}

/// Balanced split of `n` cells over `parts`: sizes differ by at most one,
/// larger parts first.
pub fn balanced_split(n: usize, parts: usize, index: usize) -> Extent {
    let base = n / parts;
    let rem = n % parts;
    let size = base + usize::from(index < rem);
    let start = index * base + index.min(rem);
    Extent { start, size }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbours {
    /// +Y
    pub north: usize,
    /// -Y
    pub south: usize,
    /// +X
    pub east: usize,
    /// -X
    pub west: usize,
}

/// 2D pencil decomposition of the horizontal plane; every worker owns full
/// vertical columns. Ranks are numbered `ry * px + rx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PencilLayout {
    pub grid: GlobalGrid,
    pub py: usize,
    pub px: usize,
    pub rank: usize,
    pub ry: usize,
    pub rx: usize,
    pub y: Extent,
    pub x: Extent,
    pub halo: usize,
    pub neighbours: Neighbours,
}

/// Most-square factorisation `py * px = workers` with `py <= ny`, `px <= nx`.
pub fn worker_grid(grid: &GlobalGrid, workers: usize) -> Result<(usize, usize)> {
    if workers == 0 {
        return Err(Error::Decomposition("worker count must be at least 1".into()));
    }
    (1..=workers)
        .filter(|py| workers % py == 0)
        .map(|py| (py, workers / py))
        .filter(|&(py, px)| py <= grid.ny && px <= grid.nx)
        .min_by_key(|&(py, px)| (py.abs_diff(px), py > px))
        .ok_or_else(|| {
            Error::Decomposition(format!(
                "{workers} workers cannot tile a {}x{} horizontal plane",
                grid.ny, grid.nx
            ))
        })
}

impl PencilLayout {
    pub fn new(grid: GlobalGrid, workers: usize, rank: usize) -> Result<Self> {
        let (py, px) = worker_grid(&grid, workers)?;
        if rank >= workers {
            return Err(Error::Decomposition(format!(
                "rank {rank} out of range for {workers} workers"
            )));
        }
        Ok(Self::with_grid(grid, py, px, rank))
    }

    fn with_grid(grid: GlobalGrid, py: usize, px: usize, rank: usize) -> Self {
        let ry = rank / px;
        let rx = rank % px;
        let at = |ry: usize, rx: usize| ry * px + rx;
        PencilLayout {
            grid,
            py,
            px,
            rank,
            ry,
            rx,
            y: balanced_split(grid.ny, py, ry),
            x: balanced_split(grid.nx, px, rx),
            halo: 1,
            neighbours: Neighbours {
                north: at((ry + 1) % py, rx),
                south: at((ry + py - 1) % py, rx),
                east: at(ry, (rx + 1) % px),
                west: at(ry, (rx + px - 1) % px),
            },
        }
    }

    pub fn workers(&self) -> usize {
        self.py * self.px
    }

    /// Same decomposition seen from another rank.
    pub fn for_rank(&self, rank: usize) -> PencilLayout {
        Self::with_grid(self.grid, self.py, self.px, rank)
    }

    pub fn local_points(&self) -> usize {
        self.grid.nz * self.y.size * self.x.size
    }
}

/// Layouts for every rank.
pub fn decompose(grid: GlobalGrid, workers: usize) -> Result<Vec<PencilLayout>> {
    let (py, px) = worker_grid(&grid, workers)?;
    Ok((0..workers)
        .map(|r| PencilLayout::with_grid(grid, py, px, r))
        .collect())
}
