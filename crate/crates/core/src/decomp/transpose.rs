//! Pencil re-orientation by all-to-all exchanges within process-grid rows or
//! columns.
//!
//! With the `py x px` worker grid fixed, the three orientations are:
//!
//! | pencil | complete axis | split by `py` (row `ry`) | split by `px` (col `rx`) |
//! |--------|---------------|--------------------------|--------------------------|
//! | Z      | z             | y                        | x                        |
//! | Y      | y             | z                        | x                        |
//! | X      | x             | z                        | y                        |
//!
//! Z<->Y exchanges among ranks sharing `rx`; Y<->X among ranks sharing `ry`.
//! Z<->X goes through Y.

use serde::{Deserialize, Serialize};

use super::comm::Comm;
use super::field::Field3D;
use super::layout::{balanced_split, Extent, PencilLayout};
use super::wire::{decode, Wire};
use crate::error::CommError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Z,
    Y,
    X,
}

impl Orientation {
    /// Axis (0 = z, 1 = y, 2 = x) that is complete on every rank.
    pub fn axis(self) -> usize {
        match self {
            Orientation::Z => 0,
            Orientation::Y => 1,
            Orientation::X => 2,
        }
    }
}

/// Rank-local block of a global `(z, y, x)` array in one orientation.
/// Storage puts the complete axis fastest, then the other two in z, y, x order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pencil<C> {
    pub orientation: Orientation,
    pub start: [usize; 3],
    pub size: [usize; 3],
    pub data: Vec<C>,
}

/// Global box `(start, size)` a rank owns in `orientation`.
pub fn pencil_box(layout: &PencilLayout, rank: usize, orientation: Orientation) -> [Extent; 3] {
    let g = layout.grid;
    let (ry, rx) = (rank / layout.px, rank % layout.px);
    let full = |n| Extent { start: 0, size: n };
    match orientation {
        Orientation::Z => [
            full(g.nz),
            balanced_split(g.ny, layout.py, ry),
            balanced_split(g.nx, layout.px, rx),
        ],
        Orientation::Y => [
            balanced_split(g.nz, layout.py, ry),
            full(g.ny),
            balanced_split(g.nx, layout.px, rx),
        ],
        Orientation::X => [
            balanced_split(g.nz, layout.py, ry),
            balanced_split(g.ny, layout.px, rx),
            full(g.nx),
        ],
    }
}

impl<C: Copy + Default> Pencil<C> {
    pub fn zeros(layout: &PencilLayout, orientation: Orientation) -> Self {
        let b = pencil_box(layout, layout.rank, orientation);
        let size = [b[0].size, b[1].size, b[2].size];
        Pencil {
            orientation,
            start: [b[0].start, b[1].start, b[2].start],
            size,
            data: vec![C::default(); size.iter().product()],
        }
    }

    /// Storage offset of local coordinates `(z, y, x)`.
    #[inline]
    pub fn offset(&self, lz: usize, ly: usize, lx: usize) -> usize {
        let [sz, sy, sx] = self.size;
        match self.orientation {
            Orientation::Z => lz + sz * (ly + sy * lx),
            Orientation::Y => ly + sy * (lz + sz * lx),
            Orientation::X => lx + sx * (lz + sz * ly),
        }
    }

    /// Value at global `(z, y, x)`; must lie inside this block.
    pub fn at_global(&self, z: usize, y: usize, x: usize) -> C {
        self.data[self.offset(z - self.start[0], y - self.start[1], x - self.start[2])]
    }

    /// Length of the complete lines stored contiguously.
    pub fn line_len(&self) -> usize {
        self.size[self.orientation.axis()]
    }

    /// Complete lines along the pencil axis, each with the global indices of
    /// its two other axes (in z, y, x order with the pencil axis removed).
    pub fn lines_mut(&mut self) -> impl Iterator<Item = ([usize; 2], &mut [C])> {
        let n = self.line_len().max(1);
        let [sz, sy, _] = self.size;
        let start = self.start;
        let orientation = self.orientation;
        self.data.chunks_exact_mut(n).enumerate().map(move |(c, line)| {
            let pos = match orientation {
                Orientation::Z => [start[1] + c % sy.max(1), start[2] + c / sy.max(1)],
                Orientation::Y => [start[0] + c % sz.max(1), start[2] + c / sz.max(1)],
                Orientation::X => [start[0] + c % sz.max(1), start[1] + c / sz.max(1)],
            };
            (pos, line)
        })
    }

    pub fn map<D: Copy + Default>(&self, f: impl Fn(C) -> D) -> Pencil<D> {
        Pencil {
            orientation: self.orientation,
            start: self.start,
            size: self.size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Z pencil holding the interior of `field`.
    pub fn from_field(field: &Field3D<C>, layout: &PencilLayout) -> Self {
        let mut p = Self::zeros(layout, Orientation::Z);
        p.data = field.interior();
        p
    }

    pub fn to_field(&self) -> Field3D<C> {
        assert_eq!(self.orientation, Orientation::Z, "fields live in Z pencils");
        let [nz, ny, nx] = self.size;
        let mut f = Field3D::zeros(nz, ny, nx);
        f.set_interior(&self.data);
        f
    }
}

fn boxes_intersect(a: &[Extent; 3], b: &[Extent; 3]) -> [Extent; 3] {
    [a[0].intersect(&b[0]), a[1].intersect(&b[1]), a[2].intersect(&b[2])]
}

fn pack_box<C: Copy + Default + Wire>(p: &Pencil<C>, b: &[Extent; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(b.iter().map(|e| e.size).product::<usize>() * C::SIZE);
    for x in b[2].start..b[2].end() {
        for y in b[1].start..b[1].end() {
            for z in b[0].start..b[0].end() {
                p.at_global(z, y, x).put(&mut out);
            }
        }
    }
    out
}

fn unpack_box<C: Copy + Default + Wire>(p: &mut Pencil<C>, b: &[Extent; 3], bytes: &[u8]) {
    let vals: Vec<C> = decode(bytes);
    let mut it = vals.into_iter();
    for x in b[2].start..b[2].end() {
        for y in b[1].start..b[1].end() {
            for z in b[0].start..b[0].end() {
                let o = p.offset(z - p.start[0], y - p.start[1], x - p.start[2]);
                p.data[o] = it.next().expect("short transpose block");
            }
        }
    }
}

fn step<C: Copy + Default + Wire>(
    p: &Pencil<C>,
    layout: &PencilLayout,
    target: Orientation,
    comm: &mut Comm,
) -> Result<Pencil<C>, CommError> {
    let group: Vec<usize> = match (p.orientation, target) {
        (Orientation::Z, Orientation::Y) | (Orientation::Y, Orientation::Z) => {
            (0..layout.py).map(|r| r * layout.px + layout.rx).collect()
        }
        (Orientation::Y, Orientation::X) | (Orientation::X, Orientation::Y) => {
            (0..layout.px).map(|c| layout.ry * layout.px + c).collect()
        }
        (a, b) => unreachable!("{a:?} -> {b:?} is not a single transpose step"),
    };
    let mut out = Pencil::zeros(layout, target);
    let mine_src = pencil_box(layout, layout.rank, p.orientation);
    let mine_dst = pencil_box(layout, layout.rank, target);
    comm.note_transpose(group.len() > 1);

    if group.len() == 1 {
        unpack_box(&mut out, &mine_src, &pack_box(p, &mine_src));
        return Ok(out);
    }
    let sends = group
        .iter()
        .map(|&g| pack_box(p, &boxes_intersect(&mine_src, &pencil_box(layout, g, target))))
        .collect();
    let recvd = comm.all_to_all(&group, sends)?;
    for (&g, bytes) in group.iter().zip(recvd) {
        let b = boxes_intersect(&pencil_box(layout, g, p.orientation), &mine_dst);
        unpack_box(&mut out, &b, &bytes);
    }
    Ok(out)
}

/// Redistributes `p` so this rank holds complete lines along `target`.
/// Collective over all ranks.
pub fn pencil_transpose<C: Copy + Default + Wire>(
    p: &Pencil<C>,
    layout: &PencilLayout,
    target: Orientation,
    comm: &mut Comm,
) -> Result<Pencil<C>, CommError> {
    use Orientation::*;
    match (p.orientation, target) {
        (a, b) if a == b => Ok(p.clone()),
        (Z, X) => step(&step(p, layout, Y, comm)?, layout, X, comm),
        (X, Z) => step(&step(p, layout, Y, comm)?, layout, Z, comm),
        _ => step(p, layout, target, comm),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{comm::run_ranks, decompose, GlobalGrid};

    fn index_pencil(layout: &PencilLayout, o: Orientation) -> Pencil<f64> {
        let mut p = Pencil::<f64>::zeros(layout, o);
        let g = layout.grid;
        for x in 0..p.size[2] {
            for y in 0..p.size[1] {
                for z in 0..p.size[0] {
                    let off = p.offset(z, y, x);
                    p.data[off] = g.index(z + p.start[0], y + p.start[1], x + p.start[2]) as f64;
                }
            }
        }
        p
    }

    #[test]
    fn every_orientation_matches_index_map_and_round_trips() {
        for (grid, w) in [
            (GlobalGrid::unit(4, 6, 5).unwrap(), 1),
            (GlobalGrid::unit(4, 6, 5).unwrap(), 2),
            (GlobalGrid::unit(5, 6, 8).unwrap(), 4),
            (GlobalGrid::unit(8, 8, 8).unwrap(), 8),
        ] {
            let layouts = decompose(grid, w).unwrap();
            let ok = run_ranks(w, |mut c| {
                let l = &layouts[c.rank()];
                let z = index_pencil(l, Orientation::Z);
                let y = pencil_transpose(&z, l, Orientation::Y, &mut c).unwrap();
                let x = pencil_transpose(&y, l, Orientation::X, &mut c).unwrap();
                let back = pencil_transpose(&x, l, Orientation::Z, &mut c).unwrap();
                y == index_pencil(l, Orientation::Y)
                    && x == index_pencil(l, Orientation::X)
                    && back == z
            });
            assert!(ok.iter().all(|&b| b), "grid {grid:?} w {w}");
        }
    }

    #[test]
    fn single_worker_sends_nothing() {
        let g = GlobalGrid::unit(3, 4, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut c = Comm::local_group(1).pop().unwrap();
        let z = index_pencil(l, Orientation::Z);
        let x = pencil_transpose(&z, l, Orientation::X, &mut c).unwrap();
        assert_eq!(x, index_pencil(l, Orientation::X));
        assert_eq!(c.stats().messages, 0);
        assert_eq!(c.stats().transposes, 2);
        assert_eq!(c.stats().all_to_alls, 0);
    }

    #[test]
    fn lines_report_global_positions() {
        let g = GlobalGrid::unit(2, 3, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut p = index_pencil(l, Orientation::X);
        for ([z, y], line) in p.lines_mut() {
            assert_eq!(line[1], g.index(z, y, 1) as f64);
        }
    }
}
