use super::comm::{tags, Comm};
use super::field::Field3D;
use super::layout::PencilLayout;
use super::wire::{decode, encode, Wire};
use crate::error::CommError;

/// Refreshes the width-1 horizontal halo of `field` with periodic wrap.
///
/// Exchanges Y edges first, then X edges including the freshly filled Y
/// halo rows, so corner cells are valid afterwards. The interior is never
/// written. Neighbours that are this rank itself are served by a local copy.
pub fn halo_exchange<T: Wire + Default>(
    field: &mut Field3D<T>,
    layout: &PencilLayout,
    comm: &mut Comm,
) -> Result<(), CommError> {
    comm.note_halo_exchange();
    let (_, ny, nx) = field.dims();
    let (ny, nx) = (ny as isize, nx as isize);
    let nb = layout.neighbours;
    let rank = layout.rank;
    let wrap = |direction: &'static str| {
        move |e: CommError| CommError::Exchange {
            direction,
            rank,
            reason: e.to_string(),
        }
    };

    // Y phase: interior x only.
    let xs: Vec<isize> = (0..nx).collect();
    if nb.north == rank {
        copy_row(field, 0, ny, &xs);
        copy_row(field, ny - 1, -1, &xs);
    } else {
        let south_edge = pack_row(field, 0, &xs);
        let north_edge = pack_row(field, ny - 1, &xs);
        comm.send(nb.south, tags::HALO_SOUTHWARD, south_edge)
            .map_err(wrap("-y"))?;
        comm.send(nb.north, tags::HALO_NORTHWARD, north_edge)
            .map_err(wrap("+y"))?;
        let from_north = comm.recv(nb.north, tags::HALO_SOUTHWARD).map_err(wrap("+y"))?;
        let from_south = comm.recv(nb.south, tags::HALO_NORTHWARD).map_err(wrap("-y"))?;
        unpack_row(field, ny, &xs, &from_north);
        unpack_row(field, -1, &xs, &from_south);
    }

    // X phase: full columns including the Y halo rows.
    let ys: Vec<isize> = (-1..=ny).collect();
    if nb.east == rank {
        copy_col(field, 0, nx, &ys);
        copy_col(field, nx - 1, -1, &ys);
    } else {
        let west_edge = pack_col(field, 0, &ys);
        let east_edge = pack_col(field, nx - 1, &ys);
        comm.send(nb.west, tags::HALO_WESTWARD, west_edge)
            .map_err(wrap("-x"))?;
        comm.send(nb.east, tags::HALO_EASTWARD, east_edge)
            .map_err(wrap("+x"))?;
        let from_east = comm.recv(nb.east, tags::HALO_WESTWARD).map_err(wrap("+x"))?;
        let from_west = comm.recv(nb.west, tags::HALO_EASTWARD).map_err(wrap("-x"))?;
        unpack_col(field, nx, &ys, &from_east);
        unpack_col(field, -1, &ys, &from_west);
    }
    Ok(())
}

fn pack_row<T: Wire + Default>(f: &Field3D<T>, j: isize, xs: &[isize]) -> Vec<u8> {
    let mut buf = Vec::new();
    for &i in xs {
        buf.extend(encode(f.column(j, i)));
    }
    buf
}

fn unpack_row<T: Wire + Default>(f: &mut Field3D<T>, j: isize, xs: &[isize], bytes: &[u8]) {
    let vals: Vec<T> = decode(bytes);
    let nz = f.dims().0;
    for (n, &i) in xs.iter().enumerate() {
        f.column_mut(j, i).copy_from_slice(&vals[n * nz..(n + 1) * nz]);
    }
}

fn copy_row<T: Wire + Default>(f: &mut Field3D<T>, from: isize, to: isize, xs: &[isize]) {
    for &i in xs {
        let col = f.column(from, i).to_vec();
        f.column_mut(to, i).copy_from_slice(&col);
    }
}

fn pack_col<T: Wire + Default>(f: &Field3D<T>, i: isize, ys: &[isize]) -> Vec<u8> {
    let mut buf = Vec::new();
    for &j in ys {
        buf.extend(encode(f.column(j, i)));
    }
    buf
}

fn unpack_col<T: Wire + Default>(f: &mut Field3D<T>, i: isize, ys: &[isize], bytes: &[u8]) {
    let vals: Vec<T> = decode(bytes);
    let nz = f.dims().0;
    for (n, &j) in ys.iter().enumerate() {
        f.column_mut(j, i).copy_from_slice(&vals[n * nz..(n + 1) * nz]);
    }
}

fn copy_col<T: Wire + Default>(f: &mut Field3D<T>, from: isize, to: isize, ys: &[isize]) {
    for &j in ys {
        let col = f.column(j, from).to_vec();
        f.column_mut(j, to).copy_from_slice(&col);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{comm::run_ranks, decompose, GlobalGrid};

    fn check_wrapped_index(grid: GlobalGrid, workers: usize) {
        let layouts = decompose(grid, workers).unwrap();
        let g = grid;
        let ok = run_ranks(workers, |mut c| {
            let l = &layouts[c.rank()];
            let mut f = Field3D::from_global_fn(l, |k, j, i| g.index(k, j, i) as f64);
            halo_exchange(&mut f, l, &mut c).unwrap();
            let before = f.clone();
            for i in -1..=l.x.size as isize {
                for j in -1..=l.y.size as isize {
                    let gj = (l.y.start as isize + j).rem_euclid(g.ny as isize) as usize;
                    let gi = (l.x.start as isize + i).rem_euclid(g.nx as isize) as usize;
                    for k in 0..g.nz {
                        if f.get(k, j, i) != g.index(k, gj, gi) as f64 {
                            return false;
                        }
                    }
                }
            }
            // idempotent
            halo_exchange(&mut f, l, &mut c).unwrap();
            f == before
        });
        assert!(ok.into_iter().all(|b| b), "grid {grid:?} workers {workers}");
    }

    #[test]
    fn halos_match_global_index_oracle() {
        for w in [1, 2, 4, 8] {
            check_wrapped_index(GlobalGrid::unit(3, 8, 8).unwrap(), w);
            check_wrapped_index(GlobalGrid::unit(2, 5, 7).unwrap(), w.min(4));
        }
        check_wrapped_index(GlobalGrid::unit(2, 2, 2).unwrap(), 4);
    }

    #[test]
    fn single_worker_wraps_onto_itself() {
        let g = GlobalGrid::unit(1, 3, 4).unwrap();
        let l = &decompose(g, 1).unwrap()[0];
        let mut c = Comm::local_group(1).pop().unwrap();
        let mut f = Field3D::from_global_fn(l, |_, j, i| (10 * j + i) as f64);
        halo_exchange(&mut f, l, &mut c).unwrap();
        assert_eq!(f.get(0, -1, 0), 20.0);
        assert_eq!(f.get(0, 3, 3), 3.0);
        assert_eq!(f.get(0, -1, -1), 23.0);
        assert_eq!(c.stats().messages, 0);
        assert_eq!(c.stats().halo_exchanges, 1);
    }
}
