//! Parallel substrate: global grid, pencil decomposition, transports, and the
//! collective operations built on them (halo exchange, reductions, pencil
//! transposes).

mod comm;
mod field;
mod grid;
mod halo;
mod layout;
pub mod socket;
mod transport;
mod transpose;
pub mod wire;

pub use comm::{run_ranks, Comm, CommStats, ReduceOp};
pub use field::Field3D;
pub use grid::GlobalGrid;
pub use halo::halo_exchange;
pub use layout::{balanced_split, decompose, worker_grid, Extent, Neighbours, PencilLayout};
pub use socket::{Coordinator, SocketTransport};
pub use transport::{Frame, LocalTransport, Transport, DEFAULT_RECV_TIMEOUT};
pub use transpose::{pencil_box, pencil_transpose, Orientation, Pencil};

/// Z-fastest global array assembled on `root` from every rank's interior.
pub fn gather_global<T: wire::Wire + Default>(
    field: &Field3D<T>,
    layout: &PencilLayout,
    comm: &mut Comm,
    root: usize,
) -> Result<Option<Vec<T>>, crate::error::CommError> {
    let parts = comm.gather(root, wire::encode(&field.interior()))?;
    Ok(parts.map(|parts| {
        let g = layout.grid;
        let mut global = vec![T::default(); g.points()];
        for (rank, bytes) in parts.into_iter().enumerate() {
            let l = layout.for_rank(rank);
            let vals: Vec<T> = wire::decode(&bytes);
            let mut it = vals.into_iter();
            for i in l.x.start..l.x.end() {
                for j in l.y.start..l.y.end() {
                    for k in 0..g.nz {
                        global[g.index(k, j, i)] = it.next().unwrap();
                    }
                }
            }
        }
        global
    }))
}
