use serde::{Deserialize, Serialize};

use super::transport::{LocalTransport, Transport};
use super::wire::{decode, encode, Wire};
use crate::error::CommError;
use crate::precision::Real;

pub(crate) mod tags {
    pub const REDUCE_UP: u32 = 0x100;
    pub const REDUCE_DOWN: u32 = 0x101;
    pub const ALL_TO_ALL: u32 = 0x200;
    pub const GATHER: u32 = 0x300;
    pub const BROADCAST: u32 = 0x301;
    pub const HALO_NORTHWARD: u32 = 0x400;
    pub const HALO_SOUTHWARD: u32 = 0x401;
    pub const HALO_EASTWARD: u32 = 0x402;
    pub const HALO_WESTWARD: u32 = 0x403;
}

/// Operation counters, used to check communication patterns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub reductions: u64,
    pub halo_exchanges: u64,
    pub transposes: u64,
    /// Transposes that actually crossed a rank boundary.
    pub all_to_alls: u64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
}

impl ReduceOp {
    #[inline]
    pub fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            ReduceOp::Sum => a + b,
            ReduceOp::Max => a.max(b),
            ReduceOp::Min => a.min(b),
        }
    }
}

/// A rank's communication endpoint plus the collectives built on it.
///
/// Every collective must be entered by all ranks (or, for
/// [`all_to_all`](Comm::all_to_all), all members of the group) in the same
/// order; a rank that skips one stalls its peers until the receive timeout.
pub struct Comm {
    transport: Box<dyn Transport>,
    stats: CommStats,
}

impl Comm {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Comm {
            transport: Box::new(transport),
            stats: CommStats::default(),
        }
    }

    /// `size` in-process endpoints, one per rank.
    pub fn local_group(size: usize) -> Vec<Comm> {
        LocalTransport::create(size).into_iter().map(Comm::new).collect()
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn size(&self) -> usize {
        self.transport.size()
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = CommStats::default();
    }

    pub(crate) fn note_halo_exchange(&mut self) {
        self.stats.halo_exchanges += 1;
    }

    pub(crate) fn note_transpose(&mut self, crossed: bool) {
        self.stats.transposes += 1;
        if crossed {
            self.stats.all_to_alls += 1;
        }
    }

    pub fn send(&mut self, dest: usize, tag: u32, payload: Vec<u8>) -> Result<(), CommError> {
        self.stats.messages += 1;
        self.stats.bytes += payload.len() as u64;
        self.transport.send(dest, tag, payload)
    }

    pub fn recv(&mut self, source: usize, tag: u32) -> Result<Vec<u8>, CommError> {
        self.transport.recv(source, tag)
    }

    /// Element-wise reduction replicated on every rank.
    ///
    /// Partials are combined up a fixed binary tree in ascending rank order
    /// (lower ranks on the left) and the root's result is broadcast, so the
    /// answer is bitwise identical on every rank and a pure function of the
    /// worker count.
    pub fn all_reduce<T: Real>(&mut self, local: &[T], op: ReduceOp) -> Result<Vec<T>, CommError> {
        self.stats.reductions += 1;
        let size = self.size();
        let rank = self.rank();
        let mut acc = local.to_vec();
        let mut ok = true;
        let mut step = 1;
        while step < size {
            if rank % (2 * step) == 0 {
                let partner = rank + step;
                if partner < size {
                    let msg = self.recv(partner, tags::REDUCE_UP)?;
                    let (peer_ok, vals) = unpack_flagged::<T>(&msg);
                    if !peer_ok || vals.len() != acc.len() {
                        ok = false;
                    } else {
                        for (a, b) in acc.iter_mut().zip(vals) {
                            *a = op.apply(*a, b);
                        }
                    }
                }
            } else {
                self.send(rank - step, tags::REDUCE_UP, pack_flagged(ok, &acc))?;
                break;
            }
            step *= 2;
        }

        let result = if rank == 0 {
            let msg = pack_flagged(ok, &acc);
            for dest in 1..size {
                self.send(dest, tags::REDUCE_DOWN, msg.clone())?;
            }
            acc
        } else {
            let msg = self.recv(0, tags::REDUCE_DOWN)?;
            let (root_ok, vals) = unpack_flagged::<T>(&msg);
            ok = root_ok;
            vals
        };
        if !ok {
            return Err(CommError::Protocol(
                "reduction vectors differ in length across ranks".into(),
            ));
        }
        Ok(result)
    }

    pub fn all_reduce_scalar<T: Real>(&mut self, v: T, op: ReduceOp) -> Result<T, CommError> {
        Ok(self.all_reduce(&[v], op)?[0])
    }

    /// Personalised exchange within `group` (global rank ids, identical and
    /// identically ordered on every member). `sends[m]` goes to `group[m]`;
    /// the result holds what each member sent to this rank.
    pub fn all_to_all(
        &mut self,
        group: &[usize],
        mut sends: Vec<Vec<u8>>,
    ) -> Result<Vec<Vec<u8>>, CommError> {
        assert_eq!(group.len(), sends.len());
        let me = self.rank();
        let mut mine = Vec::new();
        for (m, &dest) in group.iter().enumerate() {
            let payload = std::mem::take(&mut sends[m]);
            if dest == me {
                mine = payload;
            } else {
                self.send(dest, tags::ALL_TO_ALL, payload)?;
            }
        }
        let mut out = Vec::with_capacity(group.len());
        for &src in group {
            if src == me {
                out.push(std::mem::take(&mut mine));
            } else {
                out.push(self.recv(src, tags::ALL_TO_ALL)?);
            }
        }
        Ok(out)
    }

    /// Collects one buffer per rank on `root`, in rank order.
    pub fn gather(&mut self, root: usize, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>, CommError> {
        if self.rank() != root {
            self.send(root, tags::GATHER, payload)?;
            return Ok(None);
        }
        let mut parts = Vec::with_capacity(self.size());
        let mut own = Some(payload);
        for src in 0..self.size() {
            if src == root {
                parts.push(own.take().unwrap());
            } else {
                parts.push(self.recv(src, tags::GATHER)?);
            }
        }
        Ok(Some(parts))
    }

    /// `payload` is read on `root` only.
    pub fn broadcast(&mut self, root: usize, payload: Vec<u8>) -> Result<Vec<u8>, CommError> {
        if self.rank() == root {
            for dest in (0..self.size()).filter(|&d| d != root) {
                self.send(dest, tags::BROADCAST, payload.clone())?;
            }
            Ok(payload)
        } else {
            self.recv(root, tags::BROADCAST)
        }
    }

    pub fn barrier(&mut self) -> Result<(), CommError> {
        self.all_reduce::<f64>(&[], ReduceOp::Sum).map(|_| ())
    }
}

fn pack_flagged<T: Wire>(ok: bool, values: &[T]) -> Vec<u8> {
    let mut out = vec![u8::from(ok)];
    out.extend(encode(values));
    out
}

fn unpack_flagged<T: Wire>(msg: &[u8]) -> (bool, Vec<T>) {
    match msg.split_first() {
        Some((&flag, rest)) => (flag == 1, decode(rest)),
        None => (false, Vec::new()),
    }
}

/// Runs `f` once per rank on its own thread with in-process endpoints and
/// returns the per-rank results in rank order.
pub fn run_ranks<R, F>(size: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Comm) -> R + Sync,
{
    let comms = Comm::local_group(size);
    std::thread::scope(|s| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| {
                let f = &f;
                s.spawn(move || f(c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    })
}
