use serde::{Deserialize, Serialize};

use crate::decomp::{Extent, Field3D, PencilLayout};

/// Local subdomain a slab covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabExtent {
    pub nz: usize,
    pub y: Extent,
    pub x: Extent,
}

impl SlabExtent {
    pub fn of(layout: &PencilLayout) -> Self {
        SlabExtent {
            nz: layout.grid.nz,
            y: layout.y,
            x: layout.x,
        }
    }

    pub fn points(&self) -> usize {
        self.nz * self.y.size * self.x.size
    }
}

/// Interior values in Z-fastest order at the sender's native precision.
#[derive(Debug, Clone, PartialEq)]
pub enum SlabData {
    Single(Vec<f32>),
    Double(Vec<f64>),
}

impl SlabData {
    pub fn len(&self) -> usize {
        match self {
            SlabData::Single(v) => v.len(),
            SlabData::Double(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, n: usize) -> f64 {
        match self {
            SlabData::Single(v) => v[n] as f64,
            SlabData::Double(v) => v[n],
        }
    }
}

/// Fire-and-forget envelope from a model rank to its I/O server.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticMessage {
    pub source_rank: usize,
    pub timestep: u64,
    pub field: String,
    pub extent: SlabExtent,
    pub data: SlabData,
}

impl DiagnosticMessage {
    pub fn from_field(
        layout: &PencilLayout,
        timestep: u64,
        name: &str,
        field: &Field3D<f64>,
    ) -> Self {
        DiagnosticMessage {
            source_rank: layout.rank,
            timestep,
            field: name.to_owned(),
            extent: SlabExtent::of(layout),
            data: SlabData::Double(field.interior()),
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl SlabExtent {
    pub(crate) fn encode(&self, out: &mut Vec<u8>) {
        for v in [self.nz, self.y.start, self.y.size, self.x.start, self.x.size] {
            put_u64(out, v as u64);
        }
    }

    fn read(r: &mut Reader) -> Option<Self> {
        let mut v = [0usize; 5];
        for slot in &mut v {
            *slot = r.u64()? as usize;
        }
        Some(SlabExtent {
            nz: v[0],
            y: Extent { start: v[1], size: v[2] },
            x: Extent { start: v[3], size: v[4] },
        })
    }

    pub(crate) fn decode(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader { bytes, at: 0 };
        let e = Self::read(&mut r)?;
        (r.at == bytes.len()).then_some(e)
    }
}

impl DiagnosticMessage {
    /// Little-endian wire form: rank, timestep, name, extent, precision tag
    /// (4|8), values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.field.len() + self.data.len() * 8);
        put_u64(&mut out, self.source_rank as u64);
        put_u64(&mut out, self.timestep);
        put_u64(&mut out, self.field.len() as u64);
        out.extend_from_slice(self.field.as_bytes());
        self.extent.encode(&mut out);
        match &self.data {
            SlabData::Single(v) => {
                out.push(4);
                out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
            }
            SlabData::Double(v) => {
                out.push(8);
                out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader { bytes, at: 0 };
        let source_rank = r.u64()? as usize;
        let timestep = r.u64()?;
        let len = r.u64()? as usize;
        let field = String::from_utf8(r.take(len)?.to_vec()).ok()?;
        let extent = SlabExtent::read(&mut r)?;
        let tag = r.take(1)?[0];
        let rest = &bytes[r.at..];
        let data = match tag {
            4 if rest.len() % 4 == 0 => SlabData::Single(
                rest.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            8 if rest.len() % 8 == 0 => SlabData::Double(
                rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            _ => return None,
        };
        Some(DiagnosticMessage {
            source_rank,
            timestep,
            field,
            extent,
            data,
        })
    }
}
