//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MONCMINI" | u32 version
//! u64 options length | options block
//! u64 nz | u64 ny | u64 nx
//! u64 timestep | f64 time
//! u32 field count
//! per field: u32 name length | name | u8 precision (4|8) | nz*ny*nx values, z fastest
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::decomp::wire::{decode, encode, Wire};
use crate::decomp::{gather_global, Field3D, PencilLayout};
use crate::error::{Error, Result};
use crate::options::OptionsDatabase;
use crate::precision::Precision;
use crate::state::{ModelField, ModelState, MODEL_FIELDS};

pub const MAGIC: &[u8; 8] = b"MONCMINI";
pub const FORMAT_VERSION: u32 = 1;

/// Global-order contents of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointImage {
    pub options: OptionsDatabase,
    pub shape: (usize, usize, usize),
    pub timestep: u64,
    pub time: f64,
    pub fields: BTreeMap<String, GlobalField>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalField {
    Single(Vec<f32>),
    Double(Vec<f64>),
}

/// What a rank needs to rebuild its `ModelState` after a restart.
#[derive(Debug, Clone)]
pub struct Restored {
    pub options: OptionsDatabase,
    pub timestep: u64,
    pub time: f64,
    pub fields: BTreeMap<String, ModelField>,
}

impl CheckpointImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let opts = self.options.serialize();
        out.extend_from_slice(&(opts.len() as u64).to_le_bytes());
        out.extend_from_slice(&opts);
        for n in [self.shape.0, self.shape.1, self.shape.2] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.timestep.to_le_bytes());
        out.extend_from_slice(&self.time.to_le_bytes());
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for (name, f) in &self.fields {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match f {
                GlobalField::Single(v) => {
                    out.push(Precision::Single.bytes());
                    out.extend(encode(v));
                }
                GlobalField::Double(v) => {
                    out.push(Precision::Double.bytes());
                    out.extend(encode(v));
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, at: 0 };
        if r.take(8, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let olen = r.u64("options length")? as usize;
        let options = OptionsDatabase::deserialize(r.take(olen, "options block")?)?;
        let nz = r.u64("grid")? as usize;
        let ny = r.u64("grid")? as usize;
        let nx = r.u64("grid")? as usize;
        let timestep = r.u64("timestep")?;
        let time = f64::from_le_bytes(r.take(8, "time")?.try_into().unwrap());
        let count = r.u32("field count")?;
        let points = nz
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nx))
            .ok_or_else(|| Error::Format("grid shape overflows".into()))?;
        let mut fields = BTreeMap::new();
        for n in 0..count {
            let what = format!("field record {n}");
            let len = r.u32(&what)? as usize;
            let name = String::from_utf8(r.take(len, &what)?.to_vec())
                .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?;
            let tag = r.take(1, &name)?[0];
            let field = match Precision::from_tag(tag) {
                Some(Precision::Single) => {
                    GlobalField::Single(decode(r.take(points * f32::SIZE, &name)?))
                }
                Some(Precision::Double) => {
                    GlobalField::Double(decode(r.take(points * f64::SIZE, &name)?))
                }
                None => {
                    return Err(Error::Format(format!(
                        "field `{name}` has bad precision tag {tag}"
                    )))
                }
            };
            fields.insert(name, field);
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last field record".into()));
        }
        for required in MODEL_FIELDS {
            if !fields.contains_key(required) {
                return Err(Error::Format(format!(
                    "missing required field record `{required}`"
                )));
            }
        }
        Ok(CheckpointImage {
            options,
            shape: (nz, ny, nx),
            timestep,
            time,
            fields,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Scatters the global fields onto `layout`.
    pub fn restore(&self, layout: &PencilLayout) -> Result<Restored> {
        let g = layout.grid;
        if (g.nz, g.ny, g.nx) != self.shape {
            return Err(Error::Decomposition(format!(
                "checkpoint grid {}x{}x{} does not match layout grid {}x{}x{}",
                self.shape.0, self.shape.1, self.shape.2, g.nz, g.ny, g.nx
            )));
        }
        let fields = self
            .fields
            .iter()
            .map(|(name, f)| {
                let local = match f {
                    GlobalField::Single(v) => ModelField::Single(Field3D::from_global(layout, v)),
                    GlobalField::Double(v) => ModelField::Double(Field3D::from_global(layout, v)),
                };
                (name.clone(), local)
            })
            .collect();
        Ok(Restored {
            options: self.options.clone(),
            timestep: self.timestep,
            time: self.time,
            fields,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.at.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            _ => Err(Error::Format(format!("file truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".partial");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Collective: gathers every field to rank 0, which writes the file. All
/// ranks return the same outcome.
pub fn checkpoint_write(state: &mut ModelState, path: &Path) -> Result<()> {
    let mut gathered = BTreeMap::new();
    for (name, field) in &state.fields {
        let global = match field {
            ModelField::Single(f) => {
                gather_global(f, &state.layout, &mut state.comm, 0)?.map(GlobalField::Single)
            }
            ModelField::Double(f) => {
                gather_global(f, &state.layout, &mut state.comm, 0)?.map(GlobalField::Double)
            }
        };
        if let Some(g) = global {
            gathered.insert(name.clone(), g);
        }
    }
    let status = if state.comm.rank() == 0 {
        let g = state.grid();
        let image = CheckpointImage {
            options: (*state.options).clone(),
            shape: (g.nz, g.ny, g.nx),
            timestep: state.timestep,
            time: state.time,
            fields: gathered,
        };
        match write_atomically(path, &image.encode()) {
            Ok(()) => Vec::new(),
            Err(e) => {
                let msg = e.to_string().into_bytes();
                if msg.is_empty() {
                    b"write failed".to_vec()
                } else {
                    msg
                }
            }
        }
    } else {
        Vec::new()
    };
    let status = state.comm.broadcast(0, status)?;
    if status.is_empty() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            io::Error::other(String::from_utf8_lossy(&status).into_owned()),
        ))
    }
}

/// Reads a checkpoint and scatters it onto `layout`; the writer's worker
/// count does not matter. Each rank reads the file independently.
pub fn checkpoint_read(path: &Path, layout: &PencilLayout) -> Result<Restored> {
    CheckpointImage::read(path)?.restore(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> CheckpointImage {
        let shape = (2, 2, 3);
        let n = 12;
        let mut fields = BTreeMap::new();
        for (i, name) in MODEL_FIELDS.iter().enumerate() {
            fields.insert(
                name.to_string(),
                GlobalField::Double((0..n).map(|v| (v * (i + 1)) as f64 * 0.1).collect()),
            );
        }
        fields.insert("q".into(), GlobalField::Single(vec![0.5; n]));
        CheckpointImage {
            options: OptionsDatabase::load_config("a=1\nb=x,y").unwrap(),
            shape,
            timestep: 50,
            time: 12.5,
            fields,
        }
    }

    #[test]
    fn encode_decode_identity() {
        let img = image();
        let bytes = img.encode();
        assert_eq!(&bytes[..8], b"MONCMINI");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(CheckpointImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = image().encode();
        bytes[0] = b'X';
        assert!(matches!(CheckpointImage::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = image().encode();
        bytes[8] = 9;
        let err = CheckpointImage::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn missing_field_is_named() {
        let mut img = image();
        img.fields.remove("theta");
        let err = CheckpointImage::decode(&img.encode()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("`theta`")), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let bytes = image().encode();
        let err = CheckpointImage::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn shape_mismatch_is_decomposition_error() {
        let l = PencilLayout::new(crate::decomp::GlobalGrid::unit(2, 2, 2).unwrap(), 1, 0).unwrap();
        assert!(matches!(image().restore(&l), Err(Error::Decomposition(_))));
    }
}
