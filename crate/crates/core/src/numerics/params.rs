//! Named parameter storage with Adam moments and a binary checkpoint format.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic      8 bytes   "SWSPCKPT"
//! version    u32       1
//! count      u32       number of entries
//! entry * count:
//!   name_len u32, name utf-8 bytes
//!   flags    u32       bit 0: trainable, bit 1: Adam moments follow
//!   step     u64       Adam step counter
//!   ndim     u32, dims u64 * ndim
//!   payload  f64 * prod(dims)                    (row-major)
//!   [m f64 * prod(dims), v f64 * prod(dims)]     (when bit 1 is set)
//! ```
//!
//! Entries are written in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{contract, Error, Result};

const MAGIC: &[u8; 8] = b"SWSPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
    pub(crate) first_moment: Vec<f64>,
    pub(crate) second_moment: Vec<f64>,
    pub(crate) step: u64,
}

impl Param {
    /// Number of leading-axis rows; a vector counts as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn row_len(&self) -> usize {
        if self.shape.len() <= 1 {
            self.data.len()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[r * w..(r + 1) * w]
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names are unique.
    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!(
                "parameter `{name}`: shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(contract(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            data,
            trainable,
            step: 0,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| contract(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.by_name.values().map(move |&id| (id, &self.params[id.0]))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Parameter values only; optimizer state is ignored.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((_, a), (_, b))| {
                a.name == b.name && a.shape == b.shape && a.data == b.data
            })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (_, p) in self.iter() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            let flags: u32 = u32::from(p.trainable) | (u32::from(p.trainable) << 1);
            w.write_all(&flags.to_le_bytes())?;
            w.write_all(&p.step.to_le_bytes())?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(w, &p.data)?;
            if p.trainable {
                write_f64s(w, &p.first_moment)?;
                write_f64s(w, &p.second_moment)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a switch-spaces checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let flags = read_u32(r)?;
            let step = read_u64(r)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = read_f64s(r, n)?;
            let id = store.insert(&name, shape, data, flags & 1 != 0)?;
            let p = store.get_mut(id);
            p.step = step;
            if flags & 2 != 0 {
                p.first_moment = read_f64s(r, n)?;
                p.second_moment = read_f64s(r, n)?;
            }
        }
        Ok(store)
    }
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
