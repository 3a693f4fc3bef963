//! Flat little-endian dump of the master parameters, scale exponents and the
//! dropout stream state.
//!
//! Layout: `LPMC`, u32 version, u64 rng state, u32 parameter count, then per
//! parameter u32 rows, u32 cols and `rows * cols` f64 values; u32 group
//! count, then per group a u32-length-prefixed group id and an i32 exponent.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Network;
use crate::error::{Error, Result};
use crate::scaling::GroupId;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"LPMC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub rng_state: u64,
    pub masters: Vec<Matrix>,
    pub exponents: BTreeMap<GroupId, i32>,
}

impl Checkpoint {
    pub fn capture(net: &Network, rng_state: u64) -> Self {
        Checkpoint {
            rng_state,
            masters: net.parameters().into_iter().map(|(_, p)| p.master().clone()).collect(),
            exponents: net.precision().bank().exponents(),
        }
    }

    /// Loads exponents and masters into a network of the same shape, rounds
    /// the masters onto the network's update grids and re-syncs. Momentum
    /// buffers restart from zero.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        let count = net.parameters().len();
        if count != self.masters.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, network has {count}",
                self.masters.len()
            )));
        }
        net.precision_mut().bank_mut().load_exponents(&self.exponents)?;
        for ((_, p), m) in net.parameters_mut().into_iter().zip(&self.masters) {
            p.set_master(m.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            p.reset_velocity();
        }
        net.requantize_masters()?;
        net.sync_all()
    }
}

pub fn write_checkpoint(mut w: impl Write, ck: &Checkpoint) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ck.rng_state.to_le_bytes())?;
    w.write_all(&(ck.masters.len() as u32).to_le_bytes())?;
    for m in &ck.masters {
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&(ck.exponents.len() as u32).to_le_bytes())?;
    for (id, e) in &ck.exponents {
        let name = id.to_string();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&e.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.buf.len(),
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let rng_state = u64::from_le_bytes(c.array()?);
    let n = c.u32()? as usize;
    let mut masters = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("parameter size overflows".into()))?;
        let bytes = c.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("parameter size overflows".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        masters.push(Matrix::from_vec(rows, cols, data)?);
    }
    let groups = c.u32()? as usize;
    let mut exponents = BTreeMap::new();
    for _ in 0..groups {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("group id is not utf-8".into()))?;
        let id: GroupId = name.parse()?;
        exponents.insert(id, i32::from_le_bytes(c.array()?));
    }
    if c.pos != buf.len() {
        return Err(Error::TrailingData(buf.len() - c.pos));
    }
    Ok(Checkpoint {
        rng_state,
        masters,
        exponents,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, ck).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
