//! Named parameter collections and their `NDG1` binary container.
//!
//! Layout: the magic bytes `NDG1`, then one record per tensor until end of
//! input. A record is the name length (`u32`), the UTF-8 name bytes, the rank
//! (`u32`), one `u64` per extent and the `f64` payload, all little-endian.

use std::io::{Read, Write};

use super::{Array, GradError};

pub const CONTAINER_MAGIC: &[u8; 4] = b"NDG1";

/// Named arrays in insertion order. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<(), GradError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(GradError::NameMismatch(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Zero-filled copy with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, a)| (n.clone(), Array::zeros(a.shape())))
                .collect(),
        }
    }

    /// Fails unless `other` has exactly the same names, order and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<(), GradError> {
        if self.len() != other.len() {
            return Err(GradError::NameMismatch(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(GradError::NameMismatch(format!("`{na}` vs `{nb}`")));
            }
            if a.shape() != b.shape() {
                return Err(GradError::NameMismatch(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), GradError> {
        w.write_all(CONTAINER_MAGIC)?;
        for (name, a) in &self.entries {
            let len = u32::try_from(name.len())
                .map_err(|_| GradError::Container("parameter name too long".into()))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(a.shape().len() as u32).to_le_bytes())?;
            for &d in a.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in a.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, GradError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GradError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CONTAINER_MAGIC {
            return Err(GradError::Container("bad magic, expected NDG1".into()));
        }
        let mut set = ParamSet::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| GradError::Container("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            set.insert(name, Array::new(shape, data)?)?;
        }
        Ok(set)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GradError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GradError::Container(format!("truncated record at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, GradError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, GradError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
