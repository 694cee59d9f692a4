//! Flat little-endian named-tensor container.
//!
//! Layout: `"NHPT"`, version `u32`, count `u32`, then per entry the name
//! length `u16` and UTF-8 bytes, rank `u8`, each extent as `u32`, the
//! precision byte (4 or 8) and the raw values.

use super::{numel, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NHPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum NamedValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NamedValues {
    pub fn from_slice<T: Real>(data: &[T]) -> Self {
        match T::BYTES {
            4 => NamedValues::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            _ => NamedValues::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        match self {
            NamedValues::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            NamedValues::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NamedValues::F32(v) => v.len(),
            NamedValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: NamedValues,
}

pub fn write_named(entries: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {}", e.name)))?;
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::invalid(format!("rank too large for {}", e.name)))?;
        if numel(&e.shape) != e.values.len() {
            return Err(Error::Shape {
                op: "write_named",
                lhs: e.shape.clone(),
                rhs: vec![e.values.len()],
            });
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid("extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.values {
            NamedValues::F32(v) => {
                out.push(4);
                v.iter().for_each(|x| x.push_le(&mut out));
            }
            NamedValues::F64(v) => {
                out.push(8);
                v.iter().for_each(|x| x.push_le(&mut out));
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated tensor container at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a container and returns its entries plus the number of bytes
/// consumed, so callers may append their own trailer.
pub fn read_named(bytes: &[u8]) -> Result<(Vec<NamedTensor>, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing NHPT magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let values = match r.u8()? {
            4 => NamedValues::F32(r.take(4 * n)?.chunks(4).map(f32::from_le).collect()),
            8 => NamedValues::F64(r.take(8 * n)?.chunks(8).map(f64::from_le).collect()),
            p => return Err(Error::Format(format!("bad precision byte {p} for {name}"))),
        };
        entries.push(NamedTensor {
            name,
            shape,
            values,
        });
    }
    Ok((entries, r.pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let e = NamedTensor {
            name: "w".into(),
            shape: vec![2],
            values: NamedValues::F32(vec![1.0, -2.0]),
        };
        let bytes = write_named(&[e]).unwrap();
        let mut expect = b"NHPT".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.push(b'w');
        expect.push(1);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.push(4);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_named(b"NOPE").is_err());
        let mut bytes = write_named(&[]).unwrap();
        bytes[4] = 9;
        assert!(read_named(&bytes).is_err());
        let e = NamedTensor {
            name: "x".into(),
            shape: vec![3],
            values: NamedValues::F64(vec![1.0, 2.0, 3.0]),
        };
        let bytes = write_named(&[e]).unwrap();
        assert!(read_named(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
            wide in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 7)) as f64).sin() * 1e3).collect();
            let values = if wide {
                NamedValues::F64(vals)
            } else {
                NamedValues::F32(vals.iter().map(|&v| v as f32).collect())
            };
            let e = NamedTensor { name: format!("p.{seed}"), shape: dims, values };
            let bytes = write_named(std::slice::from_ref(&e)).unwrap();
            let (back, used) = read_named(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, vec![e]);
        }
    }
}
