//! `TNWT` weight files.
//!
//! Layout, all integers little-endian: magic `TNWT`, version `u32 = 1`,
//! tensor count `u32`, then per tensor: name length `u16`, UTF-8 name,
//! `ndim: u8`, `ndim × u32` dims, and `product(dims)` `f32` values in
//! row-major order. Biases are written with one dimension, weights with
//! four.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::arch::ParamKind;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

pub const MAGIC: &[u8; 4] = b"TNWT";
pub const VERSION: u32 = 1;

/// Serializes the values (gradients are not stored), narrowing to `f32`.
pub fn encode_weights<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::WeightFormat(format!("name `{}` is too long", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        let s = p.value.shape();
        let dims: Vec<usize> = match p.kind {
            ParamKind::Bias => vec![s.n],
            ParamKind::Weight => s.dims().to_vec(),
        };
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::WeightFormat(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::WeightFormat(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            "TNWT"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightFormat(format!("tensor {i} has a non-UTF-8 name")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::WeightFormat(format!("duplicate tensor name `{name}`")));
        }
        let ndim = r.u8("ndim")?;
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(r.u32("dims")? as usize);
        }
        let (kind, shape) = match dims[..] {
            [c] => (ParamKind::Bias, Shape::new(c, 1, 1, 1)),
            [n, c, h, w] => (ParamKind::Weight, Shape::new(n, c, h, w)),
            _ => {
                return Err(Error::WeightFormat(format!(
                    "`{name}` has {ndim} dims; only 1 (bias) or 4 (weight) are valid"
                )))
            }
        };
        let shape = shape
            .validate()
            .map_err(|_| Error::WeightFormat(format!("`{name}` has a zero dimension")))?;
        let raw = r.take(shape.len() * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, kind, Tensor4::from_vec(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save_weights<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes).map_err(|e| match e {
        Error::WeightFormat(m) => Error::WeightFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ternausnet, init_params, InitScheme};
    use crate::rng::Rng;

    fn tiny() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", ParamKind::Weight, Tensor4::from_fn([2, 1, 1, 2], |i| i as f32 - 1.5))
            .unwrap();
        s.insert("a.bias", ParamKind::Bias, Tensor4::from_vec([2, 1, 1, 1], vec![-0.0, f32::MIN_POSITIVE]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn exact_layout() {
        let bytes = encode_weights(&tiny()).unwrap();
        let mut want = b"TNWT".to_vec();
        want.extend([1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend([8, 0]);
        want.extend(b"a.weight");
        want.push(4);
        for d in [2u32, 1, 1, 2] {
            want.extend(d.to_le_bytes());
        }
        for v in [-1.5f32, -0.5, 0.5, 1.5] {
            want.extend(v.to_le_bytes());
        }
        want.extend([6, 0]);
        want.extend(b"a.bias");
        want.push(1);
        want.extend(2u32.to_le_bytes());
        for v in [-0.0f32, f32::MIN_POSITIVE] {
            want.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, want);
    }

    #[test]
    fn full_network_round_trip_is_bit_exact() {
        let arch = build_ternausnet();
        let store: ParamStore<f32> = init_params(&arch, &InitScheme::Lecun, &mut Rng::new(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tnwt"), dir.path().join("b.tnwt"));
        save_weights(&store, &p1).unwrap();
        let back = load_weights(&p1).unwrap();
        assert_eq!(back.len(), 38);
        back.check_against(&arch).unwrap();
        assert_eq!(back, store);
        save_weights(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let good = encode_weights(&tiny()).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_weights(&bad).unwrap_err().to_string().contains("version"));

        for cut in [3, 11, 20, good.len() - 1] {
            let err = decode_weights(&good[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "{cut}: {err}");
        }

        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
    }

    #[test]
    fn rejects_duplicate_names() {
        let good = encode_weights(&tiny()).unwrap();
        // Rename the second tensor to the first one's name.
        let mut body = good[12..].to_vec();
        let second = 2 + 8 + 1 + 16 + 16;
        let mut dup = good[..12].to_vec();
        dup.extend(&body[..second]);
        body = body[second..].to_vec();
        dup.extend([8, 0]);
        dup.extend(b"a.weight");
        dup.extend(&body[2 + 6..]);
        let err = decode_weights(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }
}
