//! Binary containers shared with external tooling.
//!
//! Feature files (`.dvfm`):
//!
//! ```text
//! "DVFM" | version u8 | W u32 | H u32 | D u32 | W*H*D f32
//! ```
//!
//! Checkpoints (`.dvck`):
//!
//! ```text
//! "DVCK" | version u8 | count u32 | { name_len u32 | name utf8 | rank u32 | dims u32* | f32* }*
//! ```
//!
//! All integers and floats are little-endian. Feature payloads are in
//! `((h * W + w) * D + d)` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const FEATURE_MAGIC: &[u8; 4] = b"DVFM";
pub const FEATURE_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVCK";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_features(x: &Tensor3) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + x.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    for dim in [x.width, x.height, x.channels] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &x.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Cursor over a byte buffer that reports truncation against a path.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.path, "payload size overflows"))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor3> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected DVFM"));
    }
    let version = r.u8()?;
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    let (w, h, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if bytes.len() != 17 + n * 4 {
        return Err(Error::format(
            path,
            format!("header says {w}x{h}x{d} ({} bytes) but file has {}", 17 + n * 4, bytes.len()),
        ));
    }
    let data = r.f32s(n)?;
    Tensor3::from_vec(w, h, d, data)
}

pub fn read_features(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn write_features(path: &Path, x: &Tensor3) -> Result<()> {
    write_bytes(path, &encode_features(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: dims.iter().map(|d| *d as u32).collect(),
            data,
        }
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|d| *d as usize).collect()
    }
}

pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected DVCK"));
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
            .ok_or_else(|| Error::format(path, format!("tensor {name} size overflows")))?;
        let data = r.f32s(n)?;
        tensors.push(NamedTensor { name, dims, data });
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(tensors)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_bytes(path, &encode_checkpoint(tensors))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_header_layout() {
        let x = Tensor3::from_vec(2, 1, 1, vec![1.0, -2.5]).unwrap();
        let b = encode_features(&x);
        assert_eq!(&b[..4], b"DVFM");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn feature_length_mismatch_rejected() {
        let x = Tensor3::zeros(2, 2, 3);
        let mut b = encode_features(&x);
        b.pop();
        assert!(matches!(decode_features(&b, Path::new("t")), Err(Error::Format { .. })));
        let mut b = encode_features(&x);
        b.extend_from_slice(&[0, 0, 0, 0]);
        assert!(decode_features(&b, Path::new("t")).is_err());
        let mut b = encode_features(&x);
        b[0] = b'X';
        assert!(decode_features(&b, Path::new("t")).is_err());
    }

    #[test]
    fn checkpoint_layout() {
        let t = NamedTensor::new("ab", &[2], vec![0.5, 1.0]);
        let b = encode_checkpoint(&[t]);
        let mut expect = b"DVCK".to_vec();
        expect.push(1);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&0.5f32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    proptest! {
        #[test]
        fn features_round_trip(w in 1usize..5, h in 1usize..5, d in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f32> = (0..w * h * d)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32) * 0.01 - 5.0)
                .collect();
            let x = Tensor3::from_vec(w, h, d, data).unwrap();
            let back = decode_features(&encode_features(&x), Path::new("p")).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn checkpoint_round_trip(names in proptest::collection::vec("[a-z.]{1,12}", 0..4), n in 0usize..7) {
            let tensors: Vec<NamedTensor> = names
                .iter()
                .enumerate()
                .map(|(i, name)| NamedTensor::new(name.clone(), &[n, i + 1], vec![i as f32; n * (i + 1)]))
                .collect();
            let back = decode_checkpoint(&encode_checkpoint(&tensors), Path::new("p")).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
