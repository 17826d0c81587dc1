//! Versioned binary container of named, shape-tagged `f64` arrays.
//!
//! Layout (little endian): `QDCK`, `u32` version, `u32` array count, then per
//! array a `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and the
//! values as `f64`.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }
}

pub fn encode_checkpoint(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decodes bytes produced by [`encode_checkpoint`]; `path` is only used in errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<NamedArray>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, at, "array name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| {
                Error::format(path, at, format!("array {name} is larger than the file"))
            })?;
        let raw = r.take(n * 8, "array data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            "trailing bytes after last array",
        ));
    }
    Ok(arrays)
}

pub fn write_checkpoint(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(arrays)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Looks up `name`, checking its shape.
pub fn find_array<'a>(
    arrays: &'a [NamedArray],
    name: &str,
    shape: Option<&[usize]>,
) -> Result<&'a NamedArray> {
    let a = arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::State(format!("checkpoint has no array named {name}")))?;
    if let Some(s) = shape {
        if a.shape != s {
            return Err(Error::Shape(format!(
                "array {name}: shape {:?}, expected {s:?}",
                a.shape
            )));
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let arrays = vec![
            NamedArray::new(
                "w",
                vec![2, 3],
                vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1],
            )
            .unwrap(),
            NamedArray::vector("", vec![]),
            NamedArray::new("scalar", vec![], vec![7.0]).unwrap(),
        ];
        let bytes = encode_checkpoint(&arrays);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in arrays.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data), bits(&b.data));
        }
    }

    #[test]
    fn corrupt_input_reports_offsets() {
        let bytes = encode_checkpoint(&[NamedArray::vector("x", vec![1.0, 2.0])]);
        let p = Path::new("mem");
        assert!(matches!(
            decode_checkpoint(b"NOPE", p),
            Err(Error::Format { offset: 0, .. })
        ));
        match decode_checkpoint(&bytes[..bytes.len() - 3], p) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bad_version, p),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(NamedArray::new("a", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
