//! Binary file formats. All integers and reals are little-endian.
//!
//! ```text
//! cube    "HCUB" | u16 version (1) | u32 H | u32 W | u32 B | H·W·B f32, band-sequential
//! labels  "HLBL" | u32 H | u32 W | H·W u16 class ids, row-major
//! matrix  "FMAT" | u32 rows | u32 cols | rows·cols f64, row-major
//! ```

use std::path::Path;

use super::{HyperCube, LabelMap};
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const CUBE_MAGIC: &[u8; 4] = b"HCUB";
pub const LABEL_MAGIC: &[u8; 4] = b"HLBL";
pub const FEATURE_MAGIC: &[u8; 4] = b"FMAT";
const CUBE_VERSION: u16 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                expected: end,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &'static [u8; 4]) -> Result<()> {
        let name = std::str::from_utf8(magic).expect("ascii magic");
        match self.take(4) {
            Ok(m) if m == magic => Ok(()),
            _ => Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected: name,
            }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn expect_payload(&self, len: usize) -> Result<()> {
        let expected = self.pos + len;
        if self.bytes.len() < expected {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                expected,
            });
        }
        if self.bytes.len() > expected {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                offset: expected,
                reason: format!("{} unexpected trailing bytes", self.bytes.len() - expected),
            });
        }
        Ok(())
    }

    fn malformed(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }
}

fn dims_product(dims: &[usize], elem: usize) -> Option<usize> {
    dims.iter().try_fold(elem, |acc, &d| acc.checked_mul(d))
}

pub fn save_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(18 + 4 * cube.raw().len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for d in [cube.height(), cube.width(), cube.bands()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in cube.raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(CUBE_MAGIC)?;
    let version = c.u16()?;
    if version != CUBE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let (h, w, b) = (c.u32()?, c.u32()?, c.u32()?);
    if h == 0 || w == 0 || b == 0 {
        return Err(c.malformed(6, format!("zero dimension in {h}x{w}x{b}")));
    }
    let len = dims_product(&[h, w, b], 4).ok_or_else(|| c.malformed(6, "dimensions overflow"))?;
    c.expect_payload(len)?;
    let start = c.pos;
    let raw: Vec<f32> = c
        .take(len)?
        .chunks_exact(4)
        .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
        .collect();
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(c.malformed(start + 4 * i, "non-finite value"));
    }
    HyperCube::new(h, w, b, raw)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 2 * labels.as_slice().len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.height() as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width() as u32).to_le_bytes());
    for v in labels.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(LABEL_MAGIC)?;
    let (h, w) = (c.u32()?, c.u32()?);
    let len = dims_product(&[h, w], 2).ok_or_else(|| c.malformed(4, "dimensions overflow"))?;
    c.expect_payload(len)?;
    let classes = c
        .take(len)?
        .chunks_exact(2)
        .map(|q| u16::from_le_bytes([q[0], q[1]]))
        .collect();
    LabelMap::new(h, w, classes)
}

pub fn save_features(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 8 * m.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(FEATURE_MAGIC)?;
    let (rows, cols) = (c.u32()?, c.u32()?);
    let len = dims_product(&[rows, cols], 8).ok_or_else(|| c.malformed(4, "dimensions overflow"))?;
    c.expect_payload(len)?;
    let start = c.pos;
    let data: Vec<f64> = c
        .take(len)?
        .chunks_exact(8)
        .map(|q| f64::from_le_bytes(q.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(c.malformed(start + 8 * i, "non-finite value"));
    }
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn hand_built_cube_layout() {
        // 2x2 pixels, 3 bands; value = 100*band + 10*row + col
        let mut raw = Vec::new();
        for b in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    raw.push((100 * b + 10 * r + c) as f32);
                }
            }
        }
        let cube = HyperCube::new(2, 2, 3, raw).unwrap();
        let dir = tmp();
        let path = dir.path().join("c.hcub");
        save_cube(&cube, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 18 + 12 * 4);
        assert_eq!(&bytes[0..4], b"HCUB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[3, 0, 0, 0]);
        // band 2, row 1, col 0 sits at 18 + 4*(2*4 + 1*2 + 0)
        let off = 18 + 4 * 10;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(v, 210.0);
        assert_eq!(load_cube(&path).unwrap(), cube);
    }

    #[test]
    fn wrong_magic_is_reported() {
        let dir = tmp();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"XXXX\x01\x00").unwrap();
        assert!(matches!(
            load_cube(&path),
            Err(Error::BadMagic { expected: "HCUB", .. })
        ));
        assert!(matches!(
            load_labels(&path),
            Err(Error::BadMagic { expected: "HLBL", .. })
        ));
        assert!(matches!(
            load_features(&path),
            Err(Error::BadMagic { expected: "FMAT", .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let cube = HyperCube::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dir = tmp();
        let path = dir.path().join("c");
        save_cube(&cube, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_cube(&path) {
            Err(Error::Truncated { offset, expected, .. }) => {
                assert_eq!(offset, bytes.len() - 3);
                assert_eq!(expected, bytes.len());
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, &bytes[..9]).unwrap();
        assert!(matches!(
            load_cube(&path),
            Err(Error::Truncated { offset: 9, .. })
        ));
    }

    #[test]
    fn version_is_checked() {
        let dir = tmp();
        let path = dir.path().join("c");
        std::fs::write(&path, b"HCUB\x02\x00").unwrap();
        assert!(matches!(
            load_cube(&path),
            Err(Error::UnsupportedVersion { version: 2, .. })
        ));
    }

    #[test]
    fn label_layout() {
        let labels = LabelMap::new(1, 3, vec![0, 2, 513]).unwrap();
        let dir = tmp();
        let path = dir.path().join("l");
        save_labels(&labels, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..12], b"HLBL\x01\x00\x00\x00\x03\x00\x00\x00");
        assert_eq!(&bytes[12..], &[0, 0, 2, 0, 1, 2]);
        assert_eq!(load_labels(&path).unwrap(), labels);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cube_round_trip_is_bit_identical(
            h in 1usize..5, w in 1usize..5, b in 1usize..4, seed in any::<u64>()
        ) {
            use rand::Rng;
            let mut rng = crate::numcore::seeded_rng(seed);
            let raw: Vec<f32> = (0..h * w * b).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let cube = HyperCube::new(h, w, b, raw).unwrap();
            let dir = tmp();
            let path = dir.path().join("c");
            save_cube(&cube, &path).unwrap();
            let back = load_cube(&path).unwrap();
            prop_assert!(back.raw().iter().zip(cube.raw()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let m = Matrix::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0));
            save_features(&m, &path).unwrap();
            prop_assert_eq!(load_features(&path).unwrap(), m);
        }
    }
}
