//! Binary tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! [0..4]  b"STEN"
//! [4]     version = 1
//! [5]     dtype   = 0 (f32)
//! [6]     rank
//! [7]     reserved = 0
//! rank x u64 dims
//! product(dims) x f32 payload, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"STEN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorBlob {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(TensorBlob { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.dims, self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size in bytes of the serialized blob.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.dims.len() + 4 * self.data.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut sink = BufWriter::new(file);
        write_tensor_blob(self, &mut sink)?;
        sink.flush().map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
        read_tensor_blob(&mut BufReader::new(file))
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    if dims.len() > usize::from(u8::MAX) {
        return Err(Error::Shape {
            what: "tensor rank (max 255)".into(),
            expected: vec![usize::from(u8::MAX)],
            actual: vec![dims.len()],
        });
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch {
            dims: dims.to_vec(),
            expected: usize::MAX,
            actual: 0,
        })
}

/// Serializes `blob` and returns the number of bytes written.
pub fn write_tensor_blob<W: Write>(blob: &TensorBlob, sink: &mut W) -> Result<usize> {
    let expected = element_count(&blob.dims)?;
    if expected != blob.data.len() {
        return Err(Error::DimensionMismatch {
            dims: blob.dims.clone(),
            expected,
            actual: blob.data.len(),
        });
    }
    let mut bytes = Vec::with_capacity(blob.encoded_len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&[VERSION, DTYPE_F32, blob.dims.len() as u8, 0]);
    for &d in &blob.dims {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &blob.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn read_tensor_blob<R: Read>(source: &mut R) -> Result<TensorBlob> {
    let mut header = [0u8; HEADER_LEN];
    read_full(source, &mut header, "header")?;
    let magic = [header[0], header[1], header[2], header[3]];
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if header[4] != VERSION {
        return Err(Error::UnsupportedVersion(header[4]));
    }
    if header[5] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header[5]));
    }
    let rank = usize::from(header[6]);

    let mut dim_bytes = vec![0u8; 8 * rank];
    read_full(source, &mut dim_bytes, "dims")?;
    let dims = dim_bytes
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            usize::try_from(d).map_err(|_| Error::DimensionMismatch {
                dims: vec![],
                expected: usize::MAX,
                actual: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let count = element_count(&dims)?;

    let mut payload = vec![0u8; count * 4];
    read_full(source, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(TensorBlob { dims, data })
}

/// Like `read_exact`, but reports how much was actually available.
fn read_full<R: Read>(source: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    what,
                    expected: buf.len() as u64,
                    found: filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(blob: &TensorBlob) -> Vec<u8> {
        let mut out = Vec::new();
        write_tensor_blob(blob, &mut out).unwrap();
        out
    }

    #[test]
    fn one_dimensional_round_trip() {
        let blob = TensorBlob::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&blob);
        assert_eq!(bytes.len(), 8 + 8 + 12);
        let back = read_tensor_blob(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, blob);
    }

    #[test]
    fn empty_blob_is_valid() {
        let blob = TensorBlob::new(vec![0], vec![]).unwrap();
        let bytes = encode(&blob);
        assert_eq!(bytes.len(), 16);
        let back = read_tensor_blob(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.dims(), &[0]);
        assert!(back.is_empty());
    }

    #[test]
    fn motion_sized_header() {
        let dims = vec![2, 31, 70, 70];
        let count = 2 * 31 * 70 * 70;
        assert_eq!(count, 303_800);
        let blob = TensorBlob::new(dims, vec![0.5; count]).unwrap();
        let bytes = encode(&blob);
        assert_eq!(&bytes[0..4], b"STEN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 4);
        assert_eq!(bytes[7], 0);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 70);
        assert_eq!(bytes.len(), 8 + 32 + 4 * 303_800);
    }

    #[test]
    fn mismatched_payload_rejected() {
        assert!(matches!(
            TensorBlob::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::DimensionMismatch { expected: 4, actual: 3, .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&TensorBlob::new(vec![1], vec![1.0]).unwrap());
        bytes[0] = b'X';
        assert!(matches!(
            read_tensor_blob(&mut bytes.as_slice()),
            Err(Error::BadMagic(_))
        ));
    }

    #[test]
    fn bad_version_and_dtype() {
        let good = encode(&TensorBlob::new(vec![1], vec![1.0]).unwrap());
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(
            read_tensor_blob(&mut v.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));
        let mut d = good;
        d[5] = 1;
        assert!(matches!(
            read_tensor_blob(&mut d.as_slice()),
            Err(Error::UnsupportedDtype(1))
        ));
    }

    #[test]
    fn truncated_payload() {
        let blob = TensorBlob::new(vec![10], (0..10).map(|i| i as f32).collect()).unwrap();
        let bytes = encode(&blob);
        let cut = &bytes[..bytes.len() - 4];
        match read_tensor_blob(&mut &cut[..]) {
            Err(Error::Truncated {
                what: "payload",
                expected: 40,
                found: 36,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            dims in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let count: usize = dims.iter().product();
            let data: Vec<f32> = (0..count)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919)) & 0x7f7f_ffff))
                .collect();
            let blob = TensorBlob::new(dims, data).unwrap();
            let bytes = encode(&blob);
            prop_assert_eq!(bytes.len(), blob.encoded_len());
            let back = read_tensor_blob(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), blob.dims());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = blob.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
