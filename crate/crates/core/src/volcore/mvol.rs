//! MVOL container: 32-byte little-endian header followed by the raw voxel payload.
//!
//! ```text
//! 0..4    b"MVOL"
//! 4       version (0x01)
//! 5       dtype (0x01 = f32, 0x02 = u8)
//! 6..8    zero
//! 8..20   dims (z, y, x) as u32
//! 20..32  spacing (z, y, x) as f32, mm
//! 32..    payload, x-fastest, exactly dims-implied length
//! ```

use std::fs;
use std::path::Path;

use super::volume::{voxel_count, Volume, Voxels};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 32;
const DTYPE_F32: u8 = 0x01;
const DTYPE_U8: u8 = 0x02;

pub fn encode_mvol(vol: &Volume) -> Vec<u8> {
    let elem = match vol.voxels() {
        Voxels::F32(_) => 4,
        Voxels::U8(_) => 1,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + elem * vol.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match vol.voxels() {
        Voxels::F32(_) => DTYPE_F32,
        Voxels::U8(_) => DTYPE_U8,
    });
    out.extend_from_slice(&[0, 0]);
    for d in vol.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    match vol.voxels() {
        Voxels::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Voxels::U8(v) => out.extend_from_slice(v),
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_mvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing MVOL magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!(
            "header truncated: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Unsupported(format!("MVOL version {}", bytes[4])));
    }
    let elem = match bytes[5] {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        code => return Err(Error::Unsupported(format!("MVOL dtype code {code:#04x}"))),
    };
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::Format("nonzero header padding".into()));
    }
    let dims = [
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
    ];
    let spacing = [f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28)];
    let n = voxel_count(dims);
    let expected = n
        .checked_mul(elem)
        .ok_or_else(|| Error::Corruption("dims overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let voxels = if elem == 4 {
        Voxels::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect(),
        )
    } else {
        Voxels::U8(payload.to_vec())
    };
    Volume::new(dims, spacing, voxels).map_err(|e| Error::Corruption(e.to_string()))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mvol(&bytes)
}

pub fn write_mvol(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mvol(vol)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dims: [u32; 3], dtype: u8) -> Vec<u8> {
        let mut h = b"MVOL".to_vec();
        h.extend_from_slice(&[1, dtype, 0, 0]);
        for d in dims {
            h.extend_from_slice(&d.to_le_bytes());
        }
        for _ in 0..3 {
            h.extend_from_slice(&1.0f32.to_le_bytes());
        }
        h
    }

    #[test]
    fn smallest_well_formed_file() {
        let mut bytes = header([2, 2, 2], 1);
        assert_eq!(bytes.len(), 32);
        bytes.extend(std::iter::repeat_n(0u8, 32));
        let vol = decode_mvol(&bytes).unwrap();
        assert_eq!(vol.len(), 8);
        assert_eq!(vol.dims(), [2, 2, 2]);
    }

    #[test]
    fn single_voxel_layout() {
        let vol = Volume::from_f32([1, 1, 1], [1.0; 3], vec![0.0]).unwrap();
        let bytes = encode_mvol(&vol);
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[..8], &[b'M', b'V', b'O', b'L', 1, 1, 0, 0]);
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[32..], &[0, 0, 0, 0]);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        // 4*4*4 f32 voxels need 256 payload bytes.
        let mut bytes = header([4, 4, 4], 1);
        bytes.extend(std::iter::repeat_n(0u8, 100));
        assert!(matches!(decode_mvol(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn trailing_bytes_are_corruption() {
        let mut bytes = header([1, 1, 1], 2);
        bytes.extend_from_slice(&[1, 9]);
        assert!(matches!(decode_mvol(&bytes), Err(Error::Corruption(_))));
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = header([1, 1, 1], 2);
        bytes.push(0);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_mvol(&wrong), Err(Error::Format(_))));
        let mut dtype = bytes.clone();
        dtype[5] = 7;
        assert!(matches!(decode_mvol(&dtype), Err(Error::Unsupported(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mvol");
        let data: Vec<f32> = (0..512).map(|i| (i as f32).sin()).collect();
        let vol = Volume::from_f32([8, 8, 8], [2.5, 0.8, 0.8], data).unwrap();
        write_mvol(&vol, &path).unwrap();
        assert_eq!(read_mvol(&path).unwrap(), vol);
        let mask = Volume::from_u8([2, 2, 2], [1.0; 3], vec![0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        write_mvol(&mask, &path).unwrap();
        assert_eq!(read_mvol(&path).unwrap(), mask);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let vol = Volume::filled([1, 1, 1], [1.0; 3], 0.0).unwrap();
        let err = write_mvol(&vol, "/nonexistent-dir/x/v.mvol").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            z in 1usize..=16, y in 1usize..=16, x in 1usize..=16,
            sp in prop::array::uniform3(0.1f32..10.0),
            seed in any::<u64>(), as_u8 in any::<bool>(),
        ) {
            let n = z * y * x;
            let vol = if as_u8 {
                let data = (0..n).map(|i| ((seed >> (i % 61)) as u8).wrapping_add(i as u8)).collect();
                Volume::from_u8([z, y, x], sp, data).unwrap()
            } else {
                let data = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_mul(i as u32 + 1) & 0x7f7f_ffff)).collect();
                Volume::from_f32([z, y, x], sp, data).unwrap()
            };
            let bytes = encode_mvol(&vol);
            let back = decode_mvol(&bytes).unwrap();
            prop_assert_eq!(back.dims(), vol.dims());
            prop_assert_eq!(back.spacing().map(f32::to_bits), vol.spacing().map(f32::to_bits));
            prop_assert_eq!(encode_mvol(&back), bytes);
        }
    }
}
