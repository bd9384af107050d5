//! `KBPV` volume files.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `KBPV` |
//! | 4     | u32 version (1) |
//! | 12    | u32 nx, ny, nz |
//! | 12    | f32 spacing x, y, z (mm) |
//! | 1     | u8 payload kind: 0 density f32, 1 labels u8, 2 dose f32 |
//! | ...   | payload, x fastest |

use std::io::{self, Read, Write};
use thiserror::Error;

pub const VOLUME_MAGIC: &[u8; 4] = b"KBPV";
pub const VOLUME_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Density = 0,
    Labels = 1,
    Dose = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Density(Vec<f32>),
    Labels(Vec<u8>),
    Dose(Vec<f32>),
}

impl VolumeData {
    pub fn kind(&self) -> PayloadKind {
        match self {
            VolumeData::Density(_) => PayloadKind::Density,
            VolumeData::Labels(_) => PayloadKind::Labels,
            VolumeData::Dose(_) => PayloadKind::Dose,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::Density(v) | VolumeData::Dose(v) => v.len(),
            VolumeData::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: VolumeData,
}

pub fn write_volume<W: Write>(mut w: W, vol: &Volume) -> Result<(), FormatError> {
    let n = vol.dims.iter().product::<usize>();
    if vol.data.len() != n {
        return Err(FormatError::Malformed(format!(
            "payload has {} values for dims {:?}",
            vol.data.len(),
            vol.dims
        )));
    }
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&VOLUME_VERSION.to_le_bytes())?;
    for d in vol.dims {
        w.write_all(&u32::try_from(d).map_err(|_| FormatError::Malformed("dim overflow".into()))?.to_le_bytes())?;
    }
    for s in vol.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[vol.data.kind() as u8])?;
    let mut buf = Vec::with_capacity(n * 4);
    match &vol.data {
        VolumeData::Density(v) | VolumeData::Dose(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        VolumeData::Labels(v) => buf.extend_from_slice(v),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_volume<R: Read>(mut r: R) -> Result<Volume, FormatError> {
    let magic = read_array::<4, _>(&mut r)?;
    if &magic != VOLUME_MAGIC {
        return Err(FormatError::BadMagic { expected: *VOLUME_MAGIC, found: magic });
    }
    let version = read_u32(&mut r)?;
    if version != VOLUME_VERSION {
        return Err(FormatError::Version(version));
    }
    let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
    let spacing = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
    let kind = read_array::<1, _>(&mut r)?[0];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Malformed("dims overflow".into()))?;
    let data = match kind {
        0 | 2 => {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let v = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if kind == 0 {
                VolumeData::Density(v)
            } else {
                VolumeData::Dose(v)
            }
        }
        1 => {
            let mut bytes = vec![0u8; n];
            r.read_exact(&mut bytes)?;
            VolumeData::Labels(bytes)
        }
        k => return Err(FormatError::Malformed(format!("unknown payload kind {k}"))),
    };
    Ok(Volume { dims, spacing, data })
}

pub(crate) fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> io::Result<f32> {
    Ok(f32::from_le_bytes(read_array(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let vol = Volume { dims: [2, 1, 1], spacing: [4.0, 4.0, 2.0], data: VolumeData::Labels(vec![3, 7]) };
        let mut buf = Vec::new();
        write_volume(&mut buf, &vol).unwrap();
        assert_eq!(&buf[..4], b"KBPV");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &4.0f32.to_le_bytes());
        assert_eq!(buf[32], 1);
        assert_eq!(&buf[33..], &[3, 7]);
        assert_eq!(buf.len(), 35);
    }

    #[test]
    fn rejects_bad_magic_and_short_payload() {
        let err = read_volume(&b"XXXX\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
        let vol = Volume { dims: [2, 2, 1], spacing: [1.0; 3], data: VolumeData::Dose(vec![1.0; 4]) };
        let mut buf = Vec::new();
        write_volume(&mut buf, &vol).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_volume(&buf[..]), Err(FormatError::Io(_))));
    }

    proptest! {
        #[test]
        fn dose_volumes_round_trip(dims in (1usize..5, 1usize..5, 1usize..5), seed in any::<u32>()) {
            let n = dims.0 * dims.1 * dims.2;
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32) * 0.37).collect();
            let vol = Volume { dims: [dims.0, dims.1, dims.2], spacing: [4.0, 4.0, 2.0], data: VolumeData::Dose(data) };
            let mut buf = Vec::new();
            write_volume(&mut buf, &vol).unwrap();
            prop_assert_eq!(read_volume(&buf[..]).unwrap(), vol);
        }
    }
}
