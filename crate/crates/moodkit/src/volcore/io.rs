//! File I/O: the native RVOL format (bit-exact round trips) and a NIfTI-1
//! subset (dims, {uint8, int16, float32} datatypes, scaling slope/intercept,
//! optional gzip).

use super::{BinaryMask3D, Volume3D};
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::Path;

pub const RVOL_MAGIC: &[u8; 8] = b"RVOL0001";
pub const NIFTI_HEADER_LEN: usize = 348;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

#[inline]
fn u32_at(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}
#[inline]
fn i32_at(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}
#[inline]
fn i16_at(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes(buf[off..off + 2].try_into().unwrap())
}
#[inline]
fn f32_at(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Read a volume, dispatching on the file's magic bytes (RVOL vs NIfTI-1).
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let buf = read_bytes(path)?;
    if buf.len() >= 8 && &buf[..8] == RVOL_MAGIC {
        let (dims, spacing, dtype, payload) = parse_rvol(path, &buf)?;
        let n = dims[0] * dims[1] * dims[2];
        let data = match dtype {
            0 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => payload.iter().map(|&b| b as f32).collect(),
            other => return Err(Error::UnsupportedDtype(other as i32)),
        };
        let mut v = Volume3D::new(dims, data)?;
        debug_assert_eq!(v.len(), n);
        v.spacing = spacing;
        Ok(v)
    } else if buf.len() >= NIFTI_HEADER_LEN && i32_at(&buf, 0) == 348 {
        read_nifti(path, &buf)
    } else {
        Err(Error::BadMagic { path: path.to_owned(), expected: "RVOL0001 or NIfTI-1" })
    }
}

/// Write a volume; `.nii` / `.nii.gz` paths get NIfTI-1 float32, everything
/// else the native RVOL format.
pub fn write_volume(v: &Volume3D, path: &Path) -> Result<()> {
    if is_nifti_path(path) {
        let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        write_nifti(path, v.dims, v.spacing, 16, 32, &payload)
    } else {
        let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        write_rvol(path, v.dims, v.spacing, 0, &payload)
    }
}

/// Read a binary mask; any nonzero voxel is true.
pub fn read_mask(path: &Path) -> Result<BinaryMask3D> {
    let v = read_volume(path)?;
    let data = v.data.iter().map(|&x| x != 0.0).collect();
    BinaryMask3D::new(v.dims, data)
}

/// Write a binary mask as RVOL dtype 1 or NIfTI uint8.
pub fn write_mask(m: &BinaryMask3D, path: &Path) -> Result<()> {
    let payload: Vec<u8> = m.data.iter().map(|&b| b as u8).collect();
    if is_nifti_path(path) {
        write_nifti(path, m.dims, [1.0; 3], 2, 8, &payload)
    } else {
        write_rvol(path, m.dims, [1.0; 3], 1, &payload)
    }
}

fn parse_rvol<'a>(
    path: &Path,
    buf: &'a [u8],
) -> Result<([usize; 3], [f32; 3], u8, &'a [u8])> {
    const HEADER: usize = 8 + 12 + 12 + 1;
    if buf.len() < HEADER {
        return Err(Error::Truncated { expected: HEADER, got: buf.len() });
    }
    if &buf[..8] != RVOL_MAGIC {
        return Err(Error::BadMagic { path: path.to_owned(), expected: "RVOL0001" });
    }
    let dims = [u32_at(buf, 8) as usize, u32_at(buf, 12) as usize, u32_at(buf, 16) as usize];
    let spacing = [f32_at(buf, 20), f32_at(buf, 24), f32_at(buf, 28)];
    let dtype = buf[32];
    let n = dims[0] * dims[1] * dims[2];
    let elem = match dtype {
        0 => 4,
        1 => 1,
        other => return Err(Error::UnsupportedDtype(other as i32)),
    };
    let expected = HEADER + n * elem;
    if buf.len() < expected {
        return Err(Error::Truncated { expected, got: buf.len() });
    }
    Ok((dims, spacing, dtype, &buf[HEADER..expected]))
}

fn write_rvol(
    path: &Path,
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: u8,
    payload: &[u8],
) -> Result<()> {
    let mut buf = Vec::with_capacity(33 + payload.len());
    buf.extend_from_slice(RVOL_MAGIC);
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(dtype);
    buf.extend_from_slice(payload);
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_nifti(path: &Path, buf: &[u8]) -> Result<Volume3D> {
    if buf.len() < NIFTI_HEADER_LEN {
        return Err(Error::Truncated { expected: NIFTI_HEADER_LEN, got: buf.len() });
    }
    let sizeof_hdr = i32_at(buf, 0);
    let magic_ok = &buf[344..347] == b"n+1" || &buf[344..347] == b"ni1";
    if sizeof_hdr != 348 || !magic_ok {
        return Err(Error::BadMagic { path: path.to_owned(), expected: "NIfTI-1 (n+1)" });
    }
    let ndim = i16_at(buf, 40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::InvalidVolume(format!("unsupported dim[0] = {ndim}")));
    }
    let dim = |i: usize| i16_at(buf, 40 + 2 * i).max(1) as usize;
    let dims = [dim(1), dim(2), dim(3)];
    if ndim == 4 && dim(4) != 1 {
        return Err(Error::InvalidVolume("4D volumes are not supported".into()));
    }
    let datatype = i16_at(buf, 70);
    let spacing = [f32_at(buf, 80), f32_at(buf, 84), f32_at(buf, 88)];
    let vox_offset = f32_at(buf, 108) as usize;
    let mut slope = f32_at(buf, 112);
    let inter = f32_at(buf, 116);
    if slope == 0.0 {
        slope = 1.0;
    }
    let n = dims[0] * dims[1] * dims[2];
    let elem = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => return Err(Error::UnsupportedDtype(other as i32)),
    };
    let expected = vox_offset + n * elem;
    if buf.len() < expected {
        return Err(Error::Truncated { expected, got: buf.len() });
    }
    let raw = &buf[vox_offset..expected];
    let data: Vec<f32> = match datatype {
        2 => raw.iter().map(|&b| slope * b as f32 + inter).collect(),
        4 => raw
            .chunks_exact(2)
            .map(|c| slope * i16::from_le_bytes(c.try_into().unwrap()) as f32 + inter)
            .collect(),
        16 => raw
            .chunks_exact(4)
            .map(|c| slope * f32::from_le_bytes(c.try_into().unwrap()) + inter)
            .collect(),
        _ => unreachable!(),
    };
    let mut v = Volume3D::new(dims, data)?;
    v.spacing = [
        if spacing[0] > 0.0 { spacing[0] } else { 1.0 },
        if spacing[1] > 0.0 { spacing[1] } else { 1.0 },
        if spacing[2] > 0.0 { spacing[2] } else { 1.0 },
    ];
    Ok(v)
}

fn write_nifti(
    path: &Path,
    dims: [usize; 3],
    spacing: [f32; 3],
    datatype: i16,
    bitpix: i16,
    payload: &[u8],
) -> Result<()> {
    let vox_offset = 352u32; // 348-byte header + 4-byte extension flag
    let mut hdr = vec![0u8; vox_offset as usize];
    hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim[0..3]
    hdr[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, d) in dims.iter().enumerate() {
        hdr[42 + 2 * i..44 + 2 * i].copy_from_slice(&(*d as i16).to_le_bytes());
    }
    for i in 4..8 {
        hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    hdr[70..72].copy_from_slice(&datatype.to_le_bytes());
    hdr[72..74].copy_from_slice(&bitpix.to_le_bytes());
    hdr[76..80].copy_from_slice(&1.0f32.to_le_bytes()); // pixdim[0]
    for (i, s) in spacing.iter().enumerate() {
        hdr[80 + 4 * i..84 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    hdr[108..112].copy_from_slice(&(vox_offset as f32).to_le_bytes());
    hdr[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    hdr[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut buf = hdr;
    buf.extend_from_slice(payload);

    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
    if name.ends_with(".gz") {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let f = std::fs::File::create(path)?;
        let mut enc = GzEncoder::new(f, Compression::fast());
        enc.write_all(&buf)?;
        enc.finish()?;
    } else {
        std::fs::write(path, buf)?;
    }
    Ok(())
}
