//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer for
//! scalar 3D volumes.
//!
//! Orientation is reduced to voxel spacing plus a translation: the origin is
//! read from the sform (when `sform_code > 0`) or the qform offsets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{voxel_count, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

/// On-disk voxel types supported for reading and writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
            DataType::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::Uint8,
            4 => DataType::Int16,
            16 => DataType::Float32,
            64 => DataType::Float64,
            other => {
                return Err(Error::format(
                    "datatype",
                    format!("unsupported NIfTI datatype code {other}"),
                ))
            }
        })
    }

    fn bytes(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

struct Fields<'a> {
    buf: &'a [u8],
    little: bool,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[at..at + N]);
        if !self.little {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format("gzip", e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parse a NIfTI-1 image held in memory.
pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            "header",
            format!("truncated header: {} of {HEADER_SIZE} bytes", bytes.len()),
        ));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let little = if sizeof_hdr == HEADER_SIZE as i32 {
        true
    } else if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
        false
    } else {
        return Err(Error::format("sizeof_hdr", format!("expected 348, found {sizeof_hdr}")));
    };
    if &bytes[344..348] != MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected \"n+1\\0\", found {:?}", &bytes[344..348]),
        ));
    }
    let f = Fields { buf: bytes, little };

    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format("dim", format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = f.i16(42 + 2 * a as usize);
        if v <= 0 {
            return Err(Error::format("dim", format!("dim[{}] = {v} must be positive", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        let v = f.i16(42 + 2 * a);
        if v > 1 {
            return Err(Error::format("dim", format!("dim[{}] = {v}: only 3D volumes are supported", a + 1)));
        }
    }
    let dtype = DataType::from_code(f.i16(70))?;
    let mut spacing = [1.0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = f.f32(80 + 4 * a) as f64;
        if a < ndim as usize {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::format("pixdim", format!("pixdim[{}] = {p} must be positive", a + 1)));
            }
            *s = p;
        }
    }
    let vox_offset = f.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format("vox_offset", format!("invalid offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = f.f32(112) as f64;
    let inter = f.f32(116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, if inter.is_finite() { inter } else { 0.0 })
    };
    let origin = if f.i16(254) > 0 {
        [f.f32(280 + 12) as f64, f.f32(296 + 12) as f64, f.f32(312 + 12) as f64]
    } else {
        [f.f32(268) as f64, f.f32(272) as f64, f.f32(276) as f64]
    };

    let n = voxel_count(dims);
    let need = vox_offset + n * dtype.bytes();
    if bytes.len() < need {
        return Err(Error::format(
            "data",
            format!("truncated voxel data: file has {} bytes, need {need}", bytes.len()),
        ));
    }
    let raw = &bytes[vox_offset..need];
    let g = Fields { buf: raw, little };
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let v = match dtype {
                DataType::Uint8 => raw[i] as f64,
                DataType::Int16 => g.i16(2 * i) as f64,
                DataType::Float32 => g.f32(4 * i) as f64,
                DataType::Float64 => f64::from_le_bytes(g.bytes(8 * i)),
            };
            slope * v + inter
        })
        .collect();
    Ok(Volume::new(dims, spacing, data)?.with_origin(origin))
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode(&read_all(path)?)
}

/// Read a NIfTI label image as a boolean mask (`value > 0.5`).
pub fn read_mask(path: impl AsRef<Path>) -> Result<(Volume, Vec<bool>)> {
    let v = read_nifti(path)?;
    let mask = v.data().iter().map(|&x| x > 0.5).collect();
    Ok((v, mask))
}

/// Serialize a volume as a NIfTI-1 image with the given voxel type (no scaling).
pub fn encode(vol: &Volume, dtype: DataType) -> Result<Vec<u8>> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::format("dim", format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    put(&mut h, 38, b"r"); // regular
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &dtype.code().to_le_bytes());
    put(&mut h, 72, &((dtype.bytes() * 8) as i16).to_le_bytes());
    let sp = vol.spacing();
    let pixdim: [f32; 8] = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 116, &0.0f32.to_le_bytes());
    put(&mut h, 123, &[2u8]); // xyzt_units: mm
    put(&mut h, 252, &1i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    let o = vol.origin();
    for a in 0..3 {
        put(&mut h, 268 + 4 * a, &(o[a] as f32).to_le_bytes());
        let mut row = [0f32; 4];
        row[a] = sp[a] as f32;
        row[3] = o[a] as f32;
        for (k, r) in row.iter().enumerate() {
            put(&mut h, 280 + 16 * a + 4 * k, &r.to_le_bytes());
        }
    }
    put(&mut h, 344, MAGIC);

    h.reserve(vol.len() * dtype.bytes());
    for &v in vol.data() {
        match dtype {
            DataType::Uint8 => h.push(v.round().clamp(0.0, 255.0) as u8),
            DataType::Int16 => h.extend_from_slice(
                &(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes(),
            ),
            DataType::Float32 => h.extend_from_slice(&(v as f32).to_le_bytes()),
            DataType::Float64 => h.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(h)
}

fn write_bytes(bytes: &[u8], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write as float32; gzip-compressed when the file name ends in `.gz`.
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(&encode(vol, DataType::Float32)?, path.as_ref())
}

pub fn write_nifti_as(vol: &Volume, path: impl AsRef<Path>, dtype: DataType) -> Result<()> {
    write_bytes(&encode(vol, dtype)?, path.as_ref())
}

/// Write a boolean mask on the grid of `like` as uint8 labels.
pub fn write_mask(like: &Volume, mask: &[bool], path: impl AsRef<Path>) -> Result<()> {
    let labels = like.with_data(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    write_nifti_as(&labels, path, DataType::Uint8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_volume() -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        Volume::from_fn([8, 8, 8], [1.0, 1.5, 2.0], |_, _, _| rng.gen())
            .unwrap()
            .with_origin([-3.0, 4.5, 10.0])
    }

    #[test]
    fn gz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&v, &p).unwrap();
            let r = read_nifti(&p).unwrap();
            assert_eq!(r.dims(), v.dims());
            assert_eq!(r.spacing(), v.spacing());
            assert_eq!(r.origin(), v.origin());
            for (a, b) in r.data().iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let raw = std::fs::read(dir.path().join("a.nii.gz")).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
    }

    #[test]
    fn gz_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume();
        write_nifti(&v, dir.path().join("a.nii.gz")).unwrap();
        write_nifti(&v, dir.path().join("b.nii.gz")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.nii.gz")).unwrap(),
            std::fs::read(dir.path().join("b.nii.gz")).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut b = encode(&random_volume(), DataType::Float32).unwrap();
        b[344..348].copy_from_slice(b"ni1\0");
        match decode(&b) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn int16_scaling_applied() {
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![3.0]).unwrap();
        let mut b = encode(&v, DataType::Int16).unwrap();
        b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        b[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        let r = decode(&b).unwrap();
        assert_eq!(r.data(), &[7.0]);
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![3.0, 200.0]).unwrap();
        let mut b = encode(&v, DataType::Uint8).unwrap();
        b[112..116].copy_from_slice(&0.0f32.to_le_bytes());
        assert_eq!(decode(&b).unwrap().data(), &[3.0, 200.0]);
    }

    #[test]
    fn unsupported_datatype_named() {
        let mut b = encode(&random_volume(), DataType::Float32).unwrap();
        b[70..72].copy_from_slice(&1536i16.to_le_bytes());
        match decode(&b) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "datatype"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_named() {
        let b = encode(&random_volume(), DataType::Float64).unwrap();
        match decode(&b[..b.len() - 1]) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "data"),
            other => panic!("unexpected {other:?}"),
        }
        match decode(&b[..100]) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "header"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn big_endian_header_is_read() {
        let v = Volume::new([2, 1, 1], [2.0, 1.0, 1.0], vec![1.5, -2.25]).unwrap();
        let le = encode(&v, DataType::Float32).unwrap();
        let mut be = le.clone();
        let swap = |b: &mut [u8], at: usize, n: usize| b[at..at + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
            swap(&mut be, 76 + 4 * i, 4);
        }
        for at in [70, 72, 252, 254] {
            swap(&mut be, at, 2);
        }
        for at in [108, 112, 116, 268, 272, 276] {
            swap(&mut be, at, 4);
        }
        for k in 0..12 {
            swap(&mut be, 280 + 4 * k, 4);
        }
        for i in 0..2 {
            swap(&mut be, VOX_OFFSET + 4 * i, 4);
        }
        let r = decode(&be).unwrap();
        assert_eq!(r.data(), v.data());
        assert_eq!(r.spacing(), v.spacing());
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume();
        let mask: Vec<bool> = v.data().iter().map(|&x| x > 0.5).collect();
        let p = dir.path().join("mask.nii.gz");
        write_mask(&v, &mask, &p).unwrap();
        let (_, back) = read_mask(&p).unwrap();
        assert_eq!(back, mask);
    }
}
