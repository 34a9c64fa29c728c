//! NIfTI-1 single-file volume I/O (little-endian, optional gzip).
//!
//! Supported voxel types: unsigned 8-bit, signed 16-bit, and 32/64-bit
//! floats. The grid is returned as 64-bit values with any slope/intercept
//! scaling applied. The voxel-to-world affine comes from the sform when
//! its code is positive, then the qform, then a diagonal built from the
//! voxel spacing. Header/image pairs and NIfTI-2 are rejected.

use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use std::io::{Read, Write};
use std::path::Path;

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

/// Voxel encodings this implementation reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiType {
    U8,
    I16,
    F32,
    F64,
}

impl NiftiType {
    pub const ALL: [NiftiType; 4] = [NiftiType::U8, NiftiType::I16, NiftiType::F32, NiftiType::F64];

    fn code(self) -> i16 {
        match self {
            NiftiType::U8 => 2,
            NiftiType::I16 => 4,
            NiftiType::F32 => 16,
            NiftiType::F64 => 64,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            NiftiType::U8 => 8,
            NiftiType::I16 => 16,
            NiftiType::F32 => 32,
            NiftiType::F64 => 64,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiType::U8),
            4 => Ok(NiftiType::I16),
            16 => Ok(NiftiType::F32),
            64 => Ok(NiftiType::F64),
            other => Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        }
    }
}

fn i16_at(bytes: &[u8], offset: usize) -> i16 {
    i16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn i32_at(bytes: &[u8], offset: usize) -> i32 {
    i32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn quaternion_affine(bytes: &[u8], spacing: [f64; 3]) -> [[f64; 4]; 4] {
    let b = f32_at(bytes, 256) as f64;
    let c = f32_at(bytes, 260) as f64;
    let d = f32_at(bytes, 264) as f64;
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = {
        let p0 = f32_at(bytes, 76) as f64;
        if p0 < 0.0 {
            -1.0
        } else {
            1.0
        }
    };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let scale = [spacing[0], spacing[1], qfac * spacing[2]];
    let t = [
        f32_at(bytes, 268) as f64,
        f32_at(bytes, 272) as f64,
        f32_at(bytes, 276) as f64,
    ];
    let mut affine = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            affine[i][j] = r[i][j] * scale[j];
        }
        affine[i][3] = t[i];
    }
    affine[3][3] = 1.0;
    affine
}

fn decode_values(payload: &[u8], dtype: NiftiType, n: usize) -> Result<Vec<f64>> {
    let width = dtype.bitpix() as usize / 8;
    let needed = n * width;
    if payload.len() < needed {
        return Err(Error::Truncated(format!(
            "voxel payload has {} bytes, {} voxels need {needed}",
            payload.len(),
            n
        )));
    }
    let raw = &payload[..needed];
    let values = match dtype {
        NiftiType::U8 => raw.iter().map(|&b| b as f64).collect(),
        NiftiType::I16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        NiftiType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        NiftiType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(values)
}

pub(crate) fn parse_nifti_bytes(file_bytes: &[u8]) -> Result<Volume> {
    let decompressed;
    let bytes: &[u8] = if is_gzip(file_bytes) {
        let mut out = Vec::new();
        GzDecoder::new(file_bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        decompressed = out;
        &decompressed
    } else {
        file_bytes
    };

    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "file has {} bytes, the header alone needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::Format(format!(
            "magic bytes {:?} are not {MAGIC:?} (single-file NIfTI-1)",
            &bytes[344..348]
        )));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        return Err(Error::Format(format!(
            "header size field {sizeof_hdr}, expected {HEADER_LEN} (wrong endianness or not NIfTI-1)"
        )));
    }

    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let raw = i16_at(bytes, 42 + 2 * i);
        if raw < 1 {
            return Err(Error::Format(format!("dim[{}] = {raw} must be positive", i + 1)));
        }
        *d = raw as usize;
    }
    if ndim < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::Unsupported(format!(
            "only 3-D volumes are supported, got dims {:?}",
            &dims[..ndim as usize]
        )));
    }
    let shape = [dims[0], dims[1], dims[2]];

    let dtype = NiftiType::from_code(i16_at(bytes, 70))?;
    let bitpix = i16_at(bytes, 72);
    if bitpix != dtype.bitpix() {
        return Err(Error::Format(format!(
            "bitpix {bitpix} disagrees with datatype ({} bits)",
            dtype.bitpix()
        )));
    }

    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(bytes, 76 + 4 * (i + 1)) as f64;
        if p > 0.0 {
            *s = p;
        }
    }

    let vox_offset = f32_at(bytes, 108) as usize;
    if vox_offset < HEADER_LEN || vox_offset > bytes.len() {
        return Err(Error::Truncated(format!(
            "vox_offset {vox_offset} outside the file ({} bytes)",
            bytes.len()
        )));
    }

    let n: usize = shape.iter().product();
    let mut values = decode_values(&bytes[vox_offset..], dtype, n)?;
    let slope = f32_at(bytes, 112) as f64;
    let inter = f32_at(bytes, 116) as f64;
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }

    // File order is x-fastest; the tensor stores the last axis fastest.
    let (d1, d2, d3) = (shape[0], shape[1], shape[2]);
    let mut grid = Vec::with_capacity(n);
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                grid.push(values[i + d1 * (j + d2 * k)]);
            }
        }
    }

    let sform_code = i16_at(bytes, 254);
    let qform_code = i16_at(bytes, 252);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (row, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for col in 0..4 {
                a[row][col] = f32_at(bytes, base + 4 * col) as f64;
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        quaternion_affine(bytes, spacing)
    } else {
        [
            [spacing[0], 0.0, 0.0, 0.0],
            [0.0, spacing[1], 0.0, 0.0],
            [0.0, 0.0, spacing[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    };

    Volume::new(Tensor::from_vec(&shape, grid)?, spacing, affine)
}

/// Reads a `.nii` or `.nii.gz` volume.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    parse_nifti_bytes(&bytes)
}

fn encode_value(v: f64, dtype: NiftiType, out: &mut Vec<u8>) {
    match dtype {
        NiftiType::U8 => out.push(v.round().clamp(0.0, u8::MAX as f64) as u8),
        NiftiType::I16 => out.extend_from_slice(
            &(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes(),
        ),
        NiftiType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        NiftiType::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
}

pub(crate) fn encode_nifti_bytes(v: &Volume, dtype: NiftiType) -> Vec<u8> {
    let dims = v.dims();
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; DATA_OFFSET];

    bytes[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    bytes[38] = b'r';
    bytes[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        bytes[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    for i in 3..7 {
        bytes[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    bytes[70..72].copy_from_slice(&dtype.code().to_le_bytes());
    bytes[72..74].copy_from_slice(&dtype.bitpix().to_le_bytes());
    bytes[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    for (i, &s) in v.spacing.iter().enumerate() {
        bytes[80 + 4 * i..84 + 4 * i].copy_from_slice(&(s as f32).to_le_bytes());
    }
    bytes[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    bytes[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    bytes[123] = 2; // spatial units: millimetres
    bytes[254..256].copy_from_slice(&1i16.to_le_bytes());
    for (row, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
        for col in 0..4 {
            bytes[base + 4 * col..base + 4 * col + 4]
                .copy_from_slice(&(v.affine[row][col] as f32).to_le_bytes());
        }
    }
    bytes[344..348].copy_from_slice(MAGIC);

    bytes.reserve(n * dtype.bitpix() as usize / 8);
    let data = v.grid.data();
    let (d1, d2, d3) = (dims[0], dims[1], dims[2]);
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..d1 {
                encode_value(data[(i * d2 + j) * d3 + k], dtype, &mut bytes);
            }
        }
    }
    bytes
}

/// Writes a single-file NIfTI-1 volume with the given voxel encoding;
/// `.gz` paths are gzip-compressed. Values are rounded and clamped when
/// the encoding is integral.
pub fn write_nifti_as(v: &Volume, path: &Path, dtype: NiftiType) -> Result<()> {
    let bytes = encode_nifti_bytes(v, dtype);
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let file = std::fs::File::create(path)?;
        let mut enc = GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

/// Writes with 64-bit float voxels, which round-trips any grid exactly.
pub fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    write_nifti_as(v, path, NiftiType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sample_volume(kind: NiftiType, seed: u64) -> Volume {
        let dims = [5, 4, 3];
        let n: usize = dims.iter().product();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n)
            .map(|_| match kind {
                NiftiType::U8 => rng.gen_range(0..=255) as f64,
                NiftiType::I16 => rng.gen_range(-3000..=3000) as f64,
                NiftiType::F32 => rng.gen_range(-64i32..64) as f64 * 0.25,
                NiftiType::F64 => rng.gen_range(-1.0..1.0),
            })
            .collect();
        let affine = [
            [0.0, -1.0, 0.0, 12.5],
            [1.0, 0.0, 0.0, -8.25],
            [0.0, 0.0, 2.0, 4.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Volume::new(
            Tensor::from_vec(&dims, data).unwrap(),
            [1.0, 1.0, 2.0],
            affine,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_every_datatype_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        for (i, dtype) in NiftiType::ALL.iter().enumerate() {
            for gz in [false, true] {
                let v = sample_volume(*dtype, 10 + i as u64);
                let name = format!("vol{i}{}", if gz { ".nii.gz" } else { ".nii" });
                let path = dir.path().join(name);
                write_nifti_as(&v, &path, *dtype).unwrap();
                let back = read_nifti(&path).unwrap();
                assert_eq!(back.grid.shape(), v.grid.shape());
                assert_eq!(back.grid.data(), v.grid.data(), "{dtype:?} gz={gz}");
                assert_eq!(back.spacing, v.spacing);
                assert_eq!(back.affine, v.affine);
            }
        }
    }

    #[test]
    fn gzip_output_is_actually_compressed() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::with_default_frame(Tensor::filled(&[16, 16, 16], 3.0), [1.0; 3]).unwrap();
        let plain = dir.path().join("v.nii");
        let packed = dir.path().join("v.nii.gz");
        write_nifti(&v, &plain).unwrap();
        write_nifti(&v, &packed).unwrap();
        let plain_len = std::fs::metadata(&plain).unwrap().len();
        let packed_len = std::fs::metadata(&packed).unwrap().len();
        assert!(packed_len < plain_len / 4, "{packed_len} vs {plain_len}");
        assert_eq!(read_nifti(&packed).unwrap().grid.data(), v.grid.data());
    }

    /// A byte-level fixture assembled by hand: 4x4x4 grid of 32-bit floats
    /// where voxel (i, j, k) holds i + 10j + 100k, stored x-fastest.
    fn crafted_f32_fixture() -> Vec<u8> {
        let mut bytes = vec![0u8; 352];
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        bytes[40..42].copy_from_slice(&3i16.to_le_bytes());
        for i in 0..3 {
            bytes[42 + 2 * i..44 + 2 * i].copy_from_slice(&4i16.to_le_bytes());
        }
        bytes[70..72].copy_from_slice(&16i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&32i16.to_le_bytes());
        for i in 1..4 {
            bytes[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
        }
        bytes[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        bytes[344..348].copy_from_slice(b"n+1\0");
        for k in 0..4u32 {
            for j in 0..4u32 {
                for i in 0..4u32 {
                    let value = (i + 10 * j + 100 * k) as f32;
                    bytes.extend_from_slice(&value.to_le_bytes());
                }
            }
        }
        bytes
    }

    #[test]
    fn crafted_fixture_parses_with_expected_layout() {
        let v = parse_nifti_bytes(&crafted_f32_fixture()).unwrap();
        assert_eq!(v.grid.shape(), &[4, 4, 4]);
        assert_eq!(v.spacing, [1.0, 1.0, 1.0]);
        assert_eq!(v.grid.at(&[0, 0, 0]), 0.0);
        assert_eq!(v.grid.at(&[3, 0, 0]), 3.0);
        assert_eq!(v.grid.at(&[0, 2, 0]), 20.0);
        assert_eq!(v.grid.at(&[0, 0, 1]), 100.0);
        assert_eq!(v.grid.at(&[1, 2, 3]), 321.0);
        assert_eq!(v.affine[0][0], 1.0);
        assert_eq!(v.affine[1][1], 1.0);
    }

    #[test]
    fn slope_and_intercept_are_applied() {
        let mut bytes = crafted_f32_fixture();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        let v = parse_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.grid.at(&[1, 2, 3]), 2.0 * 321.0 - 1.0);
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let mut bytes = crafted_f32_fixture();
        bytes[116..120].copy_from_slice(&5.0f32.to_le_bytes());
        let v = parse_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.grid.at(&[1, 2, 3]), 321.0);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = crafted_f32_fixture();
        bytes[344..348].copy_from_slice(b"ni1\0");
        match parse_nifti_bytes(&bytes).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = crafted_f32_fixture();
        let cut = &bytes[..352 + 10];
        match parse_nifti_bytes(cut).unwrap_err() {
            Error::Truncated(msg) => assert!(msg.contains("voxel"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_header_is_a_length_error() {
        let bytes = crafted_f32_fixture();
        assert!(matches!(
            parse_nifti_bytes(&bytes[..100]).unwrap_err(),
            Error::Truncated(_)
        ));
    }

    #[test]
    fn unsupported_datatype_is_rejected_loudly() {
        let mut bytes = crafted_f32_fixture();
        bytes[70..72].copy_from_slice(&8i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&32i16.to_le_bytes());
        match parse_nifti_bytes(&bytes).unwrap_err() {
            Error::Unsupported(msg) => assert!(msg.contains('8'), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn big_endian_header_is_diagnosed() {
        let mut bytes = crafted_f32_fixture();
        bytes[0..4].copy_from_slice(&348i32.to_be_bytes());
        match parse_nifti_bytes(&bytes).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("endian"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn four_dimensional_volume_rejected() {
        let mut bytes = crafted_f32_fixture();
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(
            parse_nifti_bytes(&bytes).unwrap_err(),
            Error::Unsupported(_)
        ));
    }

    #[test]
    fn trailing_singleton_dimensions_accepted() {
        let mut bytes = crafted_f32_fixture();
        bytes[40..42].copy_from_slice(&5i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&1i16.to_le_bytes());
        bytes[50..52].copy_from_slice(&1i16.to_le_bytes());
        let v = parse_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.grid.shape(), &[4, 4, 4]);
    }

    #[test]
    fn qform_fallback_gives_quaternion_affine() {
        let mut bytes = crafted_f32_fixture();
        bytes[252..254].copy_from_slice(&1i16.to_le_bytes());
        bytes[268..272].copy_from_slice(&7.0f32.to_le_bytes());
        bytes[272..276].copy_from_slice(&(-2.0f32).to_le_bytes());
        bytes[276..280].copy_from_slice(&3.5f32.to_le_bytes());
        let v = parse_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.affine[0][3], 7.0);
        assert_eq!(v.affine[1][3], -2.0);
        assert_eq!(v.affine[2][3], 3.5);
        assert_eq!(v.affine[0][0], 1.0);
        assert_eq!(v.affine[0][1], 0.0);
    }

    #[test]
    fn pixdim_fallback_when_no_form_codes() {
        let mut bytes = crafted_f32_fixture();
        bytes[84..88].copy_from_slice(&2.5f32.to_le_bytes());
        let v = parse_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.spacing, [1.0, 2.5, 1.0]);
        assert_eq!(v.affine[1][1], 2.5);
        assert_eq!(v.affine[0][3], 0.0);
    }

    #[test]
    fn sform_overrides_qform() {
        let mut bytes = crafted_f32_fixture();
        bytes[252..254].copy_from_slice(&1i16.to_le_bytes());
        bytes[254..256].copy_from_slice(&2i16.to_le_bytes());
        bytes[280..284].copy_from_slice(&3.0f32.to_le_bytes());
        bytes[300..304].copy_from_slice(&3.0f32.to_le_bytes());
        bytes[320..324].copy_from_slice(&3.0f32.to_le_bytes());
        let v = parse_nifti_bytes(&bytes).unwrap();
        assert_eq!(v.affine[0][0], 3.0);
    }
}
