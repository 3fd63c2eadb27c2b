//! Minimal NIfTI-1 single-file reader/writer (`.nii`, `.nii.gz`).
//!
//! Reads int16/uint8/int32/float32/float64 scalar data, applies
//! `scl_slope`/`scl_inter`, takes spacing from `pixdim` and the origin from
//! the s-form (falling back to the q-form offset). Writes float32 volumes and
//! float64 vector fields with a diagonal s-form.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::volume::{Grid, Volume3D};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const INTENT_VECTOR: i16 = 1007;

/// Decoded image: `dims` in file order (x fastest), values as f64.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub dims: Vec<usize>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f64>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        if !self.le {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
}

fn unreadable(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnreadableVolume {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| unreadable(path, e.to_string()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| unreadable(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    if buf.len() < HEADER_SIZE {
        return Err(unreadable(path, format!("{} bytes is shorter than a header", buf.len())));
    }
    let le = match i32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) {
        348 => true,
        _ if i32::from_be_bytes(buf[0..4].try_into().expect("4 bytes")) == 348 => false,
        other => return Err(unreadable(path, format!("sizeof_hdr = {other}"))),
    };
    if &buf[344..347] != b"n+1" {
        return Err(unreadable(path, "not a single-file NIfTI-1 image"));
    }
    let c = Cursor { buf: &buf, le };
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(unreadable(path, format!("dim[0] = {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 0..ndim as usize {
        let d = c.i16(42 + 2 * i);
        if d < 1 {
            return Err(unreadable(path, format!("dim[{}] = {d}", i + 1)));
        }
        dims.push(d as usize);
    }
    let datatype = c.i16(70);
    let pix: [f64; 3] = std::array::from_fn(|i| (c.f32(80 + 4 * i) as f64).abs());
    let spacing = std::array::from_fn(|i| {
        let s = pix.get(i).copied().unwrap_or(1.0);
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let vox_offset = c.f32(108) as usize;
    let slope = c.f32(112) as f64;
    let inter = c.f32(116) as f64;
    let qform_code = c.i16(252);
    let sform_code = c.i16(254);
    let origin = if sform_code > 0 {
        [c.f32(280 + 12) as f64, c.f32(296 + 12) as f64, c.f32(312 + 12) as f64]
    } else if qform_code > 0 {
        [c.f32(268) as f64, c.f32(272) as f64, c.f32(276) as f64]
    } else {
        [0.0; 3]
    };

    let n: usize = dims.iter().product();
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(unreadable(path, format!("unsupported datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    let body = buf
        .get(start..start + n * width)
        .ok_or_else(|| unreadable(path, "truncated voxel data"))?;
    let data_c = Cursor { buf: body, le };
    let mut data: Vec<f64> = (0..n)
        .map(|i| match datatype {
            DT_UINT8 => body[i] as f64,
            DT_INT16 => data_c.i16(2 * i) as f64,
            DT_INT32 => data_c.i32(4 * i) as f64,
            DT_FLOAT32 => data_c.f32(4 * i) as f64,
            _ => f64::from_le_bytes(data_c.bytes(8 * i)),
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(unreadable(path, "non-finite voxel values"));
    }
    Ok(NiftiImage {
        dims,
        spacing,
        origin,
        data,
    })
}

fn header(dims: &[usize], spacing: [f64; 3], origin: [f64; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, 40, dims.len() as i16);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in dims.len()..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (i, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, s as f32);
    }
    for i in 3..7 {
        put_f32(&mut h, 80 + 4 * i, 1.0);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // xyzt_units: mm
    put_i16(&mut h, 254, 1); // sform_code: scanner
    for r in 0..3 {
        let mut row = [0f32; 4];
        row[r] = spacing[r] as f32;
        row[3] = origin[r] as f32;
        for (j, v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * j, *v);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
    }
    Ok(())
}

/// Loads a scalar volume as float32.
///
/// The s-form stores the origin as float32, so origins are exact only to
/// float32 precision.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    let spatial: Vec<usize> = img.dims.iter().copied().chain(std::iter::repeat(1)).take(3).collect();
    if img.dims.iter().skip(3).any(|&d| d != 1) {
        return Err(unreadable(path, format!("expected a scalar volume, got dims {:?}", img.dims)));
    }
    let grid = Grid::new([spatial[2], spatial[1], spatial[0]], img.spacing, img.origin)
        .map_err(|e| unreadable(path, e.to_string()))?;
    Volume3D::new(grid, img.data.iter().map(|&v| v as f32).collect())
        .map_err(|e| unreadable(path, e.to_string()))
}

pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let g = vol.grid();
    let mut bytes = header(&g.extent_xyz(), g.spacing, g.origin, DT_FLOAT32, 32);
    bytes.reserve(vol.len() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &bytes)
}

/// Writes a displacement field as a 4D float64 image `(x, y, z, 3)`.
pub fn save_field(field: &DisplacementField, grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let ext = grid.extent_xyz();
    let mut bytes = header(&[ext[0], ext[1], ext[2], 3], grid.spacing, grid.origin, DT_FLOAT64, 64);
    bytes[68..70].copy_from_slice(&INTENT_VECTOR.to_le_bytes());
    bytes.reserve(field.data().len() * 8);
    for v in field.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &bytes)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<(DisplacementField, Grid)> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    if img.dims.len() != 4 || img.dims[3] != 3 {
        return Err(unreadable(path, format!("expected (x, y, z, 3) field, got {:?}", img.dims)));
    }
    let grid = Grid::new([img.dims[2], img.dims[1], img.dims[0]], img.spacing, img.origin)
        .map_err(|e| unreadable(path, e.to_string()))?;
    let field = DisplacementField::new(grid.dims, img.data).map_err(|e| unreadable(path, e.to_string()))?;
    Ok((field, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_volume(seed: u64, dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Volume3D {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(dims, spacing, origin).unwrap();
        Volume3D::from_fn(grid, |_, _, _| rng.gen_range(-100.0..100.0))
    }

    #[test]
    fn round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(1, [8, 8, 8], [1.0, 1.0, 3.0], [-12.5, 4.0, 100.0]);
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back, v, "{name}");
        }
    }

    #[test]
    fn missing_file_is_unreadable() {
        let err = load_volume("/nonexistent/volume.nii").unwrap_err();
        assert!(err.to_string().starts_with("unreadable volume"));
    }

    #[test]
    fn garbage_header_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, vec![7u8; 400]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::UnreadableVolume { .. })));
    }

    #[test]
    fn reads_scaled_int16() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i16.nii");
        let mut bytes = header(&[2, 1, 1], [1.0; 3], [0.0; 3], DT_INT16, 16);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-3i16).to_le_bytes());
        bytes.extend_from_slice(&5i16.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_volume(&p).unwrap().data(), &[-5.0, 11.0]);
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new([3, 4, 5], [2.0, 1.0, 1.5], [1.0, 2.0, 3.0]).unwrap();
        let f = DisplacementField::from_fn(grid.dims, |p| [p[0] * 0.1, -p[1], 1.0 / 3.0 + p[2]]);
        let p = dir.path().join("f.nii.gz");
        save_field(&f, &grid, &p).unwrap();
        let (back, g2) = load_field(&p).unwrap();
        assert_eq!(back, f);
        assert_eq!(g2, grid);
        assert!(load_volume(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn volume_round_trip(seed in 0u64..1000, d in 1usize..6, h in 1usize..6, w in 1usize..6,
                             sx in 0.25f32..4.0, sz in 0.25f32..4.0, ox in -200.0f32..200.0) {
            let v = random_volume(seed, [d, h, w], [sx as f64, 1.0, sz as f64], [ox as f64, 0.5, -1.0]);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.nii");
            save_volume(&v, &p).unwrap();
            prop_assert_eq!(load_volume(&p).unwrap(), v);
        }
    }
}
