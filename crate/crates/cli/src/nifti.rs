//! Minimal NIfTI-1 reader/writer.
//!
//! Supported subset: single-file `.nii` / `.nii.gz`, little-endian, 3-D or
//! 4-D, datatype int16 (4) or float32 (16). Anything else fails with a
//! distinct error rather than a guess. The writer always emits float32 with
//! `vox_offset` 352 and an sform affine; voxel sizes and the affine can be
//! copied from a previously read image.
//!
//! Data order follows the format: x fastest, then y, z, volume.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::errors::CliError;

const HEADER_LEN: usize = 348;
const WRITE_VOX_OFFSET: usize = 352;

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug)]
pub enum NiftiError {
    Io(String),
    Gzip(String),
    TruncatedHeader { len: usize },
    BadMagic([u8; 4]),
    /// `ni1\0`: header/data split across two files — out of scope.
    DetachedHeader,
    BigEndian,
    BadHeader(&'static str),
    UnsupportedDatatype(i16),
    UnsupportedDim(i16),
    TruncatedPayload { need: usize, have: usize },
}

impl std::fmt::Display for NiftiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NiftiError::Io(m) => write!(f, "{m}"),
            NiftiError::Gzip(m) => write!(f, "gzip: {m}"),
            NiftiError::TruncatedHeader { len } => {
                write!(f, "file too short for a NIfTI-1 header ({len} bytes)")
            }
            NiftiError::BadMagic(m) => write!(f, "not a NIfTI-1 file (magic {m:?})"),
            NiftiError::DetachedHeader => {
                write!(f, "detached header/data pairs (magic \"ni1\") are not supported")
            }
            NiftiError::BigEndian => write!(f, "big-endian NIfTI files are not supported"),
            NiftiError::BadHeader(what) => write!(f, "malformed header field: {what}"),
            NiftiError::UnsupportedDatatype(dt) => {
                write!(f, "unsupported datatype {dt} (expected int16=4 or float32=16)")
            }
            NiftiError::UnsupportedDim(d) => {
                write!(f, "unsupported dimensionality {d} (expected 3 or 4)")
            }
            NiftiError::TruncatedPayload { need, have } => {
                write!(f, "truncated payload: need {need} bytes, have {have}")
            }
        }
    }
}

impl std::error::Error for NiftiError {}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// An in-memory image: dims (3 or 4 entries), spatial voxel sizes, the sform
/// rows, and the scaled data in x-fastest order.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub dims: Vec<usize>,
    pub pixdim: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub data: Vec<f64>,
}

impl NiftiImage {
    /// New image with 1 mm isotropic voxels and an identity affine.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(dims.len() == 3 || dims.len() == 4, "dims must be 3-D or 4-D");
        assert_eq!(dims.iter().product::<usize>(), data.len());
        let srow = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        NiftiImage {
            dims,
            pixdim: [1.0; 3],
            srow,
            data,
        }
    }

    /// Carry voxel sizes and the affine over from `template` (shape need not
    /// match; only metadata is copied).
    pub fn with_geometry_of(mut self, template: &NiftiImage) -> Self {
        self.pixdim = template.pixdim;
        self.srow = template.srow;
        self
    }

    pub fn n_volumes(&self) -> usize {
        if self.dims.len() == 4 {
            self.dims[3]
        } else {
            1
        }
    }
}

fn rd_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn rd_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn rd_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

/// Read a `.nii` or `.nii.gz` file (sniffed by content, not extension).
pub fn read_volume(path: &Path) -> Result<NiftiImage, NiftiError> {
    let raw = std::fs::read(path).map_err(|e| NiftiError::Io(format!("{}: {e}", path.display())))?;
    let buf = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| NiftiError::Gzip(format!("{}: {e}", path.display())))?;
        out
    } else {
        raw
    };
    parse_nifti(&buf)
}

fn parse_nifti(buf: &[u8]) -> Result<NiftiImage, NiftiError> {
    if buf.len() < HEADER_LEN {
        return Err(NiftiError::TruncatedHeader { len: buf.len() });
    }
    let magic: [u8; 4] = [buf[344], buf[345], buf[346], buf[347]];
    match &magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(NiftiError::DetachedHeader),
        _ => return Err(NiftiError::BadMagic(magic)),
    }
    let sizeof_hdr = rd_i32(buf, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
            return Err(NiftiError::BigEndian);
        }
        return Err(NiftiError::BadHeader("sizeof_hdr"));
    }

    let ndim = rd_i16(buf, 40);
    if !(ndim == 3 || ndim == 4) {
        return Err(NiftiError::UnsupportedDim(ndim));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for k in 1..=ndim as usize {
        let d = rd_i16(buf, 40 + 2 * k);
        if d < 1 {
            return Err(NiftiError::BadHeader("dim"));
        }
        dims.push(d as usize);
    }

    let datatype = rd_i16(buf, 70);
    let bitpix = rd_i16(buf, 72);
    let bytes_per = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(NiftiError::BadHeader("bitpix"));
    }

    let vox_offset = rd_f32(buf, 108);
    if !vox_offset.is_finite() || vox_offset < HEADER_LEN as f32 {
        return Err(NiftiError::BadHeader("vox_offset"));
    }
    let off = vox_offset as usize;

    let n: usize = dims.iter().product();
    let need = n * bytes_per;
    if buf.len() < off + need {
        return Err(NiftiError::TruncatedPayload {
            need: off + need,
            have: buf.len(),
        });
    }

    let scl_slope = rd_f32(buf, 112);
    let scl_inter = rd_f32(buf, 116);
    let scale = scl_slope.is_finite() && scl_slope != 0.0;

    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_INT16 => {
            for i in 0..n {
                data.push(rd_i16(buf, off + 2 * i) as f64);
            }
        }
        _ => {
            for i in 0..n {
                data.push(rd_f32(buf, off + 4 * i) as f64);
            }
        }
    }
    if scale {
        let (s, c) = (scl_slope as f64, scl_inter as f64);
        for v in &mut data {
            *v = s * *v + c;
        }
    }

    let pixdim = [rd_f32(buf, 80), rd_f32(buf, 84), rd_f32(buf, 88)];
    let mut srow = [[0.0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = rd_f32(buf, 280 + 16 * r + 4 * c);
        }
    }
    Ok(NiftiImage {
        dims,
        pixdim,
        srow,
        data,
    })
}

fn wr_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn wr_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn wr_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Serialize as float32 with `vox_offset` 352. A `.gz` suffix selects gzip.
pub fn write_volume(img: &NiftiImage, path: &Path) -> Result<(), NiftiError> {
    assert!(img.dims.len() == 3 || img.dims.len() == 4);
    let n: usize = img.dims.iter().product();
    assert_eq!(n, img.data.len(), "dims/data length mismatch");

    let mut buf = vec![0u8; WRITE_VOX_OFFSET + 4 * n];
    wr_i32(&mut buf, 0, HEADER_LEN as i32);
    buf[39] = 0; // dim_info
    wr_i16(&mut buf, 40, img.dims.len() as i16);
    for k in 0..7 {
        let d = img.dims.get(k).copied().unwrap_or(1);
        wr_i16(&mut buf, 42 + 2 * k, d as i16);
    }
    wr_i16(&mut buf, 70, DT_FLOAT32);
    wr_i16(&mut buf, 72, 32);
    wr_f32(&mut buf, 76, 1.0); // pixdim[0] = qfac
    for k in 0..3 {
        wr_f32(&mut buf, 80 + 4 * k, img.pixdim[k]);
    }
    for k in 3..7 {
        wr_f32(&mut buf, 80 + 4 * k, 1.0);
    }
    wr_f32(&mut buf, 108, WRITE_VOX_OFFSET as f32);
    wr_f32(&mut buf, 112, 1.0); // scl_slope
    wr_f32(&mut buf, 116, 0.0); // scl_inter
    buf[123] = 10; // xyzt_units: mm | sec
    wr_i16(&mut buf, 252, 0); // qform_code
    wr_i16(&mut buf, 254, 1); // sform_code
    for (r, row) in img.srow.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            wr_f32(&mut buf, 280 + 16 * r + 4 * c, *v);
        }
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no header extensions.

    for (i, &v) in img.data.iter().enumerate() {
        wr_f32(&mut buf, WRITE_VOX_OFFSET + 4 * i, v as f32);
    }

    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let bytes = if gz {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&buf)
            .and_then(|_| enc.finish())
            .map_err(|e| NiftiError::Gzip(e.to_string()))?
    } else {
        buf
    };
    std::fs::write(path, bytes).map_err(|e| NiftiError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> tempfile::TempDir {
        tempfile::Builder::new().prefix(name).tempdir().unwrap()
    }

    #[test]
    fn four_d_round_trip_and_exact_file_size() {
        let dims = vec![8, 8, 8, 7];
        let n: usize = dims.iter().product();
        // Values exactly representable in f32 so the round trip is bitwise.
        let data: Vec<f64> = (0..n).map(|i| (i as f64) * 0.5 - 100.0).collect();
        let img = NiftiImage::new(dims.clone(), data.clone());

        let dir = tmp("nifti-rt");
        let p = dir.path().join("x.nii");
        write_volume(&img, &p).unwrap();

        let file_len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(file_len, 352 + 8 * 8 * 8 * 7 * 4);

        let back = read_volume(&p).unwrap();
        assert_eq!(back.dims, dims);
        assert_eq!(back.data, data);
    }

    #[test]
    fn gzip_round_trip() {
        let dims = vec![5, 4, 3];
        let data: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let img = NiftiImage::new(dims.clone(), data.clone());
        let dir = tmp("nifti-gz");
        let p = dir.path().join("x.nii.gz");
        write_volume(&img, &p).unwrap();

        // Must actually be gzip on disk.
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);

        let back = read_volume(&p).unwrap();
        assert_eq!(back.dims, dims);
        assert_eq!(back.data, data);
    }

    #[test]
    fn all_zero_payload_bytes_after_offset() {
        let img = NiftiImage::new(vec![3, 3, 3], vec![0.0; 27]);
        let dir = tmp("nifti-zero");
        let p = dir.path().join("z.nii");
        write_volume(&img, &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert!(raw[352..].iter().all(|&b| b == 0));
    }

    /// Hand-built int16 file: header + two voxels, scl_slope=2, scl_inter=1.
    #[test]
    fn int16_applies_slope_and_intercept() {
        let mut buf = vec![0u8; 348 + 2 * 2];
        wr_i32(&mut buf, 0, 348);
        wr_i16(&mut buf, 40, 3);
        wr_i16(&mut buf, 42, 2); // dims 2x1x1
        wr_i16(&mut buf, 44, 1);
        wr_i16(&mut buf, 46, 1);
        wr_i16(&mut buf, 70, DT_INT16);
        wr_i16(&mut buf, 72, 16);
        wr_f32(&mut buf, 108, 348.0);
        wr_f32(&mut buf, 112, 2.0);
        wr_f32(&mut buf, 116, 1.0);
        buf[344..348].copy_from_slice(b"n+1\0");
        wr_i16(&mut buf, 348, -5);
        wr_i16(&mut buf, 350, 1000);

        let img = parse_nifti(&buf).unwrap();
        assert_eq!(img.dims, vec![2, 1, 1]);
        assert_eq!(img.data, vec![2.0 * -5.0 + 1.0, 2.0 * 1000.0 + 1.0]);
    }

    #[test]
    fn distinct_errors_for_rejected_formats() {
        let img = NiftiImage::new(vec![3, 3, 3], vec![1.0; 27]);
        let dir = tmp("nifti-err");
        let p = dir.path().join("x.nii");
        write_volume(&img, &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        // Detached-header magic.
        let mut detached = good.clone();
        detached[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(parse_nifti(&detached), Err(NiftiError::DetachedHeader)));

        // Arbitrary magic.
        let mut junk = good.clone();
        junk[344..348].copy_from_slice(b"abcd");
        assert!(matches!(parse_nifti(&junk), Err(NiftiError::BadMagic(_))));

        // Big-endian sizeof_hdr with intact magic.
        let mut be = good.clone();
        be[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(parse_nifti(&be), Err(NiftiError::BigEndian)));

        // Unsupported datatype (float64 = 64).
        let mut dt = good.clone();
        wr_i16(&mut dt, 70, 64);
        assert!(matches!(
            parse_nifti(&dt),
            Err(NiftiError::UnsupportedDatatype(64))
        ));

        // 5-D image.
        let mut d5 = good.clone();
        wr_i16(&mut d5, 40, 5);
        assert!(matches!(parse_nifti(&d5), Err(NiftiError::UnsupportedDim(5))));

        // Truncated payload.
        let cut = good[..good.len() - 8].to_vec();
        assert!(matches!(
            parse_nifti(&cut),
            Err(NiftiError::TruncatedPayload { .. })
        ));

        // Truncated header.
        assert!(matches!(
            parse_nifti(&good[..100]),
            Err(NiftiError::TruncatedHeader { len: 100 })
        ));
    }

    #[test]
    fn geometry_template_is_copied() {
        let dir = tmp("nifti-geo");
        let mut a = NiftiImage::new(vec![4, 4, 4], vec![0.0; 64]);
        a.pixdim = [2.0, 2.5, 3.0];
        a.srow = [
            [2.0, 0.0, 0.0, -10.0],
            [0.0, 2.5, 0.0, -20.0],
            [0.0, 0.0, 3.0, -30.0],
        ];
        let pa = dir.path().join("a.nii");
        write_volume(&a, &pa).unwrap();
        let ra = read_volume(&pa).unwrap();
        assert_eq!(ra.pixdim, a.pixdim);
        assert_eq!(ra.srow, a.srow);

        let b = NiftiImage::new(vec![2, 2, 2], vec![1.0; 8]).with_geometry_of(&ra);
        assert_eq!(b.pixdim, a.pixdim);
        assert_eq!(b.srow, a.srow);
    }
}
