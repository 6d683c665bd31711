//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Reading accepts little- and big-endian files (detected from `sizeof_hdr`)
//! with uint8/int16/int32/float32/float64 payloads and applies
//! `scl_slope`/`scl_inter`. Writing always emits little-endian float32 with
//! identity scaling.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{voxel_count, Dims, Series4, Volume3};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Decoded contents of a `.nii` file.
#[derive(Debug, Clone, PartialEq)]
pub enum NiftiImage {
    Volume(Volume3),
    Series(Series4),
}

impl NiftiImage {
    /// The 3D volume, or an error naming the frame count for 4D files.
    pub fn into_volume(self) -> Result<Volume3> {
        match self {
            NiftiImage::Volume(v) => Ok(v),
            NiftiImage::Series(s) => Err(Error::DimMismatch(format!(
                "expected a 3D volume, found a 4D series with {} frames",
                s.nt()
            ))),
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            NiftiImage::Volume(v) => v.dims(),
            NiftiImage::Series(s) => s.dims(),
        }
    }
}

impl From<Volume3> for NiftiImage {
    fn from(v: Volume3) -> Self {
        NiftiImage::Volume(v)
    }
}

impl From<Series4> for NiftiImage {
    fn from(s: Series4) -> Self {
        NiftiImage::Series(s)
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Nifti {
        field,
        reason: reason.into(),
    }
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(bad(
            "sizeof_hdr",
            format!("file is {} bytes, shorter than a header", bytes.len()),
        ));
    }
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err(bad("sizeof_hdr", "neither byte order yields 348"))
    }
}

fn decode_with<B: ByteOrder>(bytes: &[u8]) -> Result<NiftiImage> {
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    match magic {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Unsupported(
                "two-file NIfTI (.hdr/.img, magic \"ni1\")".into(),
            ))
        }
        _ => return Err(bad("magic", format!("unrecognized magic {magic:?}"))),
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[offsets::DIM + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(bad("dim", format!("dim[0] = {ndim} is out of range")));
    }
    if ndim > 4 {
        return Err(bad("dim", format!("{ndim}-dimensional images are not supported")));
    }
    let ndim = ndim as usize;
    let mut extents = [1usize; 4];
    for i in 0..ndim {
        let d = dim[i + 1];
        if d < 1 {
            return Err(bad("dim", format!("dim[{}] = {d} must be positive", i + 1)));
        }
        extents[i] = d as usize;
    }

    let datatype = B::read_i16(&bytes[offsets::DATATYPE..]);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::Nifti {
                field: "datatype",
                reason: format!("unsupported datatype code {other}"),
            })
        }
    };
    let bitpix = B::read_i16(&bytes[offsets::BITPIX..]);
    if bitpix as usize != width * 8 {
        return Err(bad(
            "bitpix",
            format!("bitpix {bitpix} inconsistent with datatype {datatype}"),
        ));
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&bytes[offsets::PIXDIM + 4 * i..]);
    }
    let spacing = [1, 2, 3].map(|i| {
        let p = pixdim[i].abs() as f64;
        if p.is_finite() && p > 0.0 {
            p
        } else {
            1.0
        }
    });

    let vox_offset = B::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !vox_offset.is_finite() || vox_offset < VOX_OFFSET as f32 || vox_offset.fract() != 0.0 {
        return Err(bad(
            "vox_offset",
            format!("{vox_offset} is not an integer >= {VOX_OFFSET}"),
        ));
    }
    let vox_offset = vox_offset as usize;

    let mut slope = B::read_f32(&bytes[offsets::SCL_SLOPE..]) as f64;
    let mut inter = B::read_f32(&bytes[offsets::SCL_INTER..]) as f64;
    if !slope.is_finite() || !inter.is_finite() {
        return Err(bad("scl_slope", "scaling parameters are not finite"));
    }
    // A zero slope means "no scaling" in NIfTI-1.
    if slope == 0.0 {
        slope = 1.0;
        inter = 0.0;
    }

    let dims: Dims = [extents[0], extents[1], extents[2]];
    let nt = extents[3];
    let n_vox = voxel_count(dims);
    let needed = n_vox * nt * width;
    let payload = bytes
        .get(vox_offset..vox_offset + needed)
        .ok_or_else(|| {
            bad(
                "vox_offset",
                format!(
                    "payload needs {needed} bytes at offset {vox_offset}, file has {}",
                    bytes.len()
                ),
            )
        })?;

    let mut values = Vec::with_capacity(n_vox * nt);
    for chunk in payload.chunks_exact(width) {
        let raw = match datatype {
            DT_UINT8 => chunk[0] as f64,
            DT_INT16 => B::read_i16(chunk) as f64,
            DT_INT32 => B::read_i32(chunk) as f64,
            DT_FLOAT32 => B::read_f32(chunk) as f64,
            _ => B::read_f64(chunk),
        };
        let v = if slope == 1.0 && inter == 0.0 {
            raw
        } else {
            raw * slope + inter
        };
        if !v.is_finite() {
            return Err(bad("payload", format!("voxel {} is not finite", values.len())));
        }
        values.push(v);
    }

    if ndim == 4 {
        let frames = values
            .chunks_exact(n_vox)
            .map(|c| Volume3::from_raw(dims, spacing, c.to_vec()))
            .collect();
        Ok(NiftiImage::Series(Series4::new(frames)?))
    } else {
        Ok(NiftiImage::Volume(Volume3::from_raw(dims, spacing, values)))
    }
}

/// Writes a little-endian float32 `.nii` file.
pub fn save_nifti(image: &NiftiImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode(image: &NiftiImage) -> Result<Vec<u8>> {
    let (dims, spacing, frames): (Dims, [f64; 3], Vec<&Volume3>) = match image {
        NiftiImage::Volume(v) => (v.dims(), v.spacing(), vec![v]),
        NiftiImage::Series(s) => (s.dims(), s.spacing(), s.frames().iter().collect()),
    };
    if voxel_count(dims) == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot write a zero-voxel image with dims {dims:?}"
        )));
    }
    if let Some(&d) = dims.iter().find(|&&d| d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!(
            "dimension {d} exceeds the NIfTI-1 limit"
        )));
    }
    let is_series = matches!(image, NiftiImage::Series(_));
    let nt = frames.len();

    let mut h = vec![0u8; VOX_OFFSET];
    type E = LittleEndian;
    E::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let mut dim = [1i16; 8];
    dim[0] = if is_series { 4 } else { 3 };
    dim[1] = dims[0] as i16;
    dim[2] = dims[1] as i16;
    dim[3] = dims[2] as i16;
    dim[4] = if is_series { nt as i16 } else { 1 };
    for (i, d) in dim.iter().enumerate() {
        E::write_i16(&mut h[offsets::DIM + 2 * i..], *d);
    }
    E::write_i16(&mut h[offsets::DATATYPE..], DT_FLOAT32);
    E::write_i16(&mut h[offsets::BITPIX..], 32);
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut h[offsets::PIXDIM + 4 * i..], *p as f32);
    }
    E::write_f32(&mut h[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    E::write_f32(&mut h[offsets::SCL_SLOPE..], 1.0);
    E::write_f32(&mut h[offsets::SCL_INTER..], 0.0);
    // millimeters, seconds
    h[offsets::XYZT_UNITS] = 2 | 8;
    let descrip = b"pds synthetic volume";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    E::write_i16(&mut h[offsets::QFORM_CODE..], 0);
    E::write_i16(&mut h[offsets::SFORM_CODE..], 1);
    for (axis, off) in [offsets::SROW_X, offsets::SROW_Y, offsets::SROW_Z]
        .into_iter()
        .enumerate()
    {
        E::write_f32(&mut h[off + 4 * axis..], spacing[axis] as f32);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    let n_vox = voxel_count(dims);
    let mut out = h;
    out.reserve(n_vox * nt * 4);
    let mut buf = [0u8; 4];
    for frame in frames {
        for &v in frame.data() {
            E::write_f32(&mut buf, v as f32);
            out.extend_from_slice(&buf);
        }
    }
    Ok(out)
}
