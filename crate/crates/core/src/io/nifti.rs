//! Single-file, little-endian NIfTI-1 (`n+1`) reader and writer.
//!
//! Only the subset needed for registered 3D volumes and segmentations is
//! accepted: a 348-byte header, exactly three spatial dimensions and the
//! `uint8`, `int16` and `float32` datatypes. Everything else is rejected with
//! an error naming the header field at fault.

use std::path::Path;

use crate::grid::{Dims, GridError, LabelMap, OrientationBytes, Spacing, VoxelGrid};

use super::{read_file, write_file, IoError, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE_FILE: [u8; 4] = *b"n+1\0";

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
    pub const ORIENTATION: usize = 252;
    pub const ORIENTATION_END: usize = 328;
    pub const MAGIC: usize = 344;
}

const DIM_FIELDS: [&str; 8] = [
    "dim[0]", "dim[1]", "dim[2]", "dim[3]", "dim[4]", "dim[5]", "dim[6]", "dim[7]",
];
const PIXDIM_FIELDS: [&str; 4] = ["pixdim[0]", "pixdim[1]", "pixdim[2]", "pixdim[3]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    UInt8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::UInt8),
            4 => Some(Datatype::Int16),
            16 => Some(Datatype::Float32),
            _ => None,
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::UInt8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Datatype::UInt8 => 8,
            Datatype::Int16 => 16,
            Datatype::Float32 => 32,
        }
    }

    pub fn byte_size(self) -> usize {
        self.bitpix() as usize / 8
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Datatype::Float32)
    }
}

/// The header fields the reader interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub datatype: Datatype,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub orientation: Option<OrientationBytes>,
}

impl NiftiHeader {
    /// Whether `scl_slope`/`scl_inter` change stored values.
    pub fn has_scaling(&self) -> bool {
        self.scl_slope.is_finite()
            && self.scl_slope != 0.0
            && !(self.scl_slope == 1.0 && self.scl_inter == 0.0)
    }

    fn data_len(&self) -> usize {
        self.dims.len() * self.datatype.byte_size()
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parses and validates the header at the start of `bytes`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, IoError> {
    if bytes.len() < HEADER_SIZE {
        return Err(IoError::TruncatedFile {
            field: "header",
            needed: HEADER_SIZE,
            actual: bytes.len(),
        });
    }
    let sizeof_hdr = i32_at(bytes, offsets::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(IoError::UnsupportedEndianness { field: "sizeof_hdr" });
        }
        return Err(IoError::BadHeaderSize {
            field: "sizeof_hdr",
            value: sizeof_hdr,
        });
    }
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if magic != MAGIC_SINGLE_FILE {
        return Err(IoError::BadMagic {
            field: "magic",
            found: magic,
        });
    }

    let dim: Vec<i16> = (0..8).map(|i| i16_at(bytes, offsets::DIM + 2 * i)).collect();
    if dim[0] != 3 {
        return Err(IoError::UnsupportedDimensionality {
            field: DIM_FIELDS[0],
            value: dim[0],
        });
    }
    for axis in 1..=3 {
        if dim[axis] <= 0 {
            return Err(IoError::NonPositiveDim {
                field: DIM_FIELDS[axis],
                value: dim[axis],
            });
        }
    }
    let dims = Dims([dim[1] as usize, dim[2] as usize, dim[3] as usize]);

    let code = i16_at(bytes, offsets::DATATYPE);
    let datatype = Datatype::from_code(code).ok_or(IoError::UnsupportedDatatype {
        field: "datatype",
        code,
    })?;
    let bitpix = i16_at(bytes, offsets::BITPIX);
    if bitpix != datatype.bitpix() {
        return Err(IoError::BitpixMismatch {
            field: "bitpix",
            value: bitpix,
            expected: datatype.bitpix(),
        });
    }

    let mut spacing = [0f32; 3];
    for axis in 1..=3 {
        let value = f32_at(bytes, offsets::PIXDIM + 4 * axis);
        if !(value.is_finite() && value > 0.0) {
            return Err(IoError::NonPositiveSpacing {
                field: PIXDIM_FIELDS[axis],
                value,
            });
        }
        spacing[axis - 1] = value;
    }

    let vox_offset_raw = f32_at(bytes, offsets::VOX_OFFSET);
    if !(vox_offset_raw.is_finite()
        && vox_offset_raw >= HEADER_SIZE as f32
        && vox_offset_raw.fract() == 0.0)
    {
        return Err(IoError::BadVoxOffset {
            field: "vox_offset",
            value: vox_offset_raw,
        });
    }

    let orientation_bytes: [u8; 76] = bytes[offsets::ORIENTATION..offsets::ORIENTATION_END]
        .try_into()
        .unwrap();
    let orientation = orientation_bytes
        .iter()
        .any(|&b| b != 0)
        .then_some(OrientationBytes(orientation_bytes));

    Ok(NiftiHeader {
        dims,
        spacing: Spacing(spacing),
        datatype,
        vox_offset: vox_offset_raw as usize,
        scl_slope: f32_at(bytes, offsets::SCL_SLOPE),
        scl_inter: f32_at(bytes, offsets::SCL_INTER),
        orientation,
    })
}

fn data_section<'a>(bytes: &'a [u8], header: &NiftiHeader) -> Result<&'a [u8], IoError> {
    let needed = header.vox_offset + header.data_len();
    if bytes.len() < needed {
        return Err(IoError::TruncatedFile {
            field: "data",
            needed,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[header.vox_offset..needed])
}

fn stored_values(data: &[u8], datatype: Datatype) -> Vec<f64> {
    match datatype {
        Datatype::UInt8 => data.iter().map(|&v| f64::from(v)).collect(),
        Datatype::Int16 => data
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Datatype::Float32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

fn grid_error(e: GridError) -> IoError {
    match e {
        GridError::NonFinite { index, .. } => IoError::NonFiniteValue { index },
        other => IoError::Grid(other),
    }
}

/// Decodes any supported file as a scalar grid, applying `scl_slope`/`scl_inter`.
pub fn decode_grid(bytes: &[u8]) -> Result<VoxelGrid, IoError> {
    let header = parse_header(bytes)?;
    let data = data_section(bytes, &header)?;
    let values: Vec<f32> = if header.datatype == Datatype::Float32 && !header.has_scaling() {
        // Bit-exact path: no widening round trip.
        data.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else if header.has_scaling() {
        let slope = f64::from(header.scl_slope);
        let inter = f64::from(header.scl_inter);
        stored_values(data, header.datatype)
            .into_iter()
            .map(|v| (v * slope + inter) as f32)
            .collect()
    } else {
        stored_values(data, header.datatype)
            .into_iter()
            .map(|v| v as f32)
            .collect()
    };
    VoxelGrid::new(header.dims, header.spacing, values)
        .map(|g| g.with_orientation(header.orientation))
        .map_err(grid_error)
}

/// Decodes an integer-typed, unscaled file as a label map.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap, IoError> {
    let header = parse_header(bytes)?;
    if !header.datatype.is_integer() {
        return Err(IoError::NotLabels {
            field: "datatype",
            reason: "label maps must be stored as uint8 or int16".into(),
        });
    }
    if header.has_scaling() {
        return Err(IoError::NotLabels {
            field: "scl_slope",
            reason: "label maps must not carry intensity scaling".into(),
        });
    }
    let data = data_section(bytes, &header)?;
    let labels = stored_values(data, header.datatype)
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            if v < 0.0 {
                Err(IoError::NotLabels {
                    field: "data",
                    reason: format!("negative label {v} at linear index {index}"),
                })
            } else {
                Ok(v as u16)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    LabelMap::new(header.dims, header.spacing, labels)
        .map(|m| m.with_orientation(header.orientation))
        .map_err(grid_error)
}

/// Decodes a file, returning a label map for unscaled integer data and a
/// scalar grid otherwise.
pub fn decode(bytes: &[u8]) -> Result<Volume, IoError> {
    let header = parse_header(bytes)?;
    if header.datatype.is_integer() && !header.has_scaling() {
        decode_labels(bytes).map(Volume::Labels)
    } else {
        decode_grid(bytes).map(Volume::Scalar)
    }
}

fn header_bytes(
    dims: Dims,
    spacing: Spacing,
    datatype: Datatype,
    orientation: Option<&OrientationBytes>,
) -> Vec<u8> {
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    h[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [
        3,
        dims.nx() as i16,
        dims.ny() as i16,
        dims.nz() as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        h[offsets::DIM + 2 * i..offsets::DIM + 2 * i + 2].copy_from_slice(&d.to_le_bytes());
    }
    h[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&datatype.code().to_le_bytes());
    h[offsets::BITPIX..offsets::BITPIX + 2].copy_from_slice(&datatype.bitpix().to_le_bytes());
    let pixdim = [1.0f32, spacing.0[0], spacing.0[1], spacing.0[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[offsets::PIXDIM + 4 * i..offsets::PIXDIM + 4 * i + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4]
        .copy_from_slice(&(DEFAULT_VOX_OFFSET as f32).to_le_bytes());
    h[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    h[offsets::SCL_INTER..offsets::SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    // NIFTI_UNITS_MM
    h[offsets::XYZT_UNITS] = 2;
    let descrip = b"brainvcs";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    if let Some(o) = orientation {
        h[offsets::ORIENTATION..offsets::ORIENTATION_END].copy_from_slice(&o.0);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC_SINGLE_FILE);
    h
}

fn check_header_dims(dims: Dims) -> Result<(), IoError> {
    for (axis, &n) in dims.0.iter().enumerate() {
        if n > i16::MAX as usize {
            return Err(IoError::DimTooLarge {
                field: DIM_FIELDS[axis + 1],
                value: n,
            });
        }
    }
    Ok(())
}

/// Encodes a scalar grid as float32 with unit slope and zero intercept.
pub fn encode_grid(grid: &VoxelGrid) -> Result<Vec<u8>, IoError> {
    check_header_dims(grid.dims())?;
    let mut out = header_bytes(
        grid.dims(),
        grid.spacing(),
        Datatype::Float32,
        grid.orientation(),
    );
    out.reserve(grid.data().len() * 4);
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Encodes a label map as int16.
pub fn encode_labels(seg: &LabelMap) -> Result<Vec<u8>, IoError> {
    check_header_dims(seg.dims())?;
    let mut out = header_bytes(seg.dims(), seg.spacing(), Datatype::Int16, seg.orientation());
    out.reserve(seg.labels().len() * 2);
    for (index, &label) in seg.labels().iter().enumerate() {
        let stored = i16::try_from(label).map_err(|_| {
            IoError::Grid(GridError::LabelOverflow {
                index,
                value: i64::from(label),
                max: i64::from(i16::MAX),
            })
        })?;
        out.extend_from_slice(&stored.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(volume: &Volume) -> Result<Vec<u8>, IoError> {
    match volume {
        Volume::Scalar(g) => encode_grid(g),
        Volume::Labels(l) => encode_labels(l),
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, IoError> {
    decode(&read_file(path.as_ref())?)
}

pub fn read_nifti_grid(path: impl AsRef<Path>) -> Result<VoxelGrid, IoError> {
    decode_grid(&read_file(path.as_ref())?)
}

pub fn read_nifti_labels(path: impl AsRef<Path>) -> Result<LabelMap, IoError> {
    decode_labels(&read_file(path.as_ref())?)
}

pub fn save_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_file(path.as_ref(), &encode(volume)?)
}

pub fn save_nifti_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_file(path.as_ref(), &encode_grid(grid)?)
}

pub fn save_nifti_labels(seg: &LabelMap, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_file(path.as_ref(), &encode_labels(seg)?)
}
