//! Volume file formats.

pub mod nifti;
pub mod raw;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grid::{Dims, GridError, LabelMap, Spacing, VoxelGrid};

pub use nifti::{read_nifti, read_nifti_grid, read_nifti_labels, save_nifti};
pub use raw::{read_raw_grid, save_raw_grid, RawElement};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated file: {field} needs {needed} bytes, file has {actual}")]
    TruncatedFile {
        field: &'static str,
        needed: usize,
        actual: usize,
    },
    #[error("{field} = {value}, expected 348")]
    BadHeaderSize { field: &'static str, value: i32 },
    #[error("{field} indicates a big-endian file; only little-endian is supported")]
    UnsupportedEndianness { field: &'static str },
    #[error("{field} = {found:?}, expected single-file \"n+1\\0\"")]
    BadMagic { field: &'static str, found: [u8; 4] },
    #[error("{field} = {value}, only 3 spatial dimensions are supported")]
    UnsupportedDimensionality { field: &'static str, value: i16 },
    #[error("{field} = {value}, dimensions must be positive")]
    NonPositiveDim { field: &'static str, value: i16 },
    #[error("{field} = {value} does not fit the header's int16 dimension field")]
    DimTooLarge { field: &'static str, value: usize },
    #[error("{field} = {code} is not one of uint8 (2), int16 (4), float32 (16)")]
    UnsupportedDatatype { field: &'static str, code: i16 },
    #[error("{field} = {value}, datatype requires {expected}")]
    BitpixMismatch {
        field: &'static str,
        value: i16,
        expected: i16,
    },
    #[error("{field} = {value}, voxel sizes must be finite and positive")]
    NonPositiveSpacing { field: &'static str, value: f32 },
    #[error("{field} = {value} is not a valid data offset")]
    BadVoxOffset { field: &'static str, value: f32 },
    #[error("non-finite voxel value at linear index {index}")]
    NonFiniteValue { index: usize },
    #[error("{field}: not a label map ({reason})")]
    NotLabels { field: &'static str, reason: String },
    #[error("raw grid size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// A decoded volume: either intensities or region labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(VoxelGrid),
    Labels(LabelMap),
}

impl Volume {
    pub fn dims(&self) -> Dims {
        match self {
            Volume::Scalar(g) => g.dims(),
            Volume::Labels(l) => l.dims(),
        }
    }

    pub fn spacing(&self) -> Spacing {
        match self {
            Volume::Scalar(g) => g.spacing(),
            Volume::Labels(l) => l.spacing(),
        }
    }

    pub fn into_scalar(self) -> Option<VoxelGrid> {
        match self {
            Volume::Scalar(g) => Some(g),
            Volume::Labels(_) => None,
        }
    }

    pub fn into_labels(self) -> Option<LabelMap> {
        match self {
            Volume::Labels(l) => Some(l),
            Volume::Scalar(_) => None,
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    write_atomic(path, bytes).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}
