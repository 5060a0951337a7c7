//! Dense 3D scalar volumes and label maps.
//!
//! Both types store voxels in x-fastest linear order: the voxel at
//! `(x, y, z)` lives at `x + nx * (y + ny * z)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("dimension {axis} must be positive, got {value}")]
    NonPositiveDim { axis: char, value: usize },
    #[error("spacing along {axis} must be finite and > 0, got {value}")]
    BadSpacing { axis: char, value: f32 },
    #[error("data length {actual} does not match dims {dims:?} ({expected} voxels)")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("non-finite voxel value {value} at linear index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("label {value} at linear index {index} exceeds the representable range (max {max})")]
    LabelOverflow { index: usize, value: i64, max: i64 },
}

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, GridError> {
        let dims = Dims([nx, ny, nz]);
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (axis, &value) in ['x', 'y', 'z'].iter().zip(self.0.iter()) {
            if value == 0 {
                return Err(GridError::NonPositiveDim { axis: *axis, value });
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.0[0];
        let rest = index / self.0[0];
        (x, rest % self.0[1], rest / self.0[1])
    }
}

/// Millimetres per voxel along x, y and z.
///
/// Stored as `f32` so that the on-disk pixel sizes survive a save/read cycle
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f32; 3]);

impl Spacing {
    pub const ISOTROPIC_MM: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(sx: f32, sy: f32, sz: f32) -> Result<Self, GridError> {
        let spacing = Spacing([sx, sy, sz]);
        spacing.validate()?;
        Ok(spacing)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (axis, &value) in ['x', 'y', 'z'].iter().zip(self.0.iter()) {
            if !(value.is_finite() && value > 0.0) {
                return Err(GridError::BadSpacing { axis: *axis, value });
            }
        }
        Ok(())
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.0.iter().map(|&s| f64::from(s)).product()
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::ISOTROPIC_MM
    }
}

/// Orientation-related NIfTI header bytes (qform/sform codes, quaternion,
/// offsets and the affine rows), carried through unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrientationBytes(pub [u8; 76]);

/// A dense 3D field of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
    orientation: Option<OrientationBytes>,
}

impl VoxelGrid {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self, GridError> {
        dims.validate()?;
        spacing.validate()?;
        if data.len() != dims.len() {
            return Err(GridError::LengthMismatch {
                dims: dims.0,
                expected: dims.len(),
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite { index, value });
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            data,
            orientation: None,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self, GridError> {
        VoxelGrid::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn orientation(&self) -> Option<&OrientationBytes> {
        self.orientation.as_ref()
    }

    pub fn with_orientation(mut self, orientation: Option<OrientationBytes>) -> Self {
        self.orientation = orientation;
        self
    }

    /// Bitwise equality of dims, spacing and every voxel.
    pub fn bit_eq(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self.spacing.0.map(f32::to_bits) == other.spacing.0.map(f32::to_bits)
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A dense 3D field of region ids; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u16>,
    region_ids: Vec<u16>,
    orientation: Option<OrientationBytes>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u16>) -> Result<Self, GridError> {
        dims.validate()?;
        spacing.validate()?;
        if labels.len() != dims.len() {
            return Err(GridError::LengthMismatch {
                dims: dims.0,
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        let region_ids = labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(LabelMap {
            dims,
            spacing,
            labels,
            region_ids,
            orientation: None,
        })
    }

    /// Builds a map from wider integer labels, rejecting anything outside `0..=u16::MAX`.
    pub fn from_wide(dims: Dims, spacing: Spacing, labels: &[i64]) -> Result<Self, GridError> {
        let narrow = labels
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                u16::try_from(value).map_err(|_| GridError::LabelOverflow {
                    index,
                    value,
                    max: i64::from(u16::MAX),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        LabelMap::new(dims, spacing, narrow)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Sorted distinct nonzero labels.
    pub fn region_ids(&self) -> &[u16] {
        &self.region_ids
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn orientation(&self) -> Option<&OrientationBytes> {
        self.orientation.as_ref()
    }

    pub fn with_orientation(mut self, orientation: Option<OrientationBytes>) -> Self {
        self.orientation = orientation;
        self
    }
}
