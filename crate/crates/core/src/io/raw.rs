//! Headerless little-endian grids; dims and spacing travel out of band.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::{Dims, LabelMap, Spacing, VoxelGrid};

use super::{read_file, write_file, IoError, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawElement {
    F32,
    U16,
}

impl RawElement {
    pub fn byte_size(self) -> usize {
        match self {
            RawElement::F32 => 4,
            RawElement::U16 => 2,
        }
    }
}

pub fn decode_raw(
    bytes: &[u8],
    dims: Dims,
    spacing: Spacing,
    element: RawElement,
) -> Result<Volume, IoError> {
    dims.validate()?;
    let expected = dims.len() * element.byte_size();
    if bytes.len() != expected {
        return Err(IoError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(match element {
        RawElement::F32 => {
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Volume::Scalar(VoxelGrid::new(dims, spacing, data)?)
        }
        RawElement::U16 => {
            let labels = bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            Volume::Labels(LabelMap::new(dims, spacing, labels)?)
        }
    })
}

pub fn encode_raw(volume: &Volume) -> Vec<u8> {
    match volume {
        Volume::Scalar(g) => g.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Volume::Labels(l) => l.labels().iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

pub fn read_raw_grid(
    path: impl AsRef<Path>,
    dims: Dims,
    spacing: Spacing,
    element: RawElement,
) -> Result<Volume, IoError> {
    decode_raw(&read_file(path.as_ref())?, dims, spacing, element)
}

pub fn save_raw_grid(volume: &Volume, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_file(path.as_ref(), &encode_raw(volume))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bytes_make_two_floats() {
        let dims = Dims::new(2, 1, 1).unwrap();
        let mut bytes = 1.5f32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let v = decode_raw(&bytes, dims, Spacing::default(), RawElement::F32).unwrap();
        let Volume::Scalar(g) = v else { panic!("expected scalar grid") };
        assert_eq!(g.data(), &[1.5, -2.0]);
    }

    #[test]
    fn seven_bytes_is_a_size_mismatch() {
        let dims = Dims::new(2, 1, 1).unwrap();
        let err = decode_raw(&[0u8; 7], dims, Spacing::default(), RawElement::F32).unwrap_err();
        assert!(matches!(err, IoError::SizeMismatch { expected: 8, actual: 7 }));
    }

    #[test]
    fn labels_round_trip() {
        let dims = Dims::new(3, 1, 1).unwrap();
        let seg = LabelMap::new(dims, Spacing::default(), vec![0, 65535, 12]).unwrap();
        let vol = Volume::Labels(seg);
        let back = decode_raw(&encode_raw(&vol), dims, Spacing::default(), RawElement::U16).unwrap();
        assert_eq!(back, vol);
    }
}
