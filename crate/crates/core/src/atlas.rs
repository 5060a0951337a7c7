//! Region-wise saliency aggregation over a segmentation.
//!
//! A saliency volume is overlapped with a label map: each region receives the
//! mean absolute saliency of its voxels (`S_n`), and region volumes come from
//! voxel counts scaled by the physical voxel size. Background (label 0) never
//! contributes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::class::Class;
use crate::grid::{Dims, LabelMap, VoxelGrid};
use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("saliency dims {saliency:?} do not match segmentation dims {seg:?}")]
    DimsMismatch { saliency: Dims, seg: Dims },
    #[error("no patients of class {0} in the cohort")]
    EmptyClass(Class),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// How voxel gradients contribute to a region value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMode {
    /// `|g|` per voxel (the default saliency convention).
    #[default]
    Absolute,
    /// Raw signed gradient.
    Signed,
}

/// Per-region normalized saliency `S_n` for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSaliency {
    pub patient_id: String,
    pub values: BTreeMap<u16, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionVolumes {
    /// mm³ per region.
    pub values: BTreeMap<u16, f64>,
    pub voxel_counts: BTreeMap<u16, u64>,
}

pub fn region_volumes(seg: &LabelMap) -> RegionVolumes {
    let mut voxel_counts: BTreeMap<u16, u64> = BTreeMap::new();
    for &label in seg.labels() {
        if label != 0 {
            *voxel_counts.entry(label).or_default() += 1;
        }
    }
    let voxel = seg.spacing().voxel_volume();
    let values = voxel_counts
        .iter()
        .map(|(&id, &count)| (id, count as f64 * voxel))
        .collect();
    RegionVolumes {
        values,
        voxel_counts,
    }
}

pub fn aggregate_saliency(
    patient_id: impl Into<String>,
    saliency: &VoxelGrid,
    seg: &LabelMap,
    mode: SaliencyMode,
) -> Result<RegionSaliency, AtlasError> {
    if saliency.dims() != seg.dims() {
        return Err(AtlasError::DimsMismatch {
            saliency: saliency.dims(),
            seg: seg.dims(),
        });
    }
    let mut sums: BTreeMap<u16, (f64, u64)> = BTreeMap::new();
    for (&g, &label) in saliency.data().iter().zip(seg.labels()) {
        if label == 0 {
            continue;
        }
        let v = f64::from(g);
        let contribution = match mode {
            SaliencyMode::Absolute => v.abs(),
            SaliencyMode::Signed => v,
        };
        let entry = sums.entry(label).or_default();
        entry.0 += contribution;
        entry.1 += 1;
    }
    let values = sums
        .into_iter()
        .map(|(id, (sum, count))| (id, sum / count as f64))
        .collect();
    Ok(RegionSaliency {
        patient_id: patient_id.into(),
        values,
    })
}

/// Per-class mean region saliency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub means: BTreeMap<Class, BTreeMap<u16, f64>>,
    pub patients: BTreeMap<Class, usize>,
    /// Number of (patient, region) cells filled with 0 because the region
    /// was missing for that patient.
    pub substituted_zeros: BTreeMap<Class, usize>,
}

/// Averages region saliency per class over the union of regions seen anywhere
/// in the cohort; a region absent for a patient contributes 0 for them.
pub fn group_distribution(
    cohort: &[(RegionSaliency, Class)],
    classes: &[Class],
) -> Result<GroupDistribution, AtlasError> {
    let regions: BTreeSet<u16> = cohort
        .iter()
        .flat_map(|(s, _)| s.values.keys().copied())
        .collect();
    let mut dist = GroupDistribution {
        means: BTreeMap::new(),
        patients: BTreeMap::new(),
        substituted_zeros: BTreeMap::new(),
    };
    for &class in classes {
        let members: Vec<&RegionSaliency> = cohort
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(s, _)| s)
            .collect();
        if members.is_empty() {
            return Err(AtlasError::EmptyClass(class));
        }
        let mut substituted = 0;
        let mut means = BTreeMap::new();
        for &region in &regions {
            let mut sum = 0.0;
            for s in &members {
                match s.values.get(&region) {
                    Some(v) => sum += v,
                    None => substituted += 1,
                }
            }
            means.insert(region, sum / members.len() as f64);
        }
        dist.means.insert(class, means);
        dist.patients.insert(class, members.len());
        dist.substituted_zeros.insert(class, substituted);
    }
    Ok(dist)
}

/// One row of the region CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub patient_id: String,
    pub region_id: u16,
    pub s: f64,
    pub voxel_count: u64,
    pub volume_mm3: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_name: Option<String>,
}

/// Joins saliency with volumes into CSV rows; `names` is an optional
/// pass-through id→name table.
pub fn region_rows(
    saliency: &RegionSaliency,
    volumes: &RegionVolumes,
    names: Option<&BTreeMap<u16, String>>,
) -> Vec<RegionRow> {
    saliency
        .values
        .iter()
        .map(|(&id, &s)| RegionRow {
            patient_id: saliency.patient_id.clone(),
            region_id: id,
            s,
            voxel_count: volumes.voxel_counts.get(&id).copied().unwrap_or(0),
            volume_mm3: volumes.values.get(&id).copied().unwrap_or(0.0),
            region_name: names.and_then(|n| n.get(&id).cloned()),
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AtlasError + '_ {
    move |source| AtlasError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_region_csv(rows: &[RegionRow], path: &Path) -> Result<(), AtlasError> {
    let with_names = rows.iter().any(|r| r.region_name.is_some());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if with_names {
        w.write_record(["patient_id", "region_id", "s", "voxel_count", "volume_mm3", "region_name"])?;
    } else {
        w.write_record(["patient_id", "region_id", "s", "voxel_count", "volume_mm3"])?;
    }
    for r in rows {
        let mut record = vec![
            r.patient_id.clone(),
            r.region_id.to_string(),
            r.s.to_string(),
            r.voxel_count.to_string(),
            r.volume_mm3.to_string(),
        ];
        if with_names {
            record.push(r.region_name.clone().unwrap_or_default());
        }
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error()).map_err(io_err(path))?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Reads a region CSV back into per-patient saliency maps, in file order of
/// first appearance.
pub fn read_region_csv(path: &Path) -> Result<Vec<RegionSaliency>, AtlasError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: BTreeMap<String, BTreeMap<u16, f64>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<RegionRow>().enumerate() {
        let row = row?;
        if !row.s.is_finite() {
            return Err(AtlasError::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: format!("non-finite saliency {}", row.s),
            });
        }
        let entry = by_patient.entry(row.patient_id.clone()).or_insert_with(|| {
            order.push(row.patient_id.clone());
            BTreeMap::new()
        });
        if entry.insert(row.region_id, row.s).is_some() {
            return Err(AtlasError::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: format!(
                    "duplicate region {} for patient {}",
                    row.region_id, row.patient_id
                ),
            });
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let values = by_patient.remove(&id).unwrap_or_default();
            RegionSaliency {
                patient_id: id,
                values,
            }
        })
        .collect())
}

pub fn write_distribution_csv(dist: &GroupDistribution, path: &Path) -> Result<(), AtlasError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["class", "region_id", "mean_s"])?;
    for (class, means) in &dist.means {
        for (region, mean) in means {
            w.write_record([class.as_str(), &region.to_string(), &mean.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error()).map_err(io_err(path))?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;

    fn seg(dims: [usize; 3], spacing: [f32; 3], labels: Vec<u16>) -> LabelMap {
        LabelMap::new(
            Dims::new(dims[0], dims[1], dims[2]).unwrap(),
            Spacing::new(spacing[0], spacing[1], spacing[2]).unwrap(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn uniform_region_volume() {
        let v = region_volumes(&seg([2, 2, 2], [1.0, 1.0, 1.0], vec![7; 8]));
        assert_eq!(v.values, BTreeMap::from([(7, 8.0)]));
        assert_eq!(v.voxel_counts, BTreeMap::from([(7, 8)]));
    }

    #[test]
    fn anisotropic_volumes() {
        let labels = vec![1, 1, 1, 2, 2, 2, 2, 2];
        let v = region_volumes(&seg([8, 1, 1], [2.0, 1.0, 1.0], labels));
        assert_eq!(v.values, BTreeMap::from([(1, 6.0), (2, 10.0)]));
    }

    #[test]
    fn empty_segmentation_has_no_regions() {
        let v = region_volumes(&seg([2, 1, 1], [1.0, 1.0, 1.0], vec![0, 0]));
        assert!(v.values.is_empty());
    }

    #[test]
    fn mean_of_ones() {
        let s = seg([2, 2, 2], [1.0, 1.0, 1.0], vec![3; 8]);
        let g = VoxelGrid::filled(s.dims(), s.spacing(), 1.0).unwrap();
        let r = aggregate_saliency("p", &g, &s, SaliencyMode::Absolute).unwrap();
        assert_eq!(r.values, BTreeMap::from([(3, 1.0)]));
    }

    #[test]
    fn absolute_value_then_mean() {
        let s = seg([6, 1, 1], [1.0, 1.0, 1.0], vec![1, 1, 2, 2, 2, 2]);
        let g = VoxelGrid::new(s.dims(), s.spacing(), vec![0.5, -0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = aggregate_saliency("p", &g, &s, SaliencyMode::Absolute).unwrap();
        assert_eq!(r.values, BTreeMap::from([(1, 0.5), (2, 0.0)]));
        let signed = aggregate_saliency("p", &g, &s, SaliencyMode::Signed).unwrap();
        assert_eq!(signed.values[&1], 0.0);
    }

    #[test]
    fn dims_must_match() {
        let s = seg([2, 1, 1], [1.0, 1.0, 1.0], vec![1, 1]);
        let g = VoxelGrid::filled(Dims::new(1, 2, 1).unwrap(), s.spacing(), 1.0).unwrap();
        assert!(matches!(
            aggregate_saliency("p", &g, &s, SaliencyMode::Absolute),
            Err(AtlasError::DimsMismatch { .. })
        ));
    }

    fn rs(id: &str, values: &[(u16, f64)]) -> RegionSaliency {
        RegionSaliency {
            patient_id: id.into(),
            values: values.iter().copied().collect(),
        }
    }

    #[test]
    fn single_patient_distribution_is_identity() {
        let a = rs("a", &[(1, 0.3), (2, 0.1)]);
        let n = rs("n", &[(1, 0.2), (2, 0.4)]);
        let d = group_distribution(
            &[(a.clone(), Class::Ad), (n.clone(), Class::Nc)],
            &[Class::Ad, Class::Nc],
        )
        .unwrap();
        assert_eq!(d.means[&Class::Ad], a.values);
        assert_eq!(d.means[&Class::Nc], n.values);
        assert_eq!(d.substituted_zeros[&Class::Ad], 0);
    }

    #[test]
    fn class_mean_and_substitution() {
        let hippocampus = 17;
        let cohort = vec![
            (rs("a1", &[(hippocampus, 0.2), (4, 1.0)]), Class::Ad),
            (rs("a2", &[(hippocampus, 0.4)]), Class::Ad),
        ];
        let d = group_distribution(&cohort, &[Class::Ad]).unwrap();
        assert!((d.means[&Class::Ad][&hippocampus] - 0.3).abs() < 1e-15);
        assert_eq!(d.means[&Class::Ad][&4], 0.5);
        assert_eq!(d.substituted_zeros[&Class::Ad], 1);
        assert!(matches!(
            group_distribution(&cohort, &[Class::Nc]),
            Err(AtlasError::EmptyClass(Class::Nc))
        ));
    }

    #[test]
    fn region_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regions.csv");
        let s = rs("p1", &[(1, 0.1 + 0.2), (5, 1e-17)]);
        let volumes = RegionVolumes {
            values: BTreeMap::from([(1, 3.0), (5, 4.5)]),
            voxel_counts: BTreeMap::from([(1, 3), (5, 4)]),
        };
        write_region_csv(&region_rows(&s, &volumes, None), &path).unwrap();
        assert_eq!(read_region_csv(&path).unwrap(), vec![s]);
    }
}
