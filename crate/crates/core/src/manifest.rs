//! Cohort manifest: one CSV row per patient visit, pointing at an intensity
//! image and a label map. Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::class::Class;
use crate::grid::{Dims, LabelMap, Spacing, VoxelGrid};
use crate::io::{self, read_raw_grid, save_raw_grid, write_atomic, IoError, RawElement, Volume};
use crate::synth::{render_image, render_labels, split_indices, Cohort, SynthError};
use crate::vcs::{write_volumes_csv, VcsError};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const VOLUMES_FILE: &str = "volumes.csv";
pub const PLANTED_FILE: &str = "planted_atrophy.csv";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: field `{field}`: {reason}")]
    Invalid {
        path: String,
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("{path}: manifest has no rows")]
    Empty { path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Volume {
        path: String,
        #[source]
        source: IoError,
    },
    #[error("{path}: {what} has dims {found:?}, manifest says {expected:?}")]
    DimsMismatch {
        path: String,
        what: &'static str,
        found: [usize; 3],
        expected: [usize; 3],
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Vcs(#[from] VcsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train or test")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// On-disk volume encoding, chosen by file extension on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    #[default]
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Nifti => "nii",
            VolumeFormat::Raw => "raw",
        }
    }

    fn of_path(path: &str) -> Option<VolumeFormat> {
        match Path::new(path).extension()?.to_str()? {
            "nii" => Some(VolumeFormat::Nifti),
            "raw" => Some(VolumeFormat::Raw),
            _ => None,
        }
    }
}

impl FromStr for VolumeFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nifti" | "nii" => Ok(VolumeFormat::Nifti),
            "raw" => Ok(VolumeFormat::Raw),
            other => Err(format!("unknown format {other:?}, expected nifti or raw")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub class: Class,
    pub split: Split,
    pub timepoint: u32,
    pub image: String,
    pub labelmap: String,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub sx: f32,
    pub sy: f32,
    pub sz: f32,
}

impl ManifestRow {
    pub fn dims(&self) -> Dims {
        Dims([self.nx, self.ny, self.nz])
    }

    pub fn spacing(&self) -> Spacing {
        Spacing([self.sx, self.sy, self.sz])
    }
}

/// Validated manifest. Invariants: at least one row; unique
/// `(patient_id, timepoint)`; one class and split per patient; positive dims
/// and spacing; every referenced file exists with a known extension.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest, ManifestError> {
        let shown = path.display().to_string();
        let csv_err = |source| ManifestError::Csv {
            path: shown.clone(),
            source,
        };
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = reader
            .deserialize::<ManifestRow>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(csv_err)?;
        let root = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
            _ => PathBuf::from("."),
        };
        let m = Manifest { root, rows };
        m.validate(&shown)?;
        Ok(m)
    }

    fn validate(&self, shown: &str) -> Result<(), ManifestError> {
        if self.rows.is_empty() {
            return Err(ManifestError::Empty { path: shown.into() });
        }
        let invalid = |line: usize, field, reason: String| ManifestError::Invalid {
            path: shown.into(),
            line: line + 2,
            field,
            reason,
        };
        let mut visits = BTreeSet::new();
        let mut patients: BTreeMap<&str, (Class, Split)> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            if r.patient_id.is_empty() {
                return Err(invalid(i, "patient_id", "empty".into()));
            }
            if r.dims().validate().is_err() {
                return Err(invalid(i, "nx/ny/nz", format!("{:?} must be positive", r.dims().0)));
            }
            if r.spacing().validate().is_err() {
                return Err(invalid(i, "sx/sy/sz", format!("{:?} must be finite and positive", r.spacing().0)));
            }
            if !visits.insert((r.patient_id.as_str(), r.timepoint)) {
                return Err(invalid(i, "timepoint", format!("duplicate visit {} of {}", r.timepoint, r.patient_id)));
            }
            match patients.insert(&r.patient_id, (r.class, r.split)) {
                Some(prev) if prev != (r.class, r.split) => {
                    return Err(invalid(i, "class/split", format!("{} changes class or split between rows", r.patient_id)))
                }
                _ => {}
            }
            for (field, rel) in [("image", &r.image), ("labelmap", &r.labelmap)] {
                if VolumeFormat::of_path(rel).is_none() {
                    return Err(invalid(i, field, format!("{rel:?} has no .nii or .raw extension")));
                }
                if !self.resolve(rel).is_file() {
                    return Err(invalid(i, field, format!("{rel:?} does not exist")));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Baseline (earliest) visit of every patient, in order of first
    /// appearance, optionally restricted to one split.
    pub fn baseline(&self, split: Option<Split>) -> Vec<&ManifestRow> {
        let mut first: BTreeMap<&str, &ManifestRow> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &self.rows {
            if split.is_some_and(|s| s != r.split) {
                continue;
            }
            match first.get(r.patient_id.as_str()) {
                Some(prev) if prev.timepoint <= r.timepoint => {}
                Some(_) => {
                    first.insert(&r.patient_id, r);
                }
                None => {
                    order.push(r.patient_id.as_str());
                    first.insert(&r.patient_id, r);
                }
            }
        }
        order.into_iter().map(|id| first[id]).collect()
    }

    fn load(&self, rel: &str, row: &ManifestRow, element: RawElement) -> Result<Volume, ManifestError> {
        let path = self.resolve(rel);
        let volume = match VolumeFormat::of_path(rel) {
            Some(VolumeFormat::Raw) => read_raw_grid(&path, row.dims(), row.spacing(), element),
            _ => io::read_nifti(&path),
        }
        .map_err(|source| ManifestError::Volume {
            path: path.display().to_string(),
            source,
        })?;
        if volume.dims() != row.dims() {
            return Err(ManifestError::DimsMismatch {
                path: path.display().to_string(),
                what: if element == RawElement::F32 { "image" } else { "labelmap" },
                found: volume.dims().0,
                expected: row.dims().0,
            });
        }
        Ok(volume)
    }

    pub fn load_image(&self, row: &ManifestRow) -> Result<VoxelGrid, ManifestError> {
        match self.load(&row.image, row, RawElement::F32)? {
            Volume::Scalar(g) => Ok(g),
            Volume::Labels(l) => Ok(VoxelGrid::new(
                l.dims(),
                l.spacing(),
                l.labels().iter().map(|&v| f32::from(v)).collect(),
            )
            .expect("label dims are valid")),
        }
    }

    pub fn load_labels(&self, row: &ManifestRow) -> Result<LabelMap, ManifestError> {
        let path = self.resolve(&row.labelmap);
        self.load(&row.labelmap, row, RawElement::U16)?
            .into_labels()
            .ok_or_else(|| ManifestError::Volume {
                path: path.display().to_string(),
                source: IoError::NotLabels {
                    field: "datatype",
                    reason: "stored as float32".into(),
                },
            })
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }
}

/// Planted per-patient atrophy rates; the ground truth for oracle saliency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRow {
    pub patient_id: String,
    pub region_id: u16,
    pub rate: f64,
}

pub fn read_planted_csv(path: &Path) -> Result<BTreeMap<String, BTreeMap<u16, f64>>, ManifestError> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| ManifestError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    let mut out: BTreeMap<String, BTreeMap<u16, f64>> = BTreeMap::new();
    for row in reader.deserialize::<PlantedRow>() {
        let row = row.map_err(|source| ManifestError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        out.entry(row.patient_id).or_default().insert(row.region_id, row.rate);
    }
    Ok(out)
}

/// Map that is 1 inside every region with a positive planted rate and 0
/// elsewhere.
pub fn oracle_map(seg: &LabelMap, rates: &BTreeMap<u16, f64>) -> VoxelGrid {
    let data = seg
        .labels()
        .iter()
        .map(|l| if rates.get(l).is_some_and(|&r| r > 0.0) { 1.0 } else { 0.0 })
        .collect();
    VoxelGrid::new(seg.dims(), seg.spacing(), data).expect("label dims are valid")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    write_atomic(path, bytes).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn save_volume(volume: &Volume, path: &Path, format: VolumeFormat) -> Result<(), ManifestError> {
    match format {
        VolumeFormat::Nifti => io::save_nifti(volume, path),
        VolumeFormat::Raw => save_raw_grid(volume, path),
    }
    .map_err(|source| ManifestError::Volume {
        path: path.display().to_string(),
        source,
    })
}

/// Writes every visit of every patient under `dir` (`images/`, `labels/`),
/// plus the manifest, the longitudinal-volumes CSV and the planted rates.
/// The last `test_per_class` patients of each class form the test split.
pub fn write_cohort(
    cohort: &Cohort,
    dir: &Path,
    test_per_class: usize,
    format: VolumeFormat,
) -> Result<Manifest, ManifestError> {
    let spec = &cohort.spec;
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|source| ManifestError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    let (_, test) = split_indices(cohort, test_per_class);
    let test: BTreeSet<usize> = test.into_iter().collect();
    let ext = format.extension();
    let mut rows = Vec::new();
    for p in &cohort.patients {
        let split = if test.contains(&p.index) { Split::Test } else { Split::Train };
        for t in 0..spec.timepoints {
            let image = format!("images/{}_t{t}.{ext}", p.id);
            let labelmap = format!("labels/{}_t{t}.{ext}", p.id);
            save_volume(&Volume::Scalar(render_image(spec, p, t)?), &dir.join(&image), format)?;
            save_volume(&Volume::Labels(render_labels(spec, p, t)?), &dir.join(&labelmap), format)?;
            rows.push(ManifestRow {
                patient_id: p.id.clone(),
                class: p.class,
                split,
                timepoint: t,
                image,
                labelmap,
                nx: spec.dims.nx(),
                ny: spec.dims.ny(),
                nz: spec.dims.nz(),
                sx: spec.spacing.0[0],
                sy: spec.spacing.0[1],
                sz: spec.spacing.0[2],
            });
        }
    }
    let manifest = Manifest {
        root: dir.to_owned(),
        rows,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = manifest.to_csv_bytes().map_err(|source| ManifestError::Csv {
        path: manifest_path.display().to_string(),
        source,
    })?;
    write_bytes(&manifest_path, &bytes)?;

    let records = cohort
        .patients
        .iter()
        .map(|p| p.longitudinal())
        .collect::<Result<Vec<_>, _>>()?;
    write_volumes_csv(&records, &dir.join(VOLUMES_FILE))?;

    let planted_path = dir.join(PLANTED_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &cohort.patients {
        for r in &p.regions {
            w.serialize(PlantedRow {
                patient_id: p.id.clone(),
                region_id: r.id,
                rate: r.rate,
            })
            .map_err(|source| ManifestError::Csv {
                path: planted_path.display().to_string(),
                source,
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| ManifestError::Io {
        path: planted_path.display().to_string(),
        source: e.into_error(),
    })?;
    write_bytes(&planted_path, &bytes)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, PhantomSpec};

    fn cohort() -> Cohort {
        let spec = PhantomSpec::with_regions(Dims([12, 12, 12]), 4, 5);
        generate_cohort(&spec, 2, 2).unwrap()
    }

    #[test]
    fn written_cohort_reads_back_in_both_formats() {
        let c = cohort();
        for format in [VolumeFormat::Nifti, VolumeFormat::Raw] {
            let dir = tempfile::tempdir().unwrap();
            let written = write_cohort(&c, dir.path(), 1, format).unwrap();
            let m = Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
            assert_eq!(m.rows, written.rows);
            assert_eq!(m.rows.len(), 4 * c.spec.timepoints as usize);
            let base = m.baseline(Some(Split::Test));
            assert_eq!(base.len(), 2);
            assert!(base.iter().all(|r| r.timepoint == 0));
            let p = c.patients.iter().find(|q| q.id == base[0].patient_id).unwrap();
            let img = m.load_image(base[0]).unwrap();
            assert!(img.bit_eq(&render_image(&c.spec, p, 0).unwrap()));
            assert_eq!(m.load_labels(base[0]).unwrap(), render_labels(&c.spec, p, 0).unwrap());
        }
    }

    #[test]
    fn validation_names_the_field() {
        let c = cohort();
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_cohort(&c, dir.path(), 1, VolumeFormat::Nifti).unwrap();
        m.rows[1].class = m.rows[1].class.adverse();
        let path = dir.path().join("bad.csv");
        fs::write(&path, m.to_csv_bytes().unwrap()).unwrap();
        let e = Manifest::read(&path).unwrap_err();
        assert!(matches!(e, ManifestError::Invalid { field: "class/split", line: 3, .. }), "{e}");

        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(&path, text.replacen("AD-0001_t0.nii", "missing.nii", 1)).unwrap();
        let e = Manifest::read(&path).unwrap_err();
        assert!(matches!(e, ManifestError::Invalid { field: "image", .. }), "{e}");

        fs::write(&path, text.replacen(",AD,", ",XX,", 1)).unwrap();
        assert!(matches!(Manifest::read(&path).unwrap_err(), ManifestError::Csv { .. }));
    }

    #[test]
    fn oracle_marks_shrinking_regions() {
        let c = cohort();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&c, dir.path(), 1, VolumeFormat::Nifti).unwrap();
        let planted = read_planted_csv(&dir.path().join(PLANTED_FILE)).unwrap();
        for p in &c.patients {
            let seg = render_labels(&c.spec, p, 0).unwrap();
            let ours = oracle_map(&seg, &planted[&p.id]);
            assert!(ours.bit_eq(&crate::synth::oracle_saliency(&c.spec, p).unwrap()));
        }
    }
}
