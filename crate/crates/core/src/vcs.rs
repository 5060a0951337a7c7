//! Volume change score.
//!
//! For every patient the region saliency values are correlated (Pearson)
//! against the region volume change between first and last visit; the score
//! is the mean correlation over the cohort. Also hosts the ACC/SEN/SPE
//! classification metrics and the CSV/JSON report emitters.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::RegionSaliency;
use crate::class::Class;
use crate::io::write_atomic;

/// Sign convention of every `delta_v` produced by this module.
pub const DELTA_V_CONVENTION: &str = "delta_v = V(t=0) - V(t=T); shrinkage is positive";

#[derive(Debug, Error, PartialEq)]
pub enum PearsonError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("{0} vector has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum VcsError {
    #[error("patient {patient_id}: {message}")]
    MissingTimepoint { patient_id: String, message: String },
    #[error("patient {patient_id}: region {region_id} at timepoint {timepoint} has invalid volume {volume}")]
    InvalidVolume {
        patient_id: String,
        region_id: u16,
        timepoint: u32,
        volume: f64,
    },
    #[error("patient {patient_id}: region sets differ between first and last visit ({detail})")]
    RegionSetChanged { patient_id: String, detail: String },
    #[error("empty cohort")]
    EmptyCohort,
    #[error("every patient was skipped: {0:?}")]
    AllPatientsSkipped(Vec<SkippedPatient>),
    #[error("patient {patient_id}: {fraction:.3} of regions unpaired between saliency and volume change (limit {limit})")]
    RegionMismatch {
        patient_id: String,
        fraction: f64,
        limit: f64,
    },
    #[error("patient {0} appears more than once")]
    DuplicatePatient(String),
    #[error("no predictions")]
    EmptyPredictions,
    #[error("no positive (AD) ground-truth labels; sensitivity undefined")]
    NoPositives,
    #[error("no negative (NC) ground-truth labels; specificity undefined")]
    NoNegatives,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Region volumes of one patient across visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalRecord {
    patient_id: String,
    /// timepoint → region → volume (mm³)
    volumes: BTreeMap<u32, BTreeMap<u16, f64>>,
}

impl LongitudinalRecord {
    pub fn new(
        patient_id: impl Into<String>,
        volumes: BTreeMap<u32, BTreeMap<u16, f64>>,
    ) -> Result<Self, VcsError> {
        let patient_id = patient_id.into();
        if !volumes.contains_key(&0) {
            return Err(VcsError::MissingTimepoint {
                patient_id,
                message: "no baseline (t=0) visit".into(),
            });
        }
        if volumes.len() < 2 {
            return Err(VcsError::MissingTimepoint {
                patient_id,
                message: "need at least two visits".into(),
            });
        }
        for (&t, regions) in &volumes {
            for (&region_id, &volume) in regions {
                if !(volume.is_finite() && volume > 0.0) {
                    return Err(VcsError::InvalidVolume {
                        patient_id,
                        region_id,
                        timepoint: t,
                        volume,
                    });
                }
            }
        }
        let first: BTreeSet<u16> = volumes[&0].keys().copied().collect();
        let last: BTreeSet<u16> = volumes.values().next_back().unwrap().keys().copied().collect();
        if first != last {
            let appeared: Vec<_> = last.difference(&first).collect();
            let vanished: Vec<_> = first.difference(&last).collect();
            return Err(VcsError::RegionSetChanged {
                patient_id,
                detail: format!("appeared {appeared:?}, vanished {vanished:?}"),
            });
        }
        Ok(LongitudinalRecord {
            patient_id,
            volumes,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    /// Last visit index `T`.
    pub fn last_timepoint(&self) -> u32 {
        *self.volumes.keys().next_back().unwrap()
    }

    pub fn volumes(&self) -> &BTreeMap<u32, BTreeMap<u16, f64>> {
        &self.volumes
    }
}

/// `ΔV_n = V_n(0) − V_n(T)`, see [`DELTA_V_CONVENTION`].
pub fn delta_volumes(rec: &LongitudinalRecord) -> BTreeMap<u16, f64> {
    let first = &rec.volumes[&0];
    let last = &rec.volumes[&rec.last_timepoint()];
    first
        .iter()
        .map(|(&id, &v0)| (id, v0 - last[&id]))
        .collect()
}

/// Pearson correlation without the final clamp to `[-1, 1]`.
pub fn pearson_unclamped(a: &[f64], b: &[f64]) -> Result<f64, PearsonError> {
    if a.len() != b.len() {
        return Err(PearsonError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(PearsonError::TooShort(a.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(PearsonError::NonFinite);
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(PearsonError::ZeroVariance("first"));
    }
    if sbb == 0.0 {
        return Err(PearsonError::ZeroVariance("second"));
    }
    // sqrt(s*s) == s exactly in binary floating point, so identical inputs
    // give exactly 1.
    let prod = saa * sbb;
    let denom = if prod.is_finite() && prod > 0.0 {
        prod.sqrt()
    } else {
        saa.sqrt() * sbb.sqrt()
    };
    Ok(sab / denom)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, PearsonError> {
    pearson_unclamped(a, b).map(|r| r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPair {
    pub region_id: u16,
    pub s: f64,
    pub delta_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPatient {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcsReport {
    pub vcs: f64,
    pub per_patient: BTreeMap<String, f64>,
    pub pairs: BTreeMap<String, Vec<RegionPair>>,
    pub skipped: Vec<SkippedPatient>,
    pub delta_v_convention: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcsOptions {
    /// Largest tolerated fraction of regions present in only one of the two
    /// maps, relative to their union.
    pub max_region_mismatch: f64,
}

impl Default for VcsOptions {
    fn default() -> Self {
        VcsOptions {
            max_region_mismatch: 0.2,
        }
    }
}

/// Computes per-patient correlations and their mean.
///
/// Regions are paired by id over the intersection, in ascending id order.
/// Patients whose correlation is undefined (constant saliency or volume
/// change, fewer than two shared regions) are reported in `skipped` and
/// excluded from the mean.
pub fn vcs(
    cohort: &[(RegionSaliency, BTreeMap<u16, f64>)],
    opts: VcsOptions,
) -> Result<VcsReport, VcsError> {
    if cohort.is_empty() {
        return Err(VcsError::EmptyCohort);
    }
    let mut seen = BTreeSet::new();
    let mut report = VcsReport {
        vcs: 0.0,
        per_patient: BTreeMap::new(),
        pairs: BTreeMap::new(),
        skipped: Vec::new(),
        delta_v_convention: DELTA_V_CONVENTION.to_string(),
    };
    let mut sum = 0.0;
    for (saliency, delta) in cohort {
        let id = &saliency.patient_id;
        if !seen.insert(id.clone()) {
            return Err(VcsError::DuplicatePatient(id.clone()));
        }
        let s_keys: BTreeSet<u16> = saliency.values.keys().copied().collect();
        let v_keys: BTreeSet<u16> = delta.keys().copied().collect();
        let union = s_keys.union(&v_keys).count();
        let shared: Vec<u16> = s_keys.intersection(&v_keys).copied().collect();
        if union > 0 {
            let fraction = 1.0 - shared.len() as f64 / union as f64;
            if fraction > opts.max_region_mismatch {
                return Err(VcsError::RegionMismatch {
                    patient_id: id.clone(),
                    fraction,
                    limit: opts.max_region_mismatch,
                });
            }
        }
        let pairs: Vec<RegionPair> = shared
            .iter()
            .map(|&r| RegionPair {
                region_id: r,
                s: saliency.values[&r],
                delta_v: delta[&r],
            })
            .collect();
        let s: Vec<f64> = pairs.iter().map(|p| p.s).collect();
        let dv: Vec<f64> = pairs.iter().map(|p| p.delta_v).collect();
        match pearson(&s, &dv) {
            Ok(r) => {
                sum += r;
                report.per_patient.insert(id.clone(), r);
                report.pairs.insert(id.clone(), pairs);
            }
            Err(e) => report.skipped.push(SkippedPatient {
                patient_id: id.clone(),
                reason: match e {
                    PearsonError::ZeroVariance("first") => "constant saliency across regions".into(),
                    PearsonError::ZeroVariance(_) => "constant volume change across regions".into(),
                    other => other.to_string(),
                },
            }),
        }
    }
    if report.per_patient.is_empty() {
        return Err(VcsError::AllPatientsSkipped(report.skipped));
    }
    // Mean in cohort order.
    report.vcs = sum / report.per_patient.len() as f64;
    Ok(report)
}

/// Confusion counts with ACC/SEN/SPE; AD is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub acc: f64,
    /// `None` when there are no positive ground-truth labels.
    pub sen: Option<f64>,
    /// `None` when there are no negative ground-truth labels.
    pub spe: Option<f64>,
}

impl ClassificationMetrics {
    pub fn sensitivity(&self) -> Result<f64, VcsError> {
        self.sen.ok_or(VcsError::NoPositives)
    }

    pub fn specificity(&self) -> Result<f64, VcsError> {
        self.spe.ok_or(VcsError::NoNegatives)
    }
}

/// `predictions` are `(predicted, truth)` pairs.
pub fn classification_metrics(
    predictions: &[(Class, Class)],
) -> Result<ClassificationMetrics, VcsError> {
    if predictions.is_empty() {
        return Err(VcsError::EmptyPredictions);
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for &(pred, truth) in predictions {
        match (pred, truth) {
            (Class::Ad, Class::Ad) => tp += 1,
            (Class::Nc, Class::Nc) => tn += 1,
            (Class::Ad, Class::Nc) => fp += 1,
            (Class::Nc, Class::Ad) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(ClassificationMetrics {
        tp,
        tn,
        fp,
        fn_,
        acc: (tp + tn) as f64 / predictions.len() as f64,
        sen: ratio(tp, tp + fn_),
        spe: ratio(tn, tn + fp),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VcsError + '_ {
    move |source| VcsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<(), VcsError> {
    let bytes = w.into_inner().map_err(|e| e.into_error()).map_err(io_err(path))?;
    write_atomic(path, &bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub patient_id: String,
    pub region_id: u16,
    pub delta_v: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub model_name: String,
    pub patient_id: String,
    pub p_i: f64,
}

/// `ΔV` vs `S` rows for every paired region of every scored patient.
pub fn emit_scatter(report: &VcsReport, path: &Path) -> Result<(), VcsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["patient_id", "region_id", "delta_v", "s"])?;
    for (patient, pairs) in &report.pairs {
        for p in pairs {
            w.serialize(ScatterRow {
                patient_id: patient.clone(),
                region_id: p.region_id,
                delta_v: p.delta_v,
                s: p.s,
            })?;
        }
    }
    finish_csv(w, path)
}

/// One row per scored patient per model.
pub fn emit_boxplot_data(reports: &[(String, VcsReport)], path: &Path) -> Result<(), VcsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["model_name", "patient_id", "p_i"])?;
    for (name, report) in reports {
        for (patient, &p) in &report.per_patient {
            w.serialize(BoxplotRow {
                model_name: name.clone(),
                patient_id: patient.clone(),
                p_i: p,
            })?;
        }
    }
    finish_csv(w, path)
}

pub fn read_scatter(path: &Path) -> Result<Vec<ScatterRow>, VcsError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_boxplot(path: &Path) -> Result<Vec<BoxplotRow>, VcsError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_report_json(report: &VcsReport, path: &Path) -> Result<(), VcsError> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_report_json(path: &Path) -> Result<VcsReport, VcsError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub patient_id: String,
    pub region_id: u16,
    pub timepoint: u32,
    pub volume_mm3: f64,
}

pub fn write_volumes_csv(records: &[LongitudinalRecord], path: &Path) -> Result<(), VcsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["patient_id", "region_id", "timepoint", "volume_mm3"])?;
    for rec in records {
        for (&t, regions) in &rec.volumes {
            for (&region_id, &volume_mm3) in regions {
                w.serialize(VolumeRow {
                    patient_id: rec.patient_id.clone(),
                    region_id,
                    timepoint: t,
                    volume_mm3,
                })?;
            }
        }
    }
    finish_csv(w, path)
}

/// Reads a longitudinal-volumes CSV, grouping rows by patient in order of
/// first appearance.
pub fn read_volumes_csv(path: &Path) -> Result<Vec<LongitudinalRecord>, VcsError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut order = Vec::new();
    let mut grouped: BTreeMap<String, BTreeMap<u32, BTreeMap<u16, f64>>> = BTreeMap::new();
    for row in r.deserialize::<VolumeRow>() {
        let row = row?;
        grouped
            .entry(row.patient_id.clone())
            .or_insert_with(|| {
                order.push(row.patient_id.clone());
                BTreeMap::new()
            })
            .entry(row.timepoint)
            .or_default()
            .insert(row.region_id, row.volume_mm3);
    }
    order
        .into_iter()
        .map(|id| {
            let v = grouped.remove(&id).unwrap_or_default();
            LongitudinalRecord::new(id, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(v0: &[(u16, f64)], vt: &[(u16, f64)]) -> Result<LongitudinalRecord, VcsError> {
        LongitudinalRecord::new(
            "p",
            BTreeMap::from([
                (0, v0.iter().copied().collect()),
                (2, vt.iter().copied().collect()),
            ]),
        )
    }

    #[test]
    fn shrinkage_is_positive() {
        let rec = record(&[(1, 100.0), (2, 50.0)], &[(1, 80.0), (2, 50.0)]).unwrap();
        assert_eq!(delta_volumes(&rec), BTreeMap::from([(1, 20.0), (2, 0.0)]));
    }

    #[test]
    fn record_validation() {
        assert!(matches!(
            LongitudinalRecord::new("p", BTreeMap::from([(0, BTreeMap::from([(1, 1.0)]))])),
            Err(VcsError::MissingTimepoint { .. })
        ));
        assert!(matches!(
            LongitudinalRecord::new(
                "p",
                BTreeMap::from([(1, BTreeMap::from([(1, 1.0)])), (2, BTreeMap::from([(1, 1.0)]))])
            ),
            Err(VcsError::MissingTimepoint { .. })
        ));
        assert!(matches!(
            record(&[(1, 1.0)], &[(1, 0.0)]),
            Err(VcsError::InvalidVolume { .. })
        ));
        assert!(matches!(
            record(&[(1, 1.0)], &[(2, 1.0)]),
            Err(VcsError::RegionSetChanged { .. })
        ));
    }

    #[test]
    fn pearson_basics() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(
            pearson(&[1.0, 2.0], &[1.0]),
            Err(PearsonError::LengthMismatch(2, 1))
        );
        assert_eq!(pearson(&[1.0], &[1.0]), Err(PearsonError::TooShort(1)));
        assert_eq!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(PearsonError::ZeroVariance("first"))
        );
        assert_eq!(
            pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(PearsonError::ZeroVariance("second"))
        );
    }

    fn rs(id: &str, v: &[(u16, f64)]) -> RegionSaliency {
        RegionSaliency {
            patient_id: id.into(),
            values: v.iter().copied().collect(),
        }
    }

    #[test]
    fn proportional_saliency_scores_one() {
        let dv = BTreeMap::from([(1, 10.0), (2, 3.0), (3, 0.0)]);
        let cohort = vec![
            (rs("a", &[(1, 0.1), (2, 0.03), (3, 0.0)]), dv.clone()),
            (rs("b", &[(1, 20.0), (2, 6.0), (3, 0.0)]), dv),
        ];
        let report = vcs(&cohort, VcsOptions::default()).unwrap();
        assert!((report.vcs - 1.0).abs() < 1e-15);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn constant_saliency_is_skipped_not_zeroed() {
        let dv = BTreeMap::from([(1, 10.0), (2, 3.0), (3, 1.0)]);
        let cohort = vec![
            (rs("flat", &[(1, 0.5), (2, 0.5), (3, 0.5)]), dv.clone()),
            (rs("good", &[(1, 3.0), (2, 2.0), (3, 1.0)]), dv.clone()),
        ];
        let report = vcs(&cohort, VcsOptions::default()).unwrap();
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].patient_id, "flat");
        assert_eq!(report.vcs, report.per_patient["good"]);

        let only_flat = vec![cohort[0].clone()];
        assert!(matches!(
            vcs(&only_flat, VcsOptions::default()),
            Err(VcsError::AllPatientsSkipped(_))
        ));
        assert!(matches!(vcs(&[], VcsOptions::default()), Err(VcsError::EmptyCohort)));
    }

    #[test]
    fn region_mismatch_limit() {
        let dv: BTreeMap<u16, f64> = (1..=10).map(|r| (r, r as f64)).collect();
        // 8 of 10 shared: mismatch 0.2 is tolerated.
        let s: Vec<(u16, f64)> = (1..=8).map(|r| (r, (r * r) as f64)).collect();
        assert!(vcs(&[(rs("p", &s), dv.clone())], VcsOptions::default()).is_ok());
        let s: Vec<(u16, f64)> = (1..=7).map(|r| (r, (r * r) as f64)).collect();
        assert!(matches!(
            vcs(&[(rs("p", &s), dv)], VcsOptions::default()),
            Err(VcsError::RegionMismatch { .. })
        ));
    }

    #[test]
    fn confusion_arithmetic() {
        let mut preds = Vec::new();
        preds.extend(std::iter::repeat_n((Class::Ad, Class::Ad), 9));
        preds.extend(std::iter::repeat_n((Class::Nc, Class::Ad), 1));
        preds.extend(std::iter::repeat_n((Class::Nc, Class::Nc), 8));
        preds.extend(std::iter::repeat_n((Class::Ad, Class::Nc), 2));
        let m = classification_metrics(&preds).unwrap();
        assert!((m.acc - 0.85).abs() < 1e-15);
        assert!((m.sen.unwrap() - 0.9).abs() < 1e-15);
        assert!((m.spe.unwrap() - 0.8).abs() < 1e-15);

        let perfect = classification_metrics(&[(Class::Ad, Class::Ad), (Class::Nc, Class::Nc)]).unwrap();
        assert_eq!((perfect.acc, perfect.sen, perfect.spe), (1.0, Some(1.0), Some(1.0)));
    }

    #[test]
    fn undefined_metrics_are_reported() {
        let m = classification_metrics(&[(Class::Nc, Class::Nc), (Class::Ad, Class::Nc)]).unwrap();
        assert_eq!(m.acc, 0.5);
        assert!(matches!(m.sensitivity(), Err(VcsError::NoPositives)));
        assert_eq!(m.specificity().unwrap(), 0.5);
        assert!(matches!(classification_metrics(&[]), Err(VcsError::EmptyPredictions)));
    }

    #[test]
    fn scatter_rows_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let dv = BTreeMap::from([(1, 10.0), (2, 3.0), (3, 1.0)]);
        let cohort = vec![
            (rs("a", &[(1, 0.3), (2, 0.2), (3, 0.25)]), dv.clone()),
            (rs("b", &[(1, 3.0), (2, 2.0), (3, 1.0)]), dv),
        ];
        let report = vcs(&cohort, VcsOptions::default()).unwrap();
        let path = dir.path().join("scatter.csv");
        emit_scatter(&report, &path).unwrap();
        assert_eq!(read_scatter(&path).unwrap().len(), 6);

        let empty = VcsReport {
            vcs: 0.0,
            per_patient: BTreeMap::new(),
            pairs: BTreeMap::new(),
            skipped: vec![],
            delta_v_convention: DELTA_V_CONVENTION.into(),
        };
        emit_scatter(&empty, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "patient_id,region_id,delta_v,s\n"
        );
    }
}
