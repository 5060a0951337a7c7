//! Synthetic longitudinal cohorts of ellipsoid phantoms with planted atrophy.
//!
//! Each region is an ellipsoid inside its own cell of a regular grid over the
//! volume, so regions never overlap. A region with rate `r` has volume
//! `V₀·(1 − r)^t` at visit `t` (radii scale by the cube root). AD patients
//! enter at an already atrophied state (`prior_timepoints` visits of their
//! own rates) and shrinking regions are darker by `intensity_gain·r`, so the
//! baseline scan carries class information in both shape and intensity.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::class::Class;
use crate::grid::{Dims, GridError, LabelMap, Spacing, VoxelGrid};
use crate::rng::{purpose, stream};
use crate::vcs::{LongitudinalRecord, VcsError};

pub const MAX_REGIONS: usize = 95;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom spec field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("regions {a} and {b} overlap")]
    RegionsOverlap { a: u16, b: u16 },
    #[error("region {region} extends outside the volume")]
    RegionOutOfBounds { region: u16 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Vcs(#[from] VcsError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub num_regions: usize,
    /// AD volume loss per visit, by region id. Missing ids do not shrink.
    pub atrophy_rates: BTreeMap<u16, f64>,
    /// NC rates are this multiple of the AD rates.
    pub nc_rate_scale: f64,
    /// Visits of atrophy an AD patient has accumulated before baseline.
    pub prior_timepoints: f64,
    /// Baseline tissue intensity by region id.
    pub region_means: BTreeMap<u16, f32>,
    /// Shrinking regions are scaled by `1 − intensity_gain·r`.
    pub intensity_gain: f64,
    pub background: f32,
    pub noise_sigma: f32,
    pub timepoints: u32,
    /// Ellipsoid semi-axis as a fraction of the cell edge, before jitter.
    pub axis_fraction: f64,
    /// Relative per-patient jitter of semi-axes.
    pub axis_jitter: f64,
    /// Per-patient center jitter as a fraction of the cell edge.
    pub center_jitter: f64,
    /// Region shape factors are drawn per axis from `[1 − shape_variation, 1]`.
    pub shape_variation: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::with_regions(Dims([32, 32, 32]), 12, 0)
    }
}

impl PhantomSpec {
    /// Defaults for a given size: odd regions shrink at 9% to 12% per visit,
    /// even regions are stable.
    pub fn with_regions(dims: Dims, num_regions: usize, seed: u64) -> PhantomSpec {
        let shrinking: Vec<u16> = (1..=num_regions as u16).filter(|n| n % 2 == 1).collect();
        let steps = shrinking.len().saturating_sub(1).max(1) as f64;
        let atrophy_rates = shrinking
            .iter()
            .enumerate()
            .map(|(j, &n)| (n, 0.09 + 0.03 * j as f64 / steps))
            .collect();
        let region_means = (1..=num_regions as u16)
            .map(|n| (n, 0.5 + 0.4 * ((n as usize * 7) % 12) as f32 / 11.0))
            .collect();
        PhantomSpec {
            dims,
            spacing: Spacing::ISOTROPIC_MM,
            num_regions,
            atrophy_rates,
            nc_rate_scale: 0.3,
            prior_timepoints: 2.0,
            region_means,
            intensity_gain: 2.0,
            background: 0.1,
            noise_sigma: 0.05,
            timepoints: 3,
            axis_fraction: 0.45,
            axis_jitter: 0.05,
            center_jitter: 0.02,
            shape_variation: 0.08,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.dims.validate()?;
        self.spacing.validate()?;
        if self.num_regions == 0 || self.num_regions > MAX_REGIONS {
            return Err(invalid("num_regions", format!("must be in 1..={MAX_REGIONS}")));
        }
        for (&id, &r) in &self.atrophy_rates {
            if id == 0 || id as usize > self.num_regions {
                return Err(invalid("atrophy_rates", format!("unknown region {id}")));
            }
            if !(0.0..0.5).contains(&r) {
                return Err(invalid("atrophy_rates", format!("rate {r} of region {id} outside [0, 0.5)")));
            }
        }
        if !(0.0..=1.0).contains(&self.nc_rate_scale) {
            return Err(invalid("nc_rate_scale", "must lie in [0, 1]"));
        }
        if !(self.prior_timepoints.is_finite() && self.prior_timepoints >= 0.0) {
            return Err(invalid("prior_timepoints", "must be finite and >= 0"));
        }
        for id in 1..=self.num_regions as u16 {
            match self.region_means.get(&id) {
                Some(m) if m.is_finite() => {}
                _ => return Err(invalid("region_means", format!("missing or non-finite mean for region {id}"))),
            }
        }
        if !(self.intensity_gain.is_finite() && self.intensity_gain >= 0.0) {
            return Err(invalid("intensity_gain", "must be finite and >= 0"));
        }
        if !self.background.is_finite() {
            return Err(invalid("background", "must be finite"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma", "must be finite and >= 0"));
        }
        if self.timepoints < 2 {
            return Err(invalid("timepoints", "need at least two visits"));
        }
        if !(self.axis_fraction > 0.0 && self.axis_fraction.is_finite()) {
            return Err(invalid("axis_fraction", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.axis_jitter) {
            return Err(invalid("axis_jitter", "must lie in [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.center_jitter) {
            return Err(invalid("center_jitter", "must lie in [0, 0.5)"));
        }
        if !(0.0..1.0).contains(&self.shape_variation) {
            return Err(invalid("shape_variation", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Per-visit rate of `region` for `class`.
    pub fn rate(&self, class: Class, region: u16) -> f64 {
        let r = self.atrophy_rates.get(&region).copied().unwrap_or(0.0);
        match class {
            Class::Ad => r,
            Class::Nc => r * self.nc_rate_scale,
        }
    }

    /// Visits of atrophy already present at baseline.
    pub fn prior(&self, class: Class) -> f64 {
        match class {
            Class::Ad => self.prior_timepoints,
            Class::Nc => 0.0,
        }
    }

    /// Cells per axis: the most cube-like grid with at least `num_regions` cells.
    pub fn cell_grid(&self) -> [usize; 3] {
        let n = self.num_regions;
        let mut best = [n, 1, 1];
        let mut best_score = (usize::MAX, usize::MAX);
        for gx in 1..=n {
            for gy in 1..=n {
                let gz = n.div_ceil(gx * gy);
                let g = [gx, gy, gz];
                let cells: Vec<f64> = (0..3).map(|a| self.dims.0[a] as f64 / g[a] as f64).collect();
                let spread = cells.iter().cloned().fold(0.0, f64::max) / cells.iter().cloned().fold(f64::MAX, f64::min);
                let score = ((spread * 1000.0) as usize, gx * gy * gz);
                if score < best_score {
                    best_score = score;
                    best = g;
                }
            }
        }
        best
    }
}

/// One ellipsoid region of one patient at baseline (before the patient's
/// prior atrophy is applied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGeometry {
    pub id: u16,
    /// Voxel coordinates (x, y, z) of the center.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub axes: [f64; 3],
    pub rate: f64,
    pub mean: f32,
}

impl RegionGeometry {
    /// Volume scale at visit `t` after `prior` visits of earlier atrophy.
    pub fn volume_scale(&self, prior: f64, t: u32) -> f64 {
        (1.0 - self.rate).powf(prior + t as f64)
    }

    pub fn axes_at(&self, prior: f64, t: u32) -> [f64; 3] {
        let s = self.volume_scale(prior, t).cbrt();
        self.axes.map(|a| a * s)
    }

    /// Analytic ellipsoid volume in voxel units.
    pub fn analytic_voxels(&self, prior: f64, t: u32) -> f64 {
        let [a, b, c] = self.axes_at(prior, t);
        4.0 / 3.0 * std::f64::consts::PI * a * b * c
    }

    /// Tissue intensity: darker in proportion to the region's rate.
    pub fn intensity(&self, gain: f64) -> f32 {
        (self.mean as f64 * (1.0 - gain * self.rate)) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub class: Class,
    pub index: usize,
    pub prior: f64,
    pub regions: Vec<RegionGeometry>,
    /// timepoint → region → voxelized volume (mm³)
    pub volumes: BTreeMap<u32, BTreeMap<u16, f64>>,
    /// timepoint → region → analytic volume (mm³)
    pub analytic_volumes: BTreeMap<u32, BTreeMap<u16, f64>>,
}

impl Patient {
    pub fn longitudinal(&self) -> Result<LongitudinalRecord, VcsError> {
        LongitudinalRecord::new(self.id.clone(), self.volumes.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: PhantomSpec,
    pub patients: Vec<Patient>,
}

pub fn patient_id(class: Class, k: usize) -> String {
    format!("{}-{:04}", class.as_str(), k + 1)
}

/// Generates `n_ad` AD and `n_nc` NC patients; AD patients come first.
pub fn generate_cohort(spec: &PhantomSpec, n_ad: usize, n_nc: usize) -> Result<Cohort, SynthError> {
    spec.validate()?;
    let grid = spec.cell_grid();
    let cell = [0, 1, 2].map(|a| spec.dims.0[a] as f64 / grid[a] as f64);
    // Region shape factors are shared by all patients.
    let mut shape_rng = stream(spec.seed, &[purpose::COHORT]);
    let shape: Vec<[f64; 3]> = (0..spec.num_regions)
        .map(|_| [0; 3].map(|_| shape_rng.random_range(1.0 - spec.shape_variation..=1.0)))
        .collect();

    let mut patients = Vec::with_capacity(n_ad + n_nc);
    for (class, count) in [(Class::Ad, n_ad), (Class::Nc, n_nc)] {
        for k in 0..count {
            let index = patients.len();
            let mut rng = stream(spec.seed, &[purpose::PATIENT, class.index() as u64, k as u64]);
            let regions = (0..spec.num_regions)
                .map(|j| {
                    let id = (j + 1) as u16;
                    let c = [j % grid[0], (j / grid[0]) % grid[1], j / (grid[0] * grid[1])];
                    let mut center = [0.0; 3];
                    let mut axes = [0.0; 3];
                    for a in 0..3 {
                        let jitter = rng.random_range(-spec.center_jitter..=spec.center_jitter);
                        center[a] = (c[a] as f64 + 0.5 + jitter) * cell[a];
                        let aj = rng.random_range(-spec.axis_jitter..=spec.axis_jitter);
                        axes[a] = spec.axis_fraction * cell[a] * shape[j][a] * (1.0 + aj);
                    }
                    RegionGeometry {
                        id,
                        center,
                        axes,
                        rate: spec.rate(class, id),
                        mean: spec.region_means[&id],
                    }
                })
                .collect::<Vec<_>>();
            check_layout(spec, &regions)?;
            let mut p = Patient {
                id: patient_id(class, k),
                class,
                index,
                prior: spec.prior(class),
                regions,
                volumes: BTreeMap::new(),
                analytic_volumes: BTreeMap::new(),
            };
            let voxel = spec.spacing.voxel_volume();
            for t in 0..spec.timepoints {
                let labels = render_labels(spec, &p, t)?;
                p.volumes.insert(t, crate::atlas::region_volumes(&labels).values);
                p.analytic_volumes.insert(
                    t,
                    p.regions
                        .iter()
                        .map(|r| (r.id, r.analytic_voxels(p.prior, t) * voxel))
                        .collect(),
                );
            }
            patients.push(p);
        }
    }
    Ok(Cohort {
        spec: spec.clone(),
        patients,
    })
}

fn bounding_box(r: &RegionGeometry) -> ([f64; 3], [f64; 3]) {
    (
        [0, 1, 2].map(|a| r.center[a] - r.axes[a]),
        [0, 1, 2].map(|a| r.center[a] + r.axes[a]),
    )
}

/// Rejects regions whose bounding boxes leave the volume or intersect.
fn check_layout(spec: &PhantomSpec, regions: &[RegionGeometry]) -> Result<(), SynthError> {
    let boxes: Vec<_> = regions.iter().map(bounding_box).collect();
    for (r, (lo, hi)) in regions.iter().zip(&boxes) {
        if (0..3).any(|a| lo[a] < 0.0 || hi[a] > spec.dims.0[a] as f64) {
            return Err(SynthError::RegionOutOfBounds { region: r.id });
        }
    }
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            let (a, b) = (&boxes[i], &boxes[j]);
            if (0..3).all(|k| a.0[k] < b.1[k] && b.0[k] < a.1[k]) {
                return Err(SynthError::RegionsOverlap {
                    a: regions[i].id,
                    b: regions[j].id,
                });
            }
        }
    }
    Ok(())
}

/// Label map of a patient at visit `t`. Voxel `(x, y, z)` is sampled at its
/// center `(x + ½, y + ½, z + ½)`.
pub fn render_labels(spec: &PhantomSpec, patient: &Patient, t: u32) -> Result<LabelMap, SynthError> {
    let dims = spec.dims;
    let mut labels = vec![0u16; dims.len()];
    for r in &patient.regions {
        let axes = r.axes_at(patient.prior, t);
        let lo = [0, 1, 2].map(|a| ((r.center[a] - axes[a]).floor().max(0.0)) as usize);
        let hi = [0, 1, 2].map(|a| ((r.center[a] + axes[a]).ceil() as usize).min(dims.0[a]));
        for z in lo[2]..hi[2] {
            let dz = (z as f64 + 0.5 - r.center[2]) / axes[2];
            for y in lo[1]..hi[1] {
                let dy = (y as f64 + 0.5 - r.center[1]) / axes[1];
                let row = dz * dz + dy * dy;
                if row > 1.0 {
                    continue;
                }
                for x in lo[0]..hi[0] {
                    let dx = (x as f64 + 0.5 - r.center[0]) / axes[0];
                    if row + dx * dx <= 1.0 {
                        labels[dims.index(x, y, z)] = r.id;
                    }
                }
            }
        }
    }
    Ok(LabelMap::new(dims, spec.spacing, labels)?)
}

/// Intensity image at visit `t`: region intensities on a background, plus
/// Gaussian noise from a stream keyed by (patient, visit).
pub fn render_image(spec: &PhantomSpec, patient: &Patient, t: u32) -> Result<VoxelGrid, SynthError> {
    let labels = render_labels(spec, patient, t)?;
    let intensity: BTreeMap<u16, f32> = patient
        .regions
        .iter()
        .map(|r| (r.id, r.intensity(spec.intensity_gain)))
        .collect();
    let mut data: Vec<f32> = labels
        .labels()
        .iter()
        .map(|&l| if l == 0 { spec.background } else { intensity[&l] })
        .collect();
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
        let mut rng = stream(spec.seed, &[purpose::NOISE, patient.index as u64, t as u64]);
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(VoxelGrid::new(spec.dims, spec.spacing, data)?)
}

/// Map that is 1 inside every region the patient's class shrinks (at the
/// baseline label map) and 0 elsewhere.
pub fn oracle_saliency(spec: &PhantomSpec, patient: &Patient) -> Result<VoxelGrid, SynthError> {
    let labels = render_labels(spec, patient, 0)?;
    let shrinking: Vec<u16> = patient.regions.iter().filter(|r| r.rate > 0.0).map(|r| r.id).collect();
    let data = labels
        .labels()
        .iter()
        .map(|l| if shrinking.contains(l) { 1.0 } else { 0.0 })
        .collect();
    Ok(VoxelGrid::new(spec.dims, spec.spacing, data)?)
}

/// Deterministic split: the last `test_per_class` patients of each class are test.
pub fn split_indices(cohort: &Cohort, test_per_class: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [Class::Ad, Class::Nc] {
        let members: Vec<usize> = cohort
            .patients
            .iter()
            .filter(|p| p.class == class)
            .map(|p| p.index)
            .collect();
        let cut = members.len().saturating_sub(test_per_class);
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    (train, test)
}
