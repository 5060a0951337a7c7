//! Glue between the synthetic cohort, training, saliency and VCS.

use std::collections::BTreeMap;

use crate::atlas::{aggregate_saliency, RegionSaliency, SaliencyMode};
use crate::grid::VoxelGrid;
use crate::net::{ModelState, NetError};
use crate::robust::{Dataset, RobustError};
use crate::synth::{render_image, render_labels, Cohort, SynthError};
use crate::vcs::{delta_volumes, VcsError};

/// Baseline images of the given patients as a training set.
pub fn cohort_dataset(cohort: &Cohort, indices: &[usize]) -> Result<Dataset, SynthError> {
    let mut ids = Vec::with_capacity(indices.len());
    let mut volumes = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &cohort.patients[i];
        ids.push(p.id.clone());
        volumes.push(render_image(&cohort.spec, p, 0)?.into_data());
        labels.push(p.class.index());
    }
    Ok(Dataset::new(cohort.spec.dims, ids, volumes, labels).expect("rendered volumes share dims"))
}

/// Per-sample input gradient `∇ₓJ(θ, x, y)` of every volume, one at a time so
/// that values do not depend on batch composition.
pub fn saliency_maps(model: &ModelState<f32>, data: &Dataset) -> Result<Vec<Vec<f32>>, NetError> {
    data.volumes
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| Ok(model.input_gradient(&[x.as_slice()], &[y])?.remove(0)))
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
    #[error(transparent)]
    Vcs(#[from] VcsError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Region saliency (on each patient's baseline segmentation) paired with the
/// patient's measured ΔV, ready for [`crate::vcs::vcs`].
#[allow(clippy::type_complexity)]
pub fn saliency_vs_atrophy(
    model: &ModelState<f32>,
    cohort: &Cohort,
    indices: &[usize],
    mode: SaliencyMode,
) -> Result<Vec<(RegionSaliency, BTreeMap<u16, f64>)>, ExperimentError> {
    let data = cohort_dataset(cohort, indices)?;
    let maps = saliency_maps(model, &data)?;
    let spec = &cohort.spec;
    let mut out = Vec::with_capacity(indices.len());
    for (&i, map) in indices.iter().zip(maps) {
        let p = &cohort.patients[i];
        let grid = VoxelGrid::new(spec.dims, spec.spacing, map)?;
        let seg = render_labels(spec, p, 0)?;
        let s = aggregate_saliency(p.id.clone(), &grid, &seg, mode)?;
        out.push((s, delta_volumes(&p.longitudinal()?)));
    }
    Ok(out)
}
