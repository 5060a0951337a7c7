use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use brainvcs::atlas::{
    aggregate_saliency, group_distribution, read_region_csv, region_rows, region_volumes, write_distribution_csv,
    write_region_csv, SaliencyMode,
};
use brainvcs::io::{read_nifti_grid, save_nifti, write_atomic, Volume};
use brainvcs::manifest::{
    oracle_map, read_planted_csv, write_cohort, Manifest, ManifestRow, Split, MANIFEST_FILE, PLANTED_FILE,
    VOLUMES_FILE,
};
use brainvcs::net::{load_checkpoint, save_checkpoint, Architecture, ModelState};
use brainvcs::robust::{fgsm_attack, train as train_model, write_log_csv, Dataset, TrainConfig};
use brainvcs::synth::{generate_cohort, PhantomSpec};
use brainvcs::vcs::{
    classification_metrics, delta_volumes, emit_boxplot_data, emit_scatter, read_report_json, read_volumes_csv,
    vcs as score, write_report_json, VcsOptions,
};
use brainvcs::{Class, VoxelGrid};

use crate::provenance::{sidecar, Provenance};
use crate::{AggregateArgs, AttackArgs, DistributionArgs, MetricsArgs, SaliencyArgs, SynthArgs, TrainArgs, VcsArgs};

pub const SALIENCY_INDEX: &str = "saliency.csv";
const PREDICT_BATCH: usize = 8;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{}", e.error()))?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    }
}

/// Baseline images of one split as a dataset.
fn dataset(m: &Manifest, split: Split) -> Result<Option<Dataset>> {
    let rows = m.baseline(Some(split));
    let Some(first) = rows.first() else {
        return Ok(None);
    };
    let mut ids = Vec::new();
    let mut volumes = Vec::new();
    let mut labels = Vec::new();
    for r in &rows {
        ensure!(
            r.dims() == first.dims(),
            "{}: dims {:?} differ from {:?} of {}",
            r.patient_id,
            r.dims().0,
            first.dims().0,
            first.patient_id
        );
        ids.push(r.patient_id.clone());
        volumes.push(m.load_image(r)?.into_data());
        labels.push(r.class.index());
    }
    Ok(Some(Dataset::new(first.dims(), ids, volumes, labels)?))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    ensure!(
        a.n_ad >= 1 && a.n_nc >= 1,
        "--n-ad and --n-nc must be at least 1"
    );
    ensure!(
        a.test_per_class <= a.n_ad.min(a.n_nc),
        "--test-per-class {} exceeds the smaller class size {}",
        a.test_per_class,
        a.n_ad.min(a.n_nc)
    );
    let cohort = generate_cohort(&spec, a.n_ad, a.n_nc)?;
    create_dir(&a.out)?;
    let m = write_cohort(&cohort, &a.out, a.test_per_class, a.format)?;
    Provenance::new(
        "synth",
        Some(spec.seed),
        json!({
            "spec": spec,
            "n_ad": a.n_ad,
            "n_nc": a.n_nc,
            "test_per_class": a.test_per_class,
            "format": a.format,
        }),
    )
    .output(&a.out.join(MANIFEST_FILE))
    .output(&a.out.join(VOLUMES_FILE))
    .output(&a.out.join(PLANTED_FILE))
    .write(&a.out.join("provenance.json"))?;
    println!(
        "wrote {} visits of {} patients to {}",
        m.rows.len(),
        cohort.patients.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;
    let m = Manifest::read(&a.manifest)?;
    let train_set = dataset(&m, Split::Train)?.ok_or_else(|| anyhow!("manifest has no train split"))?;
    let val_set = dataset(&m, Split::Test)?;
    let model = ModelState::<f32>::init(Architecture::default_for(train_set.input_shape()), cfg.seed)?;
    let outcome = train_model(model, &train_set, val_set.as_ref(), a.strategy, &cfg)?;

    create_dir(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let log = a.out.join("train_log.csv");
    let config = a.out.join("config.toml");
    save_checkpoint(&outcome.model, &ckpt)?;
    write_log_csv(&outcome.log, &log)?;
    write_atomic(&config, cfg.to_toml_string().as_bytes())?;
    Provenance::new(
        "train",
        Some(cfg.seed),
        json!({
            "strategy": a.strategy,
            "train": cfg,
            "masked_random": outcome.masked.0,
            "masked_greedy": outcome.masked.1,
        }),
    )
    .input(&a.manifest)
    .output(&ckpt)
    .output(&log)
    .output(&config)
    .write(&a.out.join("provenance.json"))?;
    for row in outcome.log.iter().rev().take(if val_set.is_some() { 2 } else { 1 }).rev() {
        println!(
            "epoch {} {}: loss {:.4} acc {:.3}",
            row.epoch, row.split, row.loss, row.acc
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SaliencyRow {
    patient_id: String,
    class: Class,
    saliency: String,
}

pub fn saliency(a: SaliencyArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let rows = m.baseline(a.split);
    ensure!(!rows.is_empty(), "no patients in the requested split");
    let mut maps: Vec<(&ManifestRow, VoxelGrid)> = Vec::with_capacity(rows.len());
    let mut prov_input = Vec::new();
    if a.oracle {
        let planted_path = a.planted.clone().unwrap_or_else(|| m.root.join(PLANTED_FILE));
        let planted = read_planted_csv(&planted_path).with_context(|| format!("reading {}", planted_path.display()))?;
        for r in rows {
            let rates = planted
                .get(&r.patient_id)
                .ok_or_else(|| anyhow!("{}: no planted rates for {}", planted_path.display(), r.patient_id))?;
            maps.push((r, oracle_map(&m.load_labels(r)?, rates)));
        }
        prov_input.push(planted_path);
    } else {
        let ckpt = a.checkpoint.clone().expect("clap requires a checkpoint without --oracle");
        let model = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        for r in rows {
            let img = m.load_image(r)?;
            let g = model.input_gradient(&[img.data()], &[r.class.index()])?.remove(0);
            maps.push((r, VoxelGrid::new(img.dims(), img.spacing(), g)?));
        }
        prov_input.push(ckpt);
    }

    let maps_dir = a.out.join("maps");
    create_dir(&maps_dir)?;
    let mut index = Vec::with_capacity(maps.len());
    for (r, map) in maps {
        let rel = format!("maps/{}.nii", r.patient_id);
        save_nifti(&Volume::Scalar(map), a.out.join(&rel))?;
        index.push(SaliencyRow {
            patient_id: r.patient_id.clone(),
            class: r.class,
            saliency: rel,
        });
    }
    let index_path = a.out.join(SALIENCY_INDEX);
    write_csv(&index, &index_path)?;
    let mut prov = Provenance::new(
        "saliency",
        None,
        json!({ "oracle": a.oracle, "split": a.split, "gradient": "d loss / d input, true label, batch size 1" }),
    )
    .input(&a.manifest);
    for p in &prov_input {
        prov = prov.input(p);
    }
    prov.output(&index_path).write(&a.out.join("provenance.json"))?;
    println!("wrote {} saliency maps to {}", index.len(), a.out.display());
    Ok(())
}

pub fn aggregate(a: AggregateArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let baseline: BTreeMap<&str, &ManifestRow> =
        m.baseline(None).into_iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let index: Vec<SaliencyRow> = read_csv(&a.saliency)?;
    ensure!(!index.is_empty(), "{}: no saliency maps listed", a.saliency.display());
    let root = parent_dir(&a.saliency);
    let mode = if a.signed { SaliencyMode::Signed } else { SaliencyMode::Absolute };
    let mut rows = Vec::new();
    for entry in &index {
        let r = baseline
            .get(entry.patient_id.as_str())
            .ok_or_else(|| anyhow!("patient {} is not in {}", entry.patient_id, a.manifest.display()))?;
        let seg = m.load_labels(r)?;
        let map = read_nifti_grid(root.join(&entry.saliency)).with_context(|| format!("saliency map of {}", entry.patient_id))?;
        let s = aggregate_saliency(entry.patient_id.clone(), &map, &seg, mode)?;
        rows.extend(region_rows(&s, &region_volumes(&seg), None));
    }
    write_region_csv(&rows, &a.out)?;
    Provenance::new("aggregate", None, json!({ "mode": mode }))
        .input(&a.manifest)
        .input(&a.saliency)
        .output(&a.out)
        .write(&sidecar(&a.out))?;
    println!("aggregated {} patients into {}", index.len(), a.out.display());
    Ok(())
}

pub fn distribution(a: DistributionArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let classes: BTreeMap<&str, Class> = m
        .baseline(None)
        .into_iter()
        .map(|r| (r.patient_id.as_str(), r.class))
        .collect();
    let saliency = read_region_csv(&a.regions).with_context(|| format!("reading {}", a.regions.display()))?;
    let cohort = saliency
        .into_iter()
        .map(|s| {
            let class = *classes
                .get(s.patient_id.as_str())
                .ok_or_else(|| anyhow!("patient {} is not in {}", s.patient_id, a.manifest.display()))?;
            Ok((s, class))
        })
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<Class> = [Class::Ad, Class::Nc]
        .into_iter()
        .filter(|c| cohort.iter().any(|(_, k)| k == c))
        .collect();
    let dist = group_distribution(&cohort, &present)?;
    write_distribution_csv(&dist, &a.out)?;
    Provenance::new("distribution", None, json!({ "patients": dist.patients, "substituted_zeros": dist.substituted_zeros }))
        .input(&a.manifest)
        .input(&a.regions)
        .output(&a.out)
        .write(&sidecar(&a.out))?;
    Ok(())
}

pub fn vcs(a: VcsArgs) -> Result<()> {
    ensure!(
        a.max_region_mismatch.is_finite() && (0.0..=1.0).contains(&a.max_region_mismatch),
        "--max-region-mismatch must lie in [0, 1]"
    );
    let compare = a
        .compare
        .iter()
        .map(|c| {
            let (name, path) = c
                .split_once('=')
                .ok_or_else(|| anyhow!("--compare {c:?}: expected NAME=REPORT"))?;
            Ok((name.to_string(), read_report_json(Path::new(path)).with_context(|| format!("reading {path}"))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let saliency = read_region_csv(&a.regions).with_context(|| format!("reading {}", a.regions.display()))?;
    let deltas: BTreeMap<String, BTreeMap<u16, f64>> = read_volumes_csv(&a.volumes).with_context(|| format!("reading {}", a.volumes.display()))?
        .iter()
        .map(|r| (r.patient_id().to_string(), delta_volumes(r)))
        .collect();
    let pairs = saliency
        .into_iter()
        .map(|s| {
            let d = deltas
                .get(&s.patient_id)
                .cloned()
                .ok_or_else(|| anyhow!("patient {} has no volumes in {}", s.patient_id, a.volumes.display()))?;
            Ok((s, d))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = score(
        &pairs,
        VcsOptions {
            max_region_mismatch: a.max_region_mismatch,
        },
    )?;
    write_report_json(&report, &a.out)?;
    let mut prov = Provenance::new(
        "vcs",
        None,
        json!({ "model_name": a.model_name, "max_region_mismatch": a.max_region_mismatch }),
    )
    .input(&a.regions)
    .input(&a.volumes)
    .output(&a.out);
    if let Some(p) = &a.scatter {
        emit_scatter(&report, p)?;
        prov = prov.output(p);
    }
    if let Some(p) = &a.boxplot {
        let mut all = vec![(a.model_name.clone(), report.clone())];
        all.extend(compare);
        emit_boxplot_data(&all, p)?;
        prov = prov.output(p);
    }
    prov.write(&sidecar(&a.out))?;
    println!(
        "VCS {:.6} over {} patients ({} skipped)",
        report.vcs,
        report.per_patient.len(),
        report.skipped.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttackRow {
    patient_id: String,
    class: Class,
    pred_clean: Class,
    pred_adv: Class,
    loss_clean: f64,
    loss_adv: f64,
    linf: f64,
}

fn class_of(index: usize) -> Class {
    Class::from_index(index).expect("binary head")
}

pub fn attack(a: AttackArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.epsilon = a.epsilon.unwrap_or(cfg.epsilon);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    if let Some(t) = a.target_mode {
        cfg.target_mode = t.into();
    }
    let fgsm = cfg.fgsm();
    fgsm.validate()?;
    let m = Manifest::read(&a.manifest)?;
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let rows = m.baseline(Some(a.split));
    ensure!(!rows.is_empty(), "no patients in split {}", a.split);

    let mut report = Vec::with_capacity(rows.len());
    let mut adv_maps = Vec::with_capacity(rows.len());
    for r in rows {
        let img = m.load_image(r)?;
        let y = r.class.index();
        let adv = fgsm_attack(&model, &[img.data()], &[y], &fgsm)?.remove(0);
        let linf = img
            .data()
            .iter()
            .zip(&adv)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max);
        let pred = model.predict(&[img.data(), &adv])?;
        report.push(AttackRow {
            patient_id: r.patient_id.clone(),
            class: r.class,
            pred_clean: class_of(pred[0]),
            pred_adv: class_of(pred[1]),
            loss_clean: f64::from(model.loss(&[img.data()], &[y])?),
            loss_adv: f64::from(model.loss(&[&adv], &[y])?),
            linf,
        });
        adv_maps.push((r.patient_id.clone(), VoxelGrid::new(img.dims(), img.spacing(), adv)?));
    }

    let adv_dir = a.out.join("adversarial");
    create_dir(&adv_dir)?;
    for (id, grid) in adv_maps {
        save_nifti(&Volume::Scalar(grid), adv_dir.join(format!("{id}.nii")))?;
    }
    let csv_path = a.out.join("attack.csv");
    write_csv(&report, &csv_path)?;
    Provenance::new("attack", None, json!({ "fgsm": fgsm, "split": a.split }))
        .input(&a.manifest)
        .input(&a.checkpoint)
        .output(&csv_path)
        .write(&a.out.join("provenance.json"))?;
    let flipped = report.iter().filter(|r| r.pred_clean != r.pred_adv).count();
    println!("{flipped} of {} predictions changed", report.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct PredictionRow {
    patient_id: String,
    class: Class,
    predicted: Class,
    logit_nc: f32,
    logit_ad: f32,
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let rows = m.baseline(Some(a.split));
    if rows.is_empty() {
        bail!("no patients in split {}", a.split);
    }
    let mut predictions = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(PREDICT_BATCH) {
        let images = chunk.iter().map(|r| m.load_image(r)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f32]> = images.iter().map(VoxelGrid::data).collect();
        for (r, l) in chunk.iter().zip(model.logits(&refs)?) {
            predictions.push(PredictionRow {
                patient_id: r.patient_id.clone(),
                class: r.class,
                predicted: class_of(usize::from(l[1] > l[0])),
                logit_nc: l[Class::Nc.index()],
                logit_ad: l[Class::Ad.index()],
            });
        }
    }
    let pairs: Vec<(Class, Class)> = predictions.iter().map(|p| (p.predicted, p.class)).collect();
    let metrics = classification_metrics(&pairs)?;
    write_json(&json!({ "split": a.split, "n": pairs.len(), "metrics": metrics }), &a.out)?;
    let mut prov = Provenance::new("metrics", None, json!({ "split": a.split }))
        .input(&a.manifest)
        .input(&a.checkpoint)
        .output(&a.out);
    if let Some(p) = &a.predictions {
        write_csv(&predictions, p)?;
        prov = prov.output(p);
    }
    prov.write(&sidecar(&a.out))?;
    println!(
        "ACC {:.4} SEN {} SPE {}",
        metrics.acc,
        metrics.sen.map_or("undefined".into(), |v| format!("{v:.4}")),
        metrics.spe.map_or("undefined".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}
