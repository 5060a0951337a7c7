use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::grid::Dims;
use crate::io::write_atomic;
use crate::net::{loss_xent, ModelState, Sgd, NUM_CLASSES};
use crate::rng::{purpose, stream};

use super::config::{ConsistencyConfig, FgsmConfig, Strategy, TrainConfig};
use super::consistency::consistency_graph;
use super::fgsm::fgsm_attack;
use super::masking::{apply_mask, draw_mask_params, partition_blocks, select_blocks, MaskBranch};
use super::RobustError;

/// Equally shaped volumes with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub ids: Vec<String>,
    pub volumes: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: Dims, ids: Vec<String>, volumes: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self, RobustError> {
        if ids.len() != volumes.len() || labels.len() != volumes.len() {
            return Err(RobustError::Dataset(format!(
                "{} ids, {} volumes, {} labels",
                ids.len(),
                volumes.len(),
                labels.len()
            )));
        }
        if let Some(i) = volumes.iter().position(|v| v.len() != dims.len()) {
            return Err(RobustError::Dataset(format!(
                "volume {} has {} voxels, expected {}",
                ids[i],
                volumes[i].len(),
                dims.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(RobustError::Dataset(format!("label {y} out of range")));
        }
        Ok(Dataset {
            dims,
            ids,
            volumes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Model input shape `[1, nz, ny, nx]`.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.dims.nz(), self.dims.ny(), self.dims.nx()]
    }

    fn refs(&self, idx: &[usize]) -> Vec<&[f32]> {
        idx.iter().map(|&i| self.volumes[i].as_slice()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub acc: f64,
    pub predictions: Vec<usize>,
}

/// Mean cross-entropy, accuracy and arg-max predictions on clean inputs.
pub fn evaluate(model: &ModelState<f32>, data: &Dataset, batch_size: usize) -> Result<Evaluation, RobustError> {
    if data.is_empty() {
        return Err(RobustError::Dataset("empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = data.refs(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false)?;
        let x = model.input_node(&mut tape, &batch, false)?;
        let logits = model.forward(&mut tape, &bound, x)?;
        let j = loss_xent(&mut tape, logits, &labels)?;
        loss += tape.scalar(j) as f64 * chunk.len() as f64;
        predictions.extend(
            tape.value(logits)
                .chunks_exact(NUM_CLASSES)
                .map(|r| usize::from(r[1] > r[0])),
        );
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        acc: correct as f64 / data.len() as f64,
        predictions,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState<f32>,
    pub log: Vec<LogRow>,
    /// Masked images per branch over the whole run: (random, greedy).
    pub masked: (usize, usize),
}

/// Whether masking is active in `epoch` (0-based).
pub fn masking_active(epoch: usize, epochs: usize, fraction: f64) -> bool {
    epoch as f64 >= fraction * epochs as f64
}

/// Trains `model` on `data` with the given strategy.
///
/// The data order of every epoch depends only on `(cfg.seed, epoch)`, so runs
/// with different strategies see identical batches. Mask draws depend only on
/// `(cfg.seed, epoch, image index)`. The attack radius, step and penalty
/// weight are scaled by [`TrainConfig::robust_weight`]; in epochs where that
/// weight is 0 the adversarial branch is the clean batch. After each epoch
/// the clean loss and accuracy on `data` (and on `validation`, if given) are
/// logged.
pub fn train(
    mut model: ModelState<f32>,
    data: &Dataset,
    validation: Option<&Dataset>,
    strategy: Strategy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, RobustError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RobustError::Dataset("empty training set".into()));
    }
    if !(0..NUM_CLASSES).all(|c| data.labels.contains(&c)) {
        return Err(RobustError::SingleClassDataset);
    }
    if model.arch.input != [1, data.input_shape()[0], data.input_shape()[1], data.input_shape()[2]] {
        return Err(RobustError::Dataset(format!(
            "model input {:?} does not fit volumes of dims {:?}",
            model.arch.input, data.dims.0
        )));
    }
    let mask = cfg.mask();
    let blocks = partition_blocks(data.dims, mask.block_edge);
    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let mut log = Vec::new();
    let mut masked = (0, 0);

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_schedule.lr(cfg.lr, epoch, cfg.epochs) as f32;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[purpose::DATA_ORDER, epoch as u64]));
        let weight = cfg.robust_weight(epoch);
        let consistency = ConsistencyConfig {
            lambda: cfg.lambda * weight,
        };
        let fgsm = FgsmConfig {
            alpha: cfg.alpha * weight,
            epsilon: cfg.epsilon * weight,
            ..cfg.fgsm()
        };
        let use_mask = strategy == Strategy::FgsmMask && masking_active(epoch, cfg.epochs, mask.activation_epoch_fraction);

        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut owned: Vec<Vec<f32>> = Vec::new();
            if use_mask {
                for &i in chunk {
                    let x = &data.volumes[i];
                    let mut rng = stream(cfg.seed, &[purpose::MASK, epoch as u64, i as u64]);
                    let draw = draw_mask_params(&mask, &mut rng);
                    let grad = match draw.branch {
                        MaskBranch::Greedy => {
                            masked.1 += 1;
                            Some(model.input_gradient(&[x], &[data.labels[i]])?.remove(0))
                        }
                        MaskBranch::Random => {
                            masked.0 += 1;
                            None
                        }
                    };
                    let sel = select_blocks(draw, &blocks, data.dims, grad.as_deref(), &mut rng)?;
                    owned.push(apply_mask(x, data.dims, &blocks, &sel.blocks, mask.fill_value)?);
                }
            }
            let batch: Vec<&[f32]> = if use_mask {
                owned.iter().map(Vec::as_slice).collect()
            } else {
                data.refs(chunk)
            };

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let objective = match strategy {
                Strategy::Base => {
                    let x = model.input_node(&mut tape, &batch, false)?;
                    let logits = model.forward(&mut tape, &bound, x)?;
                    loss_xent(&mut tape, logits, &labels)?
                }
                Strategy::Fgsm | Strategy::FgsmMask => {
                    // Zero radius: x_adv = x.
                    let adv = if weight > 0.0 {
                        fgsm_attack(&model, &batch, &labels, &fgsm)?
                    } else {
                        Vec::new()
                    };
                    let adv_refs: Vec<&[f32]> = if weight > 0.0 {
                        adv.iter().map(Vec::as_slice).collect()
                    } else {
                        batch.clone()
                    };
                    consistency_graph(&mut tape, &model, &bound, &batch, &adv_refs, &labels, &consistency)?.0
                }
            };
            let grads = tape.grad(objective, &bound.params)?;
            let mut grads: Vec<_> = grads.into_iter().map(|g| tape.tensor(g)).collect();
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut model, &grads);
        }

        let eval_batch = cfg.batch_size.max(8);
        let e = evaluate(&model, data, eval_batch)?;
        log.push(LogRow {
            epoch,
            split: "train".into(),
            loss: e.loss,
            acc: e.acc,
        });
        if let Some(val) = validation {
            let e = evaluate(&model, val, eval_batch)?;
            log.push(LogRow {
                epoch,
                split: "val".into(),
                loss: e.loss,
                acc: e.acc,
            });
        }
    }
    Ok(TrainOutcome { model, log, masked })
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`
/// (no-op for `max_norm = 0`). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<(), RobustError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["epoch", "split", "loss", "acc"])?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| RobustError::Io(e.to_string()))?;
    write_atomic(path, &bytes).map_err(|e| RobustError::Io(format!("{}: {e}", path.display())))
}
