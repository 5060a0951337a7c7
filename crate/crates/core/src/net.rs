//! A small 3D CNN classifier on top of the autograd tape, its checkpoint
//! format, and an SGD-with-momentum optimizer.
//!
//! Input tensors are `[batch, 1, nz, ny, nx]` so that the innermost axis is x,
//! matching the x-fastest layout of [`VoxelGrid`](crate::VoxelGrid) data.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{AutogradError, NodeId, Real, Tape, Tensor};
use crate::io::write_atomic;

pub const NUM_CLASSES: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BVCSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool3d {
        size: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
}

/// Layer stack plus the per-sample input shape `[channels, nz, ny, nx]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv(8) → relu → pool → conv(16) → relu → pool → dense(64) → relu → dense(2)
    pub fn default_for(spatial: [usize; 3]) -> Architecture {
        let conv = |c| LayerSpec::Conv3d {
            out_channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        Architecture {
            input: [1, spatial[0], spatial[1], spatial[2]],
            layers: vec![
                conv(8),
                LayerSpec::Relu,
                LayerSpec::MaxPool3d { size: 2 },
                conv(16),
                LayerSpec::Relu,
                LayerSpec::MaxPool3d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    out_features: NUM_CLASSES,
                },
            ],
        }
    }

    /// Parameter shapes in binding order, after checking the stack end to end.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>, NetError> {
        let bad = |i: usize, msg: String| NetError::Architecture(format!("layer {i}: {msg}"));
        let mut shape: Vec<usize> = self.input.to_vec();
        if shape.contains(&0) {
            return Err(NetError::Architecture(format!("empty input shape {shape:?}")));
        }
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv3d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 4 {
                        return Err(bad(i, "conv3d after flatten".into()));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad(i, "conv3d with a zero size".into()));
                    }
                    let mut next = vec![out_channels];
                    for &d in &shape[1..] {
                        if d + 2 * padding < kernel {
                            return Err(bad(i, format!("kernel {kernel} larger than padded extent {d}")));
                        }
                        next.push((d + 2 * padding - kernel) / stride + 1);
                    }
                    params.push(vec![out_channels, shape[0], kernel, kernel, kernel]);
                    params.push(vec![out_channels]);
                    shape = next;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool3d { size } => {
                    if shape.len() != 4 || size == 0 || shape[1..].iter().any(|&d| d < size) {
                        return Err(bad(i, format!("pool {size} on {shape:?}")));
                    }
                    shape = std::iter::once(shape[0])
                        .chain(shape[1..].iter().map(|&d| d / size))
                        .collect();
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                }
                LayerSpec::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(bad(i, "dense layer needs a flattened input".into()));
                    }
                    if out_features == 0 {
                        return Err(bad(i, "dense with zero outputs".into()));
                    }
                    params.push(vec![out_features, shape[0]]);
                    params.push(vec![out_features]);
                    shape = vec![out_features];
                }
            }
        }
        if shape != [NUM_CLASSES] {
            return Err(NetError::Architecture(format!(
                "network output {shape:?}, expected [{NUM_CLASSES}]"
            )));
        }
        Ok(params)
    }
}

/// Architecture, parameters and the seed they were initialized from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real = f32> {
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
    pub seed: u64,
}

/// Parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<NodeId>,
}

impl<T: Real> ModelState<T> {
    /// He-uniform weights in ±sqrt(6 / fan_in), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NetError> {
        let shapes = arch.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                        .collect()
                };
                Tensor::new(shape, data).expect("shape product matches")
            })
            .collect();
        Ok(ModelState { arch, params, seed })
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            seed: self.seed,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Bound, NetError> {
        let params = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect::<Result<_, _>>()?;
        Ok(Bound { params })
    }

    /// Logits `[batch, 2]` for an input node `[batch, c, nz, ny, nx]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: NodeId) -> Result<NodeId, NetError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 5 || shape[1..] != self.arch.input {
            return Err(AutogradError::ShapeMismatch {
                op: "forward",
                detail: format!("input {shape:?}, model expects [batch, {:?}]", self.arch.input),
            }
            .into());
        }
        let batch = shape[0];
        let mut h = x;
        let mut p = bound.params.iter().copied();
        for layer in &self.arch.layers {
            h = match *layer {
                LayerSpec::Conv3d { stride, padding, .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    let y = tape.conv3d(h, w, stride, padding)?;
                    tape.add_bias(y, b)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::MaxPool3d { size } => tape.maxpool3d(h, size)?,
                LayerSpec::Flatten => {
                    let n = tape.shape(h).iter().product::<usize>() / batch;
                    tape.reshape(h, vec![batch, n])?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    let y = tape.matmul_t(h, false, w, true)?;
                    tape.add_bias(y, b)?
                }
            };
        }
        Ok(h)
    }

    /// Places a batch of equally sized volumes on the tape.
    pub fn input_node(&self, tape: &mut Tape<T>, batch: &[&[T]], requires_grad: bool) -> Result<NodeId, NetError> {
        let per: usize = self.arch.input.iter().product();
        let mut data = Vec::with_capacity(per * batch.len());
        for v in batch {
            if v.len() != per {
                return Err(AutogradError::ShapeMismatch {
                    op: "input",
                    detail: format!("volume has {} values, model expects {per}", v.len()),
                }
                .into());
            }
            data.extend_from_slice(v);
        }
        let mut shape = vec![batch.len()];
        shape.extend_from_slice(&self.arch.input);
        Ok(tape.leaf(Tensor::new(shape, data)?, requires_grad)?)
    }

    /// ∂J/∂x for the batch-mean cross-entropy, one gradient per volume.
    pub fn input_gradient(&self, batch: &[&[T]], labels: &[usize]) -> Result<Vec<Vec<T>>, NetError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = self.input_node(&mut tape, batch, true)?;
        let logits = self.forward(&mut tape, &bound, x)?;
        let j = loss_xent(&mut tape, logits, labels)?;
        let g = tape.grad(j, &[x])?[0];
        let per: usize = self.arch.input.iter().product();
        Ok(tape.value(g).chunks_exact(per).map(<[T]>::to_vec).collect())
    }

    /// Mean cross-entropy of a batch, evaluated without gradients.
    pub fn loss(&self, batch: &[&[T]], labels: &[usize]) -> Result<T, NetError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = self.input_node(&mut tape, batch, false)?;
        let logits = self.forward(&mut tape, &bound, x)?;
        let j = loss_xent(&mut tape, logits, labels)?;
        Ok(tape.scalar(j))
    }

    pub fn logits(&self, batch: &[&[T]]) -> Result<Vec<[T; NUM_CLASSES]>, NetError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = self.input_node(&mut tape, batch, false)?;
        let logits = self.forward(&mut tape, &bound, x)?;
        Ok(tape
            .value(logits)
            .chunks_exact(NUM_CLASSES)
            .map(|r| [r[0], r[1]])
            .collect())
    }

    /// Class indices by arg-max; ties go to class 0.
    pub fn predict(&self, batch: &[&[T]]) -> Result<Vec<usize>, NetError> {
        Ok(self
            .logits(batch)?
            .into_iter()
            .map(|l| usize::from(l[1] > l[0]))
            .collect())
    }
}

fn one_hot<T: Real>(labels: &[usize]) -> Result<Rc<Vec<T>>, AutogradError> {
    let mut v = vec![T::zero(); labels.len() * NUM_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        if y >= NUM_CLASSES {
            return Err(AutogradError::ShapeMismatch {
                op: "loss_xent",
                detail: format!("label {y} out of range"),
            });
        }
        v[i * NUM_CLASSES + y] = T::one();
    }
    Ok(Rc::new(v))
}

/// Σ_i −log softmax(logits_i)[y_i]
pub fn loss_xent_sum<T: Real>(tape: &mut Tape<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutogradError> {
    if tape.shape(logits) != [labels.len(), NUM_CLASSES] {
        return Err(AutogradError::ShapeMismatch {
            op: "loss_xent",
            detail: format!("logits {:?} for {} labels", tape.shape(logits), labels.len()),
        });
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul_const(ls, one_hot(labels)?)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -T::one())
}

/// Batch mean of −log softmax(logits_i)[y_i].
pub fn loss_xent<T: Real>(tape: &mut Tape<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutogradError> {
    let s = loss_xent_sum(tape, logits, labels)?;
    let n = T::from_usize(labels.len()).unwrap();
    tape.scale(s, T::one() / n)
}

/// SGD with classical momentum: v ← μv + g; θ ← θ − ηv.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Sgd {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut ModelState<f32>, grads: &[Tensor<f32>]) {
        assert_eq!(model.params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in model.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    seed: u64,
    dtype: String,
    shapes: Vec<Vec<usize>>,
}

/// Layout: magic, version (u32 LE), header length (u32 LE), JSON header,
/// f32 LE parameters, SHA-256 of everything before it.
pub fn encode_checkpoint(model: &ModelState<f32>) -> Vec<u8> {
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        seed: model.seed,
        dtype: "f32".into(),
        shapes: model.params.iter().map(|p| p.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.num_parameters() + 32);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState<f32>, NetError> {
    let corrupt = |m: &str| NetError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 16 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NetError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + header_len).ok_or_else(|| corrupt("header overruns file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| NetError::CorruptCheckpoint(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(NetError::CorruptCheckpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let expected = header.arch.param_shapes()?;
    if expected != header.shapes {
        return Err(corrupt("parameter shapes disagree with architecture"));
    }
    let mut data = body[16 + header_len..].chunks_exact(4);
    let total: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if data.len() != total || !data.remainder().is_empty() {
        return Err(NetError::CorruptCheckpoint(format!(
            "expected {total} parameters, found {} bytes",
            body.len() - 16 - header_len
        )));
    }
    let mut params = Vec::with_capacity(expected.len());
    for shape in expected {
        let n = shape.iter().product();
        let values: Vec<f32> = data
            .by_ref()
            .take(n)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite parameter"));
        }
        params.push(Tensor::new(shape, values)?);
    }
    Ok(ModelState {
        arch: header.arch,
        params,
        seed: header.seed,
    })
}

pub fn save_checkpoint(model: &ModelState<f32>, path: &Path) -> Result<(), NetError> {
    write_atomic(path, &encode_checkpoint(model)).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
