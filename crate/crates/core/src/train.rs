//! Masked heatmap-regression loss, optimizers, the deterministic training
//! loop, and bit-exact checkpointing.

use std::fs;
use std::path::Path;

use crate::autodiff::{GradTape, NodeId, ParamStore};
use crate::binio::{fnv1a, put_f64, put_str, put_u32, put_u64, Reader};
use crate::data::pipeline::Sample;
use crate::error::{Error, Result};
use crate::network::{build_network, BackboneKind, LandmarkNet, NetworkConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

const CHECKPOINT_VERSION: u32 = 1;
/// Stream index offsets under the master seed, so the initializer, the
/// trainer's own rng, and each epoch's shuffle never share a stream.
const RNG_STREAM: u64 = 1 << 32;
const SHUFFLE_STREAM_BASE: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer '{other}' (expected sgd_momentum or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    /// Adam first/second moment decay.
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Multiplier applied to target heatmaps inside the loss. Peak-1
    /// Gaussians on a mostly-zero canvas give the head layer a descent
    /// direction ("output zero everywhere") that starves feature learning at
    /// small widths; scaling the regression target amplifies the per-bump
    /// residual without changing the decoded argmax. 1.0 is plain MSE.
    pub target_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            target_scale: 1.0,
            epochs: 1,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        for (what, v) in [
            ("momentum", self.momentum),
            ("beta1", self.betas.0),
            ("beta2", self.betas.1),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{what} must be in [0, 1), got {v}")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.target_scale > 0.0) || !self.target_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "target_scale must be positive and finite, got {}",
                self.target_scale
            )));
        }
        Ok(())
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Per-parameter moment buffers; `m` is unused under SGD but kept allocated
/// so the checkpoint layout does not depend on the optimizer kind.
#[derive(Debug, Clone)]
pub struct Optimizer {
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Optimizer {
            step_count: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients accumulated in `store`, walking
    /// parameters in registration order.
    pub fn step(&mut self, config: &OptimizerConfig, store: &mut ParamStore) {
        let lr = config.learning_rate;
        let t = self.step_count + 1;
        for i in 0..store.len() {
            let p = store.param_mut(crate::autodiff::ParamId(i));
            let n = p.value.numel();
            let (values, grads) = (p.value.data_mut(), p.grad.data());
            match config.kind {
                OptimizerKind::SgdMomentum => {
                    let vel = &mut self.v[i];
                    for j in 0..n {
                        let g = grads[j] + config.weight_decay * values[j];
                        vel[j] = config.momentum * vel[j] + g;
                        values[j] -= lr * vel[j];
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = config.betas;
                    let bc1 = 1.0 - b1.powi(t as i32);
                    let bc2 = 1.0 - b2.powi(t as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..n {
                        let g = grads[j] + config.weight_decay * values[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        values[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        self.step_count = t;
    }
}

/// Mean squared error over the elements of unmasked channels only. Masked
/// channels contribute nothing to the value or the gradient. A batch with
/// zero unmasked channels yields loss 0 by convention (the training loop
/// rejects such batches before calling this).
pub fn masked_mse_loss(
    tape: &mut GradTape,
    pred: NodeId,
    target: &Tensor,
    mask: &[[bool; 8]],
) -> Result<NodeId> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[1] != 8 {
        return Err(Error::ShapeMismatch {
            op: "masked_mse_loss",
            detail: format!("expected predictions [N,8,S,S], got {shape:?}"),
        });
    }
    if shape != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse_loss",
            detail: format!(
                "predictions {shape:?} vs targets {:?}",
                target.shape()
            ),
        });
    }
    if mask.len() != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "masked_mse_loss",
            detail: format!("{} mask rows for batch of {}", mask.len(), shape[0]),
        });
    }

    let unmasked: usize = mask.iter().flatten().filter(|&&b| b).count();
    if unmasked == 0 {
        return tape.leaf(Tensor::zeros(&[]));
    }

    let plane = shape[2] * shape[3];
    let mut weights = vec![0.0f64; shape[0] * 8 * plane];
    for (n, row) in mask.iter().enumerate() {
        for (c, &keep) in row.iter().enumerate() {
            if keep {
                let base = (n * 8 + c) * plane;
                weights[base..base + plane].fill(1.0);
            }
        }
    }
    let weights = tape.leaf(Tensor::from_vec(shape.clone(), weights)?)?;
    let target = tape.leaf(target.clone())?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let kept = tape.mul(sq, weights)?;
    let total = tape.sum_all(kept)?;
    tape.scale(total, 1.0 / (unmasked * plane) as f64)
}

/// Stack samples (by index) into batch tensors: images [N,3,S,S], targets
/// [N,8,S,S], and per-sample masks.
pub fn stack_batch(
    samples: &[Sample],
    indices: &[usize],
) -> Result<(Tensor, Tensor, Vec<[bool; 8]>)> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let first = &samples[indices[0]];
    let s = first.image.shape()[1];
    let img_len = 3 * s * s;
    let tgt_len = 8 * s * s;
    let mut images = Vec::with_capacity(indices.len() * img_len);
    let mut targets = Vec::with_capacity(indices.len() * tgt_len);
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &samples[i];
        if sample.image.shape() != first.image.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                detail: format!(
                    "sample '{}' is {:?}, batch is {:?}",
                    sample.image_id,
                    sample.image.shape(),
                    first.image.shape()
                ),
            });
        }
        images.extend_from_slice(sample.image.data());
        targets.extend_from_slice(sample.target.data());
        masks.push(sample.mask);
    }
    Ok((
        Tensor::from_vec(vec![indices.len(), 3, s, s], images)?,
        Tensor::from_vec(vec![indices.len(), 8, s, s], targets)?,
        masks,
    ))
}

/// The complete mutable state of a training run. Everything here lands in
/// the checkpoint, which is what makes resume bit-exact.
pub struct TrainState {
    pub net: LandmarkNet,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    pub opt_config: OptimizerConfig,
    /// Completed optimization steps since initialization.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Batches consumed within the current epoch.
    pub epoch_step: u64,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(net_config: &NetworkConfig, opt_config: OptimizerConfig) -> Result<Self> {
        opt_config.validate()?;
        let (net, store) = build_network(net_config, opt_config.seed)?;
        let optimizer = Optimizer::new(&store);
        let rng = Rng::seed_stream(opt_config.seed, RNG_STREAM);
        Ok(TrainState {
            net,
            store,
            optimizer,
            opt_config,
            step: 0,
            epoch: 0,
            epoch_step: 0,
            rng,
        })
    }

    /// One optimization step on a prepared batch: forward (train mode),
    /// masked loss, backward, update, gradients cleared.
    pub fn train_step(
        &mut self,
        images: &Tensor,
        targets: &Tensor,
        masks: &[[bool; 8]],
    ) -> Result<f64> {
        if masks.iter().flatten().all(|&b| !b) {
            return Err(Error::DegenerateBatch);
        }
        self.store.zero_grads();
        let step_index = self.step;
        let scale = self.opt_config.target_scale;
        let scaled;
        let targets = if scale == 1.0 {
            targets
        } else {
            let data = targets.data().iter().map(|v| v * scale).collect();
            scaled = Tensor::from_vec(targets.shape().to_vec(), data)?;
            &scaled
        };
        let run = |state: &mut Self| -> Result<f64> {
            let mut tape = GradTape::new();
            let x = tape.leaf(images.clone())?;
            let pred = state.net.forward(&mut tape, &mut state.store, x, true)?;
            let loss = masked_mse_loss(&mut tape, pred, targets, masks)?;
            let value = tape.value(loss).item()?;
            tape.backward(loss)?;
            tape.export_grads(&mut state.store)?;
            Ok(value)
        };
        let value = run(self).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step: step_index },
            other => other,
        })?;
        self.optimizer.step(&self.opt_config, &mut self.store);
        self.store.zero_grads();
        self.step += 1;
        Ok(value)
    }

    /// The deterministic sample order for an epoch. Derived statelessly from
    /// (seed, epoch) so a resumed run reconstructs the order mid-epoch.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::seed_stream(self.opt_config.seed, SHUFFLE_STREAM_BASE + self.epoch);
        rng.shuffle(&mut order);
        order
    }

    fn batches_per_epoch(&self, n: usize) -> u64 {
        (n as u64).div_ceil(self.opt_config.batch_size as u64)
    }

    /// Run `steps` optimization steps over shuffled batches, crossing epoch
    /// boundaries as needed. Returns (step index, loss) per step, where the
    /// index counts completed steps (first step of a fresh run is 1).
    pub fn run_steps(&mut self, samples: &[Sample], steps: u64) -> Result<Vec<(u64, f64)>> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let bs = self.opt_config.batch_size;
        let per_epoch = self.batches_per_epoch(samples.len());
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let order = self.epoch_order(samples.len());
            let b = self.epoch_step as usize;
            let batch = &order[b * bs..((b + 1) * bs).min(order.len())];
            let (images, targets, masks) = stack_batch(samples, batch)?;
            let loss = self.train_step(&images, &targets, &masks)?;
            log.push((self.step, loss));
            self.epoch_step += 1;
            if self.epoch_step == per_epoch {
                self.epoch += 1;
                self.epoch_step = 0;
            }
        }
        Ok(log)
    }

    /// Run whole epochs (the remainder of the current epoch first).
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<Vec<(u64, f64)>> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let remaining = self.batches_per_epoch(samples.len()) - self.epoch_step;
        self.run_steps(samples, remaining)
    }
}

/// Serialize the full training state. Layout: format version, network
/// config, optimizer config, loop counters, rng state, the named-tensor
/// table (parameters then buffers, same entry layout as the weight export),
/// optimizer moments, and a trailing FNV-1a checksum over all prior bytes.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    put_u32(&mut buf, CHECKPOINT_VERSION);

    let nc = &state.net.config;
    put_u64(&mut buf, nc.input_size as u64);
    put_u32(&mut buf, match nc.backbone {
        BackboneKind::Vgg16 => 0,
        BackboneKind::Toy => 1,
    });
    put_f64(&mut buf, nc.width_multiplier);
    put_u64(&mut buf, nc.k as u64);
    put_u64(&mut buf, nc.num_landmarks as u64);
    put_u64(&mut buf, nc.decoder_stages as u64);

    let oc = &state.opt_config;
    put_u32(&mut buf, match oc.kind {
        OptimizerKind::SgdMomentum => 0,
        OptimizerKind::Adam => 1,
    });
    put_f64(&mut buf, oc.learning_rate);
    put_f64(&mut buf, oc.momentum);
    put_f64(&mut buf, oc.betas.0);
    put_f64(&mut buf, oc.betas.1);
    put_f64(&mut buf, oc.weight_decay);
    put_f64(&mut buf, oc.target_scale);
    put_u64(&mut buf, oc.epochs as u64);
    put_u64(&mut buf, oc.batch_size as u64);
    put_u64(&mut buf, oc.seed);

    put_u64(&mut buf, state.step);
    put_u64(&mut buf, state.epoch);
    put_u64(&mut buf, state.epoch_step);
    for word in state.rng.state() {
        put_u64(&mut buf, word);
    }

    let total = state.store.iter().count() + state.store.iter_buffers().count();
    put_u64(&mut buf, total as u64);
    let entries = state
        .store
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .chain(
            state
                .store
                .iter_buffers()
                .map(|(_, b)| (b.name.as_str(), &b.value)),
        );
    for (name, value) in entries {
        put_str(&mut buf, name);
        put_u32(&mut buf, value.shape().len() as u32);
        for &d in value.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in value.data() {
            put_f64(&mut buf, v);
        }
    }

    put_u64(&mut buf, state.optimizer.step_count);
    for moments in [&state.optimizer.m, &state.optimizer.v] {
        for slot in moments {
            put_u64(&mut buf, slot.len() as u64);
            for &v in slot {
                put_f64(&mut buf, v);
            }
        }
    }

    let checksum = fnv1a(&buf);
    put_u64(&mut buf, checksum);
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Restore a [`TrainState`] saved by [`save_checkpoint`]. The network is
/// rebuilt from the stored config, then every tensor is overwritten from the
/// table, so the result is bit-identical to the saved state.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if data.len() < 12 {
        return Err(Error::Format {
            what: "checkpoint".into(),
            msg: format!("{} bytes is too short for a checkpoint", data.len()),
        });
    }
    let (body, tail) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if fnv1a(body) != stored {
        return Err(Error::Checksum);
    }

    let mut r = Reader::new(body, "checkpoint");
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let net_config = NetworkConfig {
        input_size: r.u64()? as usize,
        backbone: match r.u32()? {
            0 => BackboneKind::Vgg16,
            1 => BackboneKind::Toy,
            other => {
                return Err(Error::Format {
                    what: "checkpoint".into(),
                    msg: format!("unknown backbone tag {other}"),
                })
            }
        },
        width_multiplier: r.f64()?,
        k: r.u64()? as usize,
        num_landmarks: r.u64()? as usize,
        decoder_stages: r.u64()? as usize,
    };
    let opt_config = OptimizerConfig {
        kind: match r.u32()? {
            0 => OptimizerKind::SgdMomentum,
            1 => OptimizerKind::Adam,
            other => {
                return Err(Error::Format {
                    what: "checkpoint".into(),
                    msg: format!("unknown optimizer tag {other}"),
                })
            }
        },
        learning_rate: r.f64()?,
        momentum: r.f64()?,
        betas: (r.f64()?, r.f64()?),
        weight_decay: r.f64()?,
        target_scale: r.f64()?,
        epochs: r.u64()? as usize,
        batch_size: r.u64()? as usize,
        seed: r.u64()?,
    };
    let step = r.u64()?;
    let epoch = r.u64()?;
    let epoch_step = r.u64()?;
    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];

    let (net, mut store) = build_network(&net_config, opt_config.seed)?;
    let count = r.u64()?;
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let values = r.f64_vec(shape.iter().product())?;
        let tensor = Tensor::from_vec(shape.clone(), values)?;
        if let Some(id) = store.id_by_name(&name) {
            if store.param(id).value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    detail: format!("parameter '{name}' shape {shape:?} does not match the config"),
                });
            }
            store.param_mut(id).value = tensor;
        } else if let Some(id) = store.buffer_id_by_name(&name) {
            if store.buffer(id).value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    detail: format!("buffer '{name}' shape {shape:?} does not match the config"),
                });
            }
            store.buffer_mut(id).value = tensor;
        } else {
            return Err(Error::UnknownParameter(name));
        }
    }

    let mut optimizer = Optimizer::new(&store);
    optimizer.step_count = r.u64()?;
    for slot_set in [&mut optimizer.m, &mut optimizer.v] {
        for (i, slot) in slot_set.iter_mut().enumerate() {
            let len = r.u64()? as usize;
            if len != slot.len() {
                return Err(Error::Format {
                    what: "checkpoint".into(),
                    msg: format!(
                        "optimizer moment {i} has {len} values, parameter has {}",
                        slot.len()
                    ),
                });
            }
            *slot = r.f64_vec(len)?;
        }
    }
    r.expect_end()?;

    Ok(TrainState {
        net,
        store,
        optimizer,
        opt_config,
        step,
        epoch,
        epoch_step,
        rng: Rng::from_state(rng_state),
    })
}
