//! Self-supervised pretraining: AdamW with decoupled weight decay, a one-cycle
//! learning-rate schedule, global gradient clipping, per-epoch ACMSE on a
//! held-out split, and fully resumable checkpoints.
//!
//! Checkpoint layout: one JSON manifest line (format version, config echo,
//! counters, metric history, ordered {name, shape, offset} entries) followed
//! by a raw little-endian f32 blob of every tensor back to back. Parameters
//! and optimizer moments are snapped to the f32 grid after every step, so the
//! round-trip is lossless and resume is bit-exact.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrialSet;
use crate::graph::Graph;
use crate::masking::{sample_random_mask, sample_tsr_mask, MaskError, MaskSpec};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::montage::bundled;
use crate::objective::{acmse, tf_loss, LossWeights};
use crate::ssm::SsdKernel;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("unknown dataset montage '{0}'")]
    Montage(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("non-finite loss at step {step}; last good checkpoint: {}",
            .last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("training config: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// schedule

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub initial_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warmup_fraction: f64,
    /// 0 lets the trainer derive epochs x steps-per-epoch.
    pub total_steps: u64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            initial_lr: 2.5e-4,
            max_lr: 5e-4,
            final_lr: 5e-6,
            warmup_fraction: 0.10,
            total_steps: 0,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) {
        assert!(
            self.initial_lr <= self.max_lr && self.final_lr <= self.initial_lr,
            "need final_lr <= initial_lr <= max_lr"
        );
        assert!(
            self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0,
            "warmup fraction must be in (0, 1)"
        );
    }
}

/// Linear ramp initial -> max over the warmup fraction, then cosine decay
/// max -> final over the remainder.
pub fn onecycle_lr(step: u64, spec: &ScheduleSpec) -> f64 {
    spec.validate();
    assert!(spec.total_steps > 0, "schedule total_steps unset");
    assert!(step <= spec.total_steps, "step {} out of range", step);
    let warmup = (spec.warmup_fraction * spec.total_steps as f64).round().max(1.0) as u64;
    if step <= warmup {
        let f = step as f64 / warmup as f64;
        spec.initial_lr + (spec.max_lr - spec.initial_lr) * f
    } else {
        let f = (step - warmup) as f64 / (spec.total_steps - warmup) as f64;
        spec.final_lr
            + (spec.max_lr - spec.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moments in `ModelParams::visit` order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        OptimizerState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One AdamW update of a single tensor. `step` is the post-increment counter
/// used for bias correction. Panics on a non-finite gradient, naming `name`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    w: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
    name: &str,
) {
    assert_eq!(w.shape(), grad.shape(), "gradient shape mismatch for {name}");
    assert!(
        grad.all_finite(),
        "non-finite gradient for parameter '{name}'"
    );
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..w.len() {
        let g = grad.data()[i];
        let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        let wi = w.data()[i];
        w.data_mut()[i] = wi - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * wi);
    }
}

/// AdamW over the whole parameter set; `grads` in visit order. Parameters and
/// moments are rounded to the f32 grid afterwards so checkpoints are lossless.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let step = state.step;
    let mut i = 0usize;
    params.visit_mut(&mut |name, w| {
        adamw_update(
            w,
            &grads[i],
            &mut state.m[i],
            &mut state.v[i],
            step,
            lr,
            cfg,
            &name,
        );
        w.round_to_f32();
        state.m[i].round_to_f32();
        state.v[i].round_to_f32();
        i += 1;
    });
    assert_eq!(i, grads.len(), "gradient count mismatch");
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Trailing fraction of trials held out for the epoch metric; 0 evaluates
    /// on the training trials.
    pub val_fraction: f64,
    /// Evaluate ACMSE under masking (matching the objective's conditions);
    /// false evaluates on clean inputs.
    pub acmse_on_masked: bool,
    /// Write `checkpoint.bin` every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub schedule: ScheduleSpec,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            seed: 0,
            clip_norm: 1.0,
            val_fraction: 0.2,
            acmse_on_masked: true,
            checkpoint_every: 0,
            schedule: ScheduleSpec::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acmse: f64,
}

pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the epoch's batch-order shuffle.
pub fn shuffle_seed(seed: u64, epoch: u64) -> u64 {
    mix(seed, epoch, 0)
}

/// Seed for the mask of batch slot `slot` at 1-based global step `step`.
pub fn mask_seed(seed: u64, step: u64, slot: u64) -> u64 {
    mix(seed, step, slot)
}

pub struct Trainer {
    pub model: Model,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    /// Loss of every step taken so far (replay oracle for tests).
    pub step_losses: Vec<f64>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        cfg.schedule.validate();
        let opt = OptimizerState::new(&model.params);
        Trainer {
            model,
            opt,
            cfg,
            epoch: 0,
            history: Vec::new(),
            step_losses: Vec::new(),
            last_checkpoint: None,
        }
    }

    fn sample_mask(&self, t: usize, seed: u64) -> Result<MaskSpec, MaskError> {
        let m = &self.model.config.mask;
        if m.temporal_blocks {
            sample_tsr_mask(t, m.ratio, m.blocks, m.alpha_min, m.alpha_max, seed)
        } else {
            sample_random_mask(t, m.ratio, seed)
        }
    }

    /// Forward a batch and return (loss node value, graph, output) — shared by
    /// the training step and the replay oracle.
    fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        montage_in: &crate::montage::Montage,
        masks: &[MaskSpec],
    ) -> (crate::graph::ValId, crate::model::ForwardOut) {
        let out = self
            .model
            .forward(g, batch, montage_in, masks, SsdKernel::Scan);
        let w = LossWeights {
            alpha: self.model.config.loss_alpha,
            beta: self.model.config.loss_beta,
        };
        let loss = tf_loss(g, out.recon, out.target, &w);
        (loss, out)
    }

    /// Run the remaining epochs. Deterministic: batch order, masks, and
    /// schedule depend only on (seed, epoch, step).
    pub fn run(&mut self, set: &TrialSet, out_dir: Option<&Path>) -> Result<(), TrainError> {
        self.run_until(set, out_dir, self.cfg.epochs)
    }

    /// Run until `stop_epoch` (at most `cfg.epochs`); the schedule always
    /// spans the full configured run, so an interrupted-and-resumed training
    /// matches the uninterrupted one exactly.
    pub fn run_until(
        &mut self,
        set: &TrialSet,
        out_dir: Option<&Path>,
        stop_epoch: usize,
    ) -> Result<(), TrainError> {
        let montage_in = bundled::by_name(&set.montage)
            .ok_or_else(|| TrainError::Montage(set.montage.clone()))?;
        let n = set.n_trials();
        if n == 0 {
            return Err(TrainError::Config("empty trial set".into()));
        }
        let n_val = ((n as f64) * self.cfg.val_fraction).round() as usize;
        if n_val >= n {
            return Err(TrainError::Config("validation split leaves no training data".into()));
        }
        let train_idx: Vec<usize> = (0..n - n_val).collect();
        let val_idx: Vec<usize> = (n - n_val..n).collect();
        let steps_per_epoch = train_idx.len().div_ceil(self.cfg.batch_size) as u64;
        let mut schedule = self.cfg.schedule;
        if schedule.total_steps == 0 {
            schedule.total_steps = self.cfg.epochs as u64 * steps_per_epoch;
        }
        let t = set.n_samples();

        while self.epoch < stop_epoch.min(self.cfg.epochs) {
            let epoch = self.epoch;
            let mut order = train_idx.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(self.cfg.seed, epoch as u64));
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            let mut lr = self.cfg.schedule.initial_lr;
            for chunk in order.chunks(self.cfg.batch_size) {
                let step = self.opt.step; // pre-step counter, monotone global
                let batch = set.subset(chunk);
                let masks: Result<Vec<MaskSpec>, MaskError> = (0..chunk.len())
                    .map(|slot| self.sample_mask(t, mask_seed(self.cfg.seed, step + 1, slot as u64)))
                    .collect();
                let masks = masks?;
                let mut g = Graph::new();
                let (loss, out) = self.batch_loss(&mut g, &batch.data, &montage_in, &masks);
                let loss_val = g.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(TrainError::NonFinite {
                        step: step + 1,
                        last_checkpoint: self.last_checkpoint.clone(),
                    });
                }
                g.backward(loss);
                let ids = out.vars.ids();
                let mut grads: Vec<Tensor> = Vec::with_capacity(ids.len());
                for (id, (_, p)) in ids.iter().zip(self.model.params.named()) {
                    grads.push(
                        g.grad(*id)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(p.shape())),
                    );
                }
                clip_global_norm(&mut grads, self.cfg.clip_norm);
                lr = onecycle_lr((step + 1).min(schedule.total_steps), &schedule);
                adamw_step(
                    &mut self.model.params,
                    &grads,
                    &mut self.opt,
                    lr,
                    &self.cfg.adam,
                );
                self.step_losses.push(loss_val);
                loss_sum += loss_val;
                batches += 1;
            }

            let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
            let val_acmse = self.eval_acmse(set, eval_idx, &montage_in, epoch)?;
            self.history.push(EpochMetrics {
                epoch,
                lr,
                train_loss: loss_sum / batches.max(1) as f64,
                val_acmse,
            });
            self.epoch += 1;

            if let Some(dir) = out_dir {
                let due = self.cfg.checkpoint_every > 0
                    && self.epoch % self.cfg.checkpoint_every == 0;
                if due || self.epoch == self.cfg.epochs {
                    let path = dir.join("checkpoint.bin");
                    self.save(&path)?;
                    self.last_checkpoint = Some(path);
                }
            }
        }
        Ok(())
    }

    /// ACMSE between reconstruction and target over the given trials,
    /// masked or clean per the config.
    fn eval_acmse(
        &self,
        set: &TrialSet,
        indices: &[usize],
        montage_in: &crate::montage::Montage,
        epoch: usize,
    ) -> Result<f64, TrainError> {
        let t = set.n_samples();
        let mut recons = Vec::new();
        let mut targets = Vec::new();
        for chunk in indices.chunks(self.cfg.batch_size) {
            let batch = set.subset(chunk);
            let masks: Vec<MaskSpec> = if self.cfg.acmse_on_masked {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(slot, _)| {
                        self.sample_mask(t, mix(self.cfg.seed ^ 0xE7A1_5EED, epoch as u64, slot as u64))
                    })
                    .collect::<Result<_, _>>()?
            } else {
                vec![MaskSpec {
                    sequence_length: t,
                    visible_blocks: vec![(0, t)],
                    mask_ratio: 0.0,
                    block_count: 1,
                    alpha_min: 0.0,
                    alpha_max: f64::INFINITY,
                }]
            };
            let mut g = Graph::inference();
            let out = self
                .model
                .forward(&mut g, &batch.data, montage_in, &masks, SsdKernel::Scan);
            recons.push(g.value(out.recon).clone());
            targets.push(g.value(out.target).clone());
        }
        let recon = concat_trials(&recons);
        let target = concat_trials(&targets);
        Ok(acmse(&recon, &target))
    }
}

fn concat_trials(parts: &[Tensor]) -> Tensor {
    let (c, t) = (parts[0].shape()[1], parts[0].shape()[2]);
    let n: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(n * c * t);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[n, c, t], data)
}

// ---------------------------------------------------------------------------
// checkpointing

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    history: Vec<EpochMetrics>,
    entries: Vec<Entry>,
}

fn seed_to_tensor(seed: u64) -> Tensor {
    Tensor::new(
        &[4],
        (0..4).map(|i| ((seed >> (16 * i)) & 0xFFFF) as f64).collect(),
    )
}

fn seed_from_tensor(t: &Tensor) -> u64 {
    t.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as u64 & 0xFFFF) << (16 * i))
        .fold(0, |a, b| a | b)
}

impl Trainer {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (name, m) in names.iter().zip(&self.opt.m) {
            tensors.push((format!("opt.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.opt.v) {
            tensors.push((format!("opt.v.{name}"), v.clone()));
        }
        tensors.push(("opt.step".into(), Tensor::new(&[1], vec![self.opt.step as f64])));
        tensors.push(("rng.seed".into(), seed_to_tensor(self.cfg.seed)));

        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0usize;
        for (name, t) in &tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            model_config: self.model.config.clone(),
            train_config: self.cfg.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            entries,
        };
        let mut f = std::fs::File::create(path)?;
        let mut line = serde_json::to_string(&manifest)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        for (_, t) in &tensors {
            for v in t.data() {
                f.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Trainer, TrainError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| TrainError::Checkpoint("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::Version(manifest.format_version));
        }
        let blob = &bytes[nl + 1..];
        let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 4 {
            return Err(TrainError::Checkpoint(format!(
                "blob size {} != expected {}",
                blob.len(),
                total * 4
            )));
        }
        let read_tensor = |e: &Entry| -> Tensor {
            let len: usize = e.shape.iter().product();
            let data: Vec<f64> = blob[e.offset * 4..(e.offset + len) * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Tensor::new(&e.shape, data)
        };
        let find = |name: &str| -> Result<&Entry, TrainError> {
            manifest
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor '{name}'")))
        };

        let mut model = Model::init(manifest.model_config.clone(), 0);
        let mut err = None;
        model.params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match find(&name) {
                Ok(e) if e.shape == t.shape() => *t = read_tensor(e),
                Ok(e) => {
                    err = Some(TrainError::Checkpoint(format!(
                        "shape mismatch for '{name}': checkpoint {:?}, config {:?}",
                        e.shape,
                        t.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut opt = OptimizerState::new(&model.params);
        let mut i = 0usize;
        let mut err = None;
        model.params.visit(&mut |name, t| {
            if err.is_some() {
                return;
            }
            for (prefix, store) in [("opt.m.", &mut opt.m), ("opt.v.", &mut opt.v)] {
                match find(&format!("{prefix}{name}")) {
                    Ok(e) if e.shape == t.shape() => store[i] = read_tensor(e),
                    Ok(_) => {
                        err = Some(TrainError::Checkpoint(format!(
                            "moment shape mismatch for '{name}'"
                        )))
                    }
                    Err(e) => err = Some(e),
                }
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        opt.step = read_tensor(find("opt.step")?).item() as u64;
        let seed = seed_from_tensor(&read_tensor(find("rng.seed")?));
        let mut cfg = manifest.train_config;
        cfg.seed = seed;
        Ok(Trainer {
            model,
            opt,
            cfg,
            epoch: manifest.epoch,
            history: manifest.history,
            step_losses: Vec::new(),
            last_checkpoint: None,
        })
    }
}
