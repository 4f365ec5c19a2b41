//! Deterministic pretraining loop.
//!
//! Determinism is the design constraint everything here serves: two runs
//! with the same seed produce bit-identical loss curves, and a run resumed
//! from a checkpoint is bit-identical to one that never stopped. To get
//! that without serializing generator state, every random choice is a pure
//! function of the seed and the step counter — batch order comes from a
//! per-epoch keyed stream, masking draws from a per-step keyed stream — so
//! a resumed trainer rebuilds exactly the randomness it would have used.
//!
//! The optimizer is the adaptive-moment family with decoupled weight decay
//! (decay multiplies the raw parameter, not the gradient) and bias-corrected
//! moments. Full-scale encoder recipes for this model family run warmup
//! 2000 with betas (0.9, 0.98) and decay 0.01; decoder recipes use (0.9,
//! 0.95) and decay 0.1. The desk-scale defaults below keep the shape of
//! that recipe at a fraction of the step budget.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{mask_batch, MaskedBatch, PackedDataset};
use crate::model::{Checkpoint, CheckpointArray, Model, Objective, Params};
use crate::rng::SeedStreams;
use crate::tensor::Tape;
use crate::{LabError, Result};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub max_grad_norm: f64,
    /// Adaptive-moment denominator epsilon.
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 2000,
            warmup_steps: 100,
            batch_size: 32,
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.max_steps {
            return Err(LabError::config(
                "train.warmup_steps",
                format!("{} must be below max_steps {}", self.warmup_steps, self.max_steps),
            ));
        }
        if self.max_grad_norm <= 0.0 {
            return Err(LabError::config("train.max_grad_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LabError::config("train.batch_size", "must be positive"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(LabError::config("train.peak_lr", "must be positive and finite"));
        }
        for (field, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(LabError::config(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(LabError::config("train.weight_decay", "must be non-negative"));
        }
        if self.eps <= 0.0 {
            return Err(LabError::config("train.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based step count: a linear ramp from 0 to
/// `peak_lr` over the warmup, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.max_steps {
        return 0.0;
    }
    if step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps.max(1) as f64;
    }
    cfg.peak_lr * (cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64
}

/// Metrics for one completed optimization step. `grad_norm` is the global
/// norm before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Write step metrics as CSV with a fixed `step,loss,lr,grad_norm` header.
pub fn write_metrics_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,loss,lr,grad_norm\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, r.grad_norm));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Sequence indices for one step: each epoch shuffles the whole dataset
/// with a stream keyed by the epoch number, so any step's batch can be
/// recomputed without replaying earlier steps.
pub fn batch_indices(
    streams: &SeedStreams,
    n_sequences: usize,
    batch_size: usize,
    step: usize,
) -> Vec<usize> {
    let per_epoch = n_sequences / batch_size;
    assert!(per_epoch > 0, "dataset smaller than one batch");
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut perm: Vec<usize> = (0..n_sequences).collect();
    perm.shuffle(&mut streams.keyed("data", epoch as u64));
    perm[slot * batch_size..(slot + 1) * batch_size].to_vec()
}

/// Scale `grads` so their global norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let coef = max_norm / (total + 1e-6);
    if coef < 1.0 {
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= coef;
            }
        }
    }
    total
}

/// One bias-corrected adaptive-moment update with decoupled decay.
/// `t` is the 1-based update count; `decay` is ignored when false so
/// biases and normalization vectors never shrink toward zero.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * theta[i]);
    }
}

/// First and second moment buffers, aligned with the parameter order.
#[derive(Debug, Clone)]
struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn zeros(params: &Params) -> OptState {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        OptState { v: m.clone(), m }
    }
}

/// The training loop: owns the model, the optimizer state, and the step
/// counter. All randomness derives from `TrainConfig::seed`.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: OptState,
    streams: SeedStreams,
    step: usize,
    records: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let opt = OptState::zeros(model.params());
        let streams = SeedStreams::new(cfg.seed);
        Ok(Trainer {
            cfg,
            model,
            opt,
            streams,
            step: 0,
            records: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Completed optimization steps.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Metrics recorded by this process (a resumed trainer starts empty).
    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Run one optimization step against the dataset.
    pub fn train_step(&mut self, data: &PackedDataset) -> Result<StepRecord> {
        let n_seq = data.num_sequences();
        if n_seq < self.cfg.batch_size {
            return Err(LabError::config(
                "train.batch_size",
                format!("{} exceeds the {n_seq} available sequences", self.cfg.batch_size),
            ));
        }
        let seq_len = data.seq_len();
        let seqs = batch_indices(&self.streams, n_seq, self.cfg.batch_size, self.step);
        let ids = data.gather_batch(&seqs);

        let tape = Tape::new();
        let out = match self.model.cfg().objective {
            Objective::Mlm => {
                let masked = self.mask_for_step(&ids)?;
                self.model.forward_mlm(
                    &tape,
                    &masked.corrupted,
                    &masked.positions,
                    &masked.targets,
                    seq_len,
                )?
            }
            Objective::CausalLm => self.model.forward_clm(&tape, &ids, seq_len)?,
        };
        let loss = out.loss.item();
        if !loss.is_finite() {
            return Err(LabError::Diverged { step: self.step, loss });
        }

        let grads = tape.backward(&out.loss);
        let mut gvecs: Vec<Vec<f64>> = self
            .model
            .params()
            .names()
            .map(|name| {
                let bound = out
                    .bound_param(name)
                    .unwrap_or_else(|| panic!("{name} missing from the forward pass"));
                grads.wrt_or_zero(bound)
            })
            .collect();
        drop(out); // release parameter aliases so the update can work in place
        drop(grads);

        let raw_norm = clip_global_norm(&mut gvecs, self.cfg.max_grad_norm);
        let lr = lr_at(self.step, &self.cfg);
        let t = self.step + 1;
        for ((_, theta), (g, (m, v))) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(gvecs.iter().zip(self.opt.m.iter_mut().zip(self.opt.v.iter_mut())))
        {
            let decay = Params::decays(theta);
            adamw_update(theta.data_mut(), g, m, v, t, lr, &self.cfg, decay);
        }

        self.step = t;
        let record = StepRecord {
            step: self.step,
            loss,
            lr,
            grad_norm: raw_norm,
        };
        self.records.push(record);
        Ok(record)
    }

    /// Train until `max_steps` total steps have completed.
    pub fn run(&mut self, data: &PackedDataset) -> Result<()> {
        while self.step < self.cfg.max_steps {
            self.train_step(data)?;
        }
        Ok(())
    }

    /// Masking draws come from a stream keyed by the step, so a resumed run
    /// and an uninterrupted one corrupt identical batches identically. On
    /// the (tiny-batch) chance that no position is selected, the stream
    /// keeps drawing rather than leaving the step without a loss.
    fn mask_for_step(&self, ids: &[usize]) -> Result<MaskedBatch> {
        let mut rng = self.streams.keyed("mask", self.step as u64);
        let vocab = self.model.cfg().vocab_size;
        let prob = self.model.cfg().mlm_prob;
        for _ in 0..1000 {
            let masked = mask_batch(ids, vocab, prob, &mut rng);
            if !masked.positions.is_empty() {
                return Ok(masked);
            }
        }
        Err(LabError::Data(
            "batch contains no maskable tokens (all reserved ids)".into(),
        ))
    }

    // ── persistence ─────────────────────────────────────────────────────

    /// Snapshot parameters, both moment buffers, and the step counter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::from_model(&self.model, serde_json::json!({ "step": self.step }));
        for (i, (name, t)) in self.model.params().iter().enumerate() {
            ckpt.arrays.push(CheckpointArray {
                name: format!("m.{name}"),
                shape: t.shape().to_vec(),
                data: self.opt.m[i].clone(),
            });
            ckpt.arrays.push(CheckpointArray {
                name: format!("v.{name}"),
                shape: t.shape().to_vec(),
                data: self.opt.v[i].clone(),
            });
        }
        crate::model::save_checkpoint(&ckpt, path)
    }

    /// Rebuild a trainer mid-run. Supplying the same `TrainConfig` as the
    /// original run makes the continuation bit-identical to never stopping.
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let ckpt = crate::model::load_checkpoint(path)?;
        let model = ckpt.model()?;
        let step = ckpt.extra["step"].as_u64().ok_or_else(|| {
            LabError::Checkpoint("missing step counter in checkpoint metadata".into())
        })? as usize;
        let mut opt = OptState::zeros(model.params());
        for (i, (name, t)) in model.params().iter().enumerate() {
            for (prefix, buf) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let full = format!("{prefix}.{name}");
                let arr = ckpt
                    .array(&full)
                    .ok_or_else(|| LabError::Checkpoint(format!("missing optimizer array {full}")))?;
                if arr.data.len() != t.numel() {
                    return Err(LabError::Checkpoint(format!(
                        "optimizer array {full} has {} values, parameter has {}",
                        arr.data.len(),
                        t.numel()
                    )));
                }
                buf[i] = arr.data.clone();
            }
        }
        let streams = SeedStreams::new(cfg.seed);
        Ok(Trainer {
            cfg,
            model,
            opt,
            streams,
            step,
            records: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
