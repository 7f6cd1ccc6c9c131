//! Adam training loop, deterministic batch sampling and checkpoints.
//!
//! The batch drawn at step `t` depends only on `(seed, t)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted run.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mixture_data::EncodedSample;
use crate::model::{LossBreakdown, ModelConfig, Parameters, TvslModel};
use crate::seeding::rng_for;
use crate::{Result, Scalar, TvslError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 32, lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TvslError::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TvslError::Config("need lr >= 0 and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(TvslError::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Adam<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], cfg: &TrainConfig) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let one = T::one();
        let bc1 = one - T::of(cfg.beta1.powi(self.t as i32));
        let bc2 = one - T::of(cfg.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Indices of the batch at `step`; without replacement when possible.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, "batch", step);
    if batch <= n {
        index::sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub total: f64,
    pub av: f64,
    pub cls: f64,
    pub mcid: f64,
    pub lr: f64,
    /// Milliseconds since the trainer was created; not part of the
    /// reproducibility contract.
    pub wall_ms: u64,
}

impl HistoryEntry {
    /// The deterministic part of the entry.
    pub fn losses(&self) -> (u64, f64, f64, f64, f64) {
        (self.step, self.total, self.av, self.cls, self.mcid)
    }
}

pub struct Trainer<T> {
    pub model: TvslModel<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    pub step: u64,
    pub history: Vec<HistoryEntry>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TvslModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params.num_values());
        Ok(Self { model, adam, config, step: 0, history: Vec::new(), started: Instant::now() })
    }

    /// Continues from a checkpoint's parameters, optimizer state and step.
    pub fn resume(mut model: TvslModel<T>, ckpt: &Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.params = ckpt.params.clone();
        if ckpt.adam.m.len() != model.params.num_values() {
            return Err(TvslError::Format("optimizer state does not match the parameters".into()));
        }
        Ok(Self {
            model,
            adam: ckpt.adam.clone(),
            config,
            step: ckpt.step,
            history: ckpt.history.clone(),
            started: Instant::now(),
        })
    }

    /// One optimizer step. A non-finite loss or gradient leaves the
    /// parameters untouched and returns an error.
    pub fn train_step(&mut self, data: &[EncodedSample<T>]) -> Result<HistoryEntry> {
        if data.is_empty() {
            return Err(TvslError::Input("no training samples".into()));
        }
        let idx = batch_indices(self.config.seed, self.step, data.len(), self.config.batch_size);
        let batch: Vec<&EncodedSample<T>> = idx.iter().map(|&i| &data[i]).collect();
        let (losses, grads) = self.model.loss_and_grad(&batch)?;
        let grads = grads.to_flat();
        if !losses.total.is_finite() {
            return Err(TvslError::NonFinite("training loss"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TvslError::NonFinite("gradient"));
        }
        let mut flat = self.model.params.to_flat();
        self.adam.step(&mut flat, &grads, &self.config);
        let mut next = self.model.params.clone();
        next.set_flat(&flat)?;
        let cfg = &self.model.config;
        next.clamp_temperatures(cfg.tau_min, cfg.tau_max);
        if !next.is_finite() {
            return Err(TvslError::NonFinite("updated parameters"));
        }
        self.model.params = next;
        self.step += 1;
        let entry = self.entry(losses);
        self.history.push(entry.clone());
        Ok(entry)
    }

    fn entry(&self, l: LossBreakdown<T>) -> HistoryEntry {
        HistoryEntry {
            step: self.step,
            total: l.total.as_f64(),
            av: l.av.as_f64(),
            cls: l.cls.as_f64(),
            mcid: l.mcid.as_f64(),
            lr: self.config.lr,
            wall_ms: self.started.elapsed().as_millis() as u64,
        }
    }

    /// Runs until `self.config.steps`, calling `on_step` after each update.
    pub fn run(
        &mut self,
        data: &[EncodedSample<T>],
        mut on_step: impl FnMut(&Self, &HistoryEntry) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.config.steps {
            let entry = self.train_step(data)?;
            on_step(self, &entry)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, run_config: serde_json::Value, encoder_fingerprint: &str) -> Checkpoint<T> {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&run_config),
            run_config,
            model: self.model.config.clone(),
            train: self.config.clone(),
            vocabulary: self.model.vocab().names().to_vec(),
            encoder_fingerprint: encoder_fingerprint.to_string(),
            step: self.step,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            history: self.history.clone(),
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "tvsl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 (hex) of the compact JSON form of a configuration.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(serde_json::to_vec(config).expect("JSON values serialize"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Single-file training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// The operator-level configuration the run was started with.
    pub run_config: serde_json::Value,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocabulary: Vec<String>,
    /// Fingerprint of the frozen encoders the parameters were trained on.
    pub encoder_fingerprint: String,
    pub step: u64,
    pub params: Parameters<T>,
    pub adam: Adam<T>,
    pub history: Vec<HistoryEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let head: serde_json::Value = serde_json::from_slice(&bytes)?;
        if head.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(TvslError::Format("not a checkpoint file".into()));
        }
        let version = head.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(TvslError::Format(format!("unsupported checkpoint version {version:?}")));
        }
        let ckpt: Self = serde_json::from_value(head)?;
        if ckpt.config_hash != config_hash(&ckpt.run_config) {
            return Err(TvslError::Format("checkpoint config hash mismatch".into()));
        }
        Ok(ckpt)
    }
}
