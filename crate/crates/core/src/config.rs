//! Run configuration shared by the CLI and the pipeline. Defaults match
//! the reference hyperparameters; unknown keys in config files are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::syncmodel::{SyncConfig, TrainSyncOpts};
use crate::synthdata::SynthSpec;
use crate::types::{hex_string, NoiseSchedule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // parameter space
    pub n_dims: usize,
    pub audio_dim: usize,
    pub fps: f64,
    pub k_lip: usize,
    pub k_eye: usize,

    // synthetic corpus
    pub n_sequences: usize,
    pub seq_len: usize,
    pub blink_rate: f64,
    pub blink_duration: usize,

    // denoiser
    pub d_model: usize,
    pub n_heads: usize,
    pub local_window: usize,
    pub rel_radius: usize,

    // diffusion
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub drop_prob: f64,
    pub guidance_s: f64,
    pub lambda: f64,

    // denoiser training
    pub train_window: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_steps: usize,
    pub checkpoint_every: usize,
    pub sync_loss_stride: usize,

    // sync encoders
    pub d_sync: usize,
    pub sync_window: usize,
    pub sync_hidden: usize,
    pub sync_lr: f64,
    pub sync_batch: usize,
    pub sync_max_epochs: usize,
    pub sync_patience: usize,

    // sampling / evaluation
    pub n_eval_sequences: usize,
    pub eval_len: usize,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_dims: 64,
            audio_dim: 32,
            fps: 25.0,
            k_lip: 13,
            k_eye: 8,
            n_sequences: 50,
            seq_len: 500,
            blink_rate: 0.3,
            blink_duration: 6,
            d_model: 128,
            n_heads: 4,
            local_window: 5,
            rel_radius: 16,
            t_steps: 400,
            beta_min: 1e-4,
            beta_max: 0.02,
            drop_prob: 0.1,
            guidance_s: 1.15,
            lambda: 0.01,
            train_window: 64,
            lr: 1e-4,
            batch: 32,
            train_steps: 2000,
            checkpoint_every: 200,
            sync_loss_stride: 16,
            d_sync: 64,
            sync_window: 5,
            sync_hidden: 32,
            sync_lr: 1e-3,
            sync_batch: 32,
            sync_max_epochs: 40,
            sync_patience: 5,
            n_eval_sequences: 4,
            eval_len: 500,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg: RunConfig = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_path(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_lip == 0 || self.k_eye == 0 || self.k_lip + self.k_eye > self.n_dims {
            return Err(Error::Invalid(format!(
                "K_lip={} and K_eye={} must be positive with sum <= N={}",
                self.k_lip, self.k_eye, self.n_dims
            )));
        }
        if self.n_sequences == 0 || self.n_eval_sequences == 0 {
            return Err(Error::Invalid("sequence counts must be positive".into()));
        }
        if self.train_window < 2 || self.train_window > self.seq_len {
            return Err(Error::Invalid(format!(
                "train_window={} must be in 2..=seq_len({})",
                self.train_window, self.seq_len
            )));
        }
        if self.batch == 0 || self.train_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::Invalid("training sizes must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.sync_lr.is_finite() && self.sync_lr > 0.0)
        {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Invalid("lambda must be finite and >= 0".into()));
        }
        if !self.guidance_s.is_finite() {
            return Err(Error::Invalid("guidance scale must be finite".into()));
        }
        if self.eval_len < self.sync_window {
            return Err(Error::Invalid("eval_len shorter than the sync window".into()));
        }
        self.denoiser_config().validate()?;
        self.sync_config().validate()?;
        self.guidance().validate()?;
        NoiseSchedule::<f64>::linear(self.t_steps, self.beta_min, self.beta_max)?;
        self.synth_spec().validate()?;
        Ok(())
    }

    /// Synthetic corpus spec with planted lip/eye sets drawn from the run
    /// seed.
    pub fn synth_spec(&self) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x706c_616e_7465_64);
        let mut dims: Vec<usize> = (0..self.n_dims).collect();
        dims.shuffle(&mut rng);
        let planted_lip: Vec<usize> = dims[..self.k_lip].to_vec();
        let planted_eye: Vec<usize> = dims[self.k_lip..self.k_lip + self.k_eye].to_vec();
        SynthSpec {
            n_dims: self.n_dims,
            planted_lip,
            planted_eye,
            audio_dim: self.audio_dim,
            fps: self.fps,
            blink_rate: self.blink_rate,
            blink_duration: self.blink_duration,
            seq_len: self.seq_len,
            seed: self.seed,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            local_window: self.local_window,
            rel_radius: self.rel_radius,
            audio_dim: self.audio_dim,
            residual: true,
        }
    }

    pub fn sync_config(&self) -> SyncConfig {
        SyncConfig {
            d_sync: self.d_sync,
            window: self.sync_window,
            hidden: self.sync_hidden,
        }
    }

    pub fn train_sync_opts(&self) -> TrainSyncOpts {
        TrainSyncOpts {
            lr: self.sync_lr,
            batch: self.sync_batch,
            max_epochs: self.sync_max_epochs,
            patience: self.sync_patience,
            seed: self.seed,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig { s: self.guidance_s, drop_prob: self.drop_prob }
    }

    pub fn schedule<T: crate::scalar::Scalar>(&self) -> Result<NoiseSchedule<T>> {
        NoiseSchedule::linear(self.t_steps, self.beta_min, self.beta_max)
    }

    /// Stable hash of the full configuration, recorded in run manifests.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_string(&Sha256::digest(json.as_bytes()))
    }
}
