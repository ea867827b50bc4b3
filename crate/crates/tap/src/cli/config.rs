//! Run configuration: JSON file plus flag overrides, flags win.

use crate::models::PredictorConfig;
use crate::synthworlds::WorldId;
use crate::taploss::PreferenceKind;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Prediction conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Context is the first frame; targets are all later frames.
    Forward,
    /// Context is the first and last frame; targets are the frames between.
    Bidirectional,
    /// Chained prediction: each level feeds its prediction back as context
    /// and re-targets the remaining frames (base mode applies).
    Recursive,
}

/// Training objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Fixed-time baseline (with adversarial terms).
    Fix,
    /// Plain minimum-over-time.
    Min,
    /// Generalized minimum with time preferences.
    Genmin,
    /// Generalized minimum plus the variational latent path.
    GenminVae,
    /// Generalized minimum without adversarial terms.
    GenminNoGan,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Fix => "fix",
            LossKind::Min => "min",
            LossKind::Genmin => "genmin",
            LossKind::GenminVae => "genmin_vae",
            LossKind::GenminNoGan => "genmin_no_gan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "fix" => LossKind::Fix,
            "min" => LossKind::Min,
            "genmin" => LossKind::Genmin,
            "genmin_vae" | "genmin+vae" => LossKind::GenminVae,
            "genmin_no_gan" | "genmin-no-gan" => LossKind::GenminNoGan,
            other => return Err(Error::Config(format!("unknown loss {other:?}"))),
        })
    }

    pub fn uses_gan(self) -> bool {
        !matches!(self, LossKind::GenminNoGan)
    }

    pub fn uses_vae(self) -> bool {
        matches!(self, LossKind::GenminVae)
    }
}

/// Full description of one training/evaluation run. Serializes to the JSON
/// config file; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldId,
    pub mode: Mode,
    /// Conditioning used by recursive mode.
    pub recursive_base: Mode,
    pub loss: LossKind,
    /// Linear preference offset for forward prediction.
    pub beta: f64,
    /// Bell preference width for bidirectional prediction (None: |T|/4).
    pub bell_sigma: Option<f64>,
    /// Explicit preference override; None picks linear (forward) or bell
    /// (bidirectional) for genmin, uniform for min.
    pub preference: Option<PreferenceKind>,
    /// Fraction of the episode targeted by the fixed-time baseline.
    pub fix_fraction: f64,
    pub lambda_kl: f64,
    pub lambda_gan: f64,
    pub label_smoothing_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_new_pixels: bool,
    pub code_dim: usize,
    pub latent_dim: usize,
    pub widths: Vec<usize>,
    /// Discriminator trunk widths (defaults to `widths`).
    pub disc_widths: Option<Vec<usize>>,
    /// Recursion depth cap for recursive-mode training.
    pub recursion_depth: usize,
    /// Epochs of unconditional decoder pretraining (0 disables).
    pub decoder_pretrain_epochs: usize,
    pub dataset: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub log_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldId::GridPick,
            mode: Mode::Bidirectional,
            recursive_base: Mode::Bidirectional,
            loss: LossKind::Genmin,
            beta: 2.0,
            bell_sigma: None,
            preference: None,
            fix_fraction: 0.5,
            lambda_kl: 1e-2,
            lambda_gan: 1e-2,
            label_smoothing_alpha: 0.25,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            use_new_pixels: true,
            code_dim: 64,
            latent_dim: 8,
            widths: vec![16, 32, 64],
            disc_widths: None,
            recursion_depth: 3,
            decoder_pretrain_epochs: 0,
            dataset: None,
            checkpoint_out: None,
            log_out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Recursive && self.recursive_base == Mode::Recursive {
            return Err(Error::Config(
                "recursive mode requires a forward or bidirectional base".into(),
            ));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.fix_fraction) {
            return Err(Error::Config(format!(
                "fix_fraction must be in [0, 1], got {}",
                self.fix_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.lambda_kl < 0.0 || self.lambda_gan < 0.0 || self.label_smoothing_alpha < 0.0 {
            return Err(Error::Config("loss coefficients must be >= 0".into()));
        }
        if self.recursion_depth == 0 && self.mode == Mode::Recursive {
            return Err(Error::Config("recursion_depth must be >= 1".into()));
        }
        self.predictor_config().validate()
    }

    /// The conditioning actually used to build context/target sets.
    pub fn base_mode(&self) -> Mode {
        match self.mode {
            Mode::Recursive => self.recursive_base,
            m => m,
        }
    }

    pub fn context_count(&self) -> usize {
        match self.base_mode() {
            Mode::Forward => 1,
            _ => 2,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            frame_size: (
                crate::synthworlds::FRAME_H,
                crate::synthworlds::FRAME_W,
                crate::synthworlds::FRAME_C,
            ),
            context_count: self.context_count(),
            code_dim: self.code_dim,
            latent_dim: self.latent_dim,
            widths: self.widths.clone(),
            use_vae: self.loss.uses_vae(),
            use_new_pixels: self.use_new_pixels,
        }
    }

    /// Discriminator trunk configuration (may be slimmer than the
    /// generator's).
    pub fn disc_config(&self) -> PredictorConfig {
        let mut cfg = self.predictor_config();
        if let Some(w) = &self.disc_widths {
            cfg.widths = w.clone();
        }
        cfg
    }
}

/// Checkpoint metadata block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: RunConfig,
    pub t_len: usize,
    pub context_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub trained_epochs: usize,
}
