use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::hpxlstm::ForgetGate;

/// Components that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the partial branch; the holistic branch alone produces the output.
    pub no_partial: bool,
    /// Feed encoder outputs directly as conditions.
    pub no_hpxlstm: bool,
    /// Gate each recurrence on its own features instead of cross-attention.
    pub no_bca: bool,
    /// Drop the spectrum from the decoder conditions.
    pub no_dft_cond: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 6] = ["full", "no_partial", "no_hpxlstm", "no_bca", "no_dft_cond", "none"];

    /// Variant name to switch set. `none` (alias `wo_all`) disables every
    /// component, leaving a single-branch diffusion segmenter.
    pub fn from_variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no_partial" => a.no_partial = true,
            "no_hpxlstm" => a.no_hpxlstm = true,
            "no_bca" => a.no_bca = true,
            "no_dft_cond" => a.no_dft_cond = true,
            "none" | "wo_all" => {
                a = Self {
                    no_partial: true,
                    no_hpxlstm: true,
                    no_bca: true,
                    no_dft_cond: true,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation variant {other:?}; expected one of {:?}",
                    Self::VARIANTS
                )))
            }
        }
        Ok(a)
    }
}

/// Architecture of the dual-branch model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-frame input feature width of both streams.
    pub input_dim: usize,
    pub classes: usize,
    /// Encoder width, also the HP-xLSTM width.
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub decoder_maps: usize,
    pub kernel: usize,
    pub time_embed: usize,
    pub encoder_dropout: f64,
    pub decoder_dropout: f64,
    pub forget_gate: ForgetGate,
    pub forget_bias: f64,
    /// Diffuse labels mapped to `{-1, +1}`; `false` diffuses the literal `{0, 1}`.
    pub symmetric_labels: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 35,
            classes: 6,
            d: 32,
            encoder_layers: 4,
            decoder_layers: 3,
            decoder_maps: 24,
            kernel: 5,
            time_embed: 64,
            encoder_dropout: 0.5,
            decoder_dropout: 0.1,
            forget_gate: ForgetGate::Sigmoid,
            forget_bias: 3.0,
            symmetric_labels: true,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("classes", self.classes),
            ("d", self.d),
            ("decoder_maps", self.decoder_maps),
            ("time_embed", self.time_embed),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel width {} must be odd", self.kernel)));
        }
        if self.time_embed % 2 != 0 {
            return Err(Error::Config("time_embed must be even".into()));
        }
        for (name, p) in [("encoder_dropout", self.encoder_dropout), ("decoder_dropout", self.decoder_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Channels entering a decoder: noisy labels plus the condition bundle.
    pub fn decoder_input_width(&self) -> usize {
        let freq = if self.ablation.no_dft_cond { 0 } else { 2 * self.d };
        self.classes + self.d + freq + self.d
    }
}

/// Noise schedule and sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub eta: f64,
    pub sampling_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            schedule: ScheduleKind::default(),
            eta: 0.0,
            sampling_steps: 25,
        }
    }
}

impl DiffusionConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.sampling_steps == 0 || self.sampling_steps > self.timesteps {
            return Err(Error::Config(format!(
                "sampling_steps {} must lie in 1..={}",
                self.sampling_steps, self.timesteps
            )));
        }
        build_schedule(self.timesteps, &self.schedule, self.eta)
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        Ok(())
    }
}
