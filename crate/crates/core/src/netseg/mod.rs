//! The dual-branch segmenter: holistic and partial encoders, the HP-xLSTM
//! layer, two conditional denoising decoders, the training objective and
//! loop, and inference with branch merging.
//!
//! Each decoder sees the noisy labels concatenated with its branch's
//! conditions `{ẑ, DFT(ẑ), z}` (HP-xLSTM output, its spectrum, and the
//! encoder output), and a sinusoidal timestep embedding projected and added
//! inside every residual layer. Decoders output clean-label probabilities.

pub mod checkpoint;
mod config;
mod infer;
mod loss;
mod model;
mod optim;
mod params;
mod train;

pub use config::{Ablation, DiffusionConfig, ModelConfig, TrainConfig};
pub use infer::{infer, merge, Inference, THRESHOLD};
pub use loss::{boundary_sequence, loss, loss_from_logits, PROB_CLAMP};
pub use model::{time_embedding, CondVars, SegModel};
pub use optim::Adam;
pub use params::{init_params, Bound, Branch, ParamStore};
pub use train::{NoiseDraw, Progress, StepReport, TrainSample, Trainer};
