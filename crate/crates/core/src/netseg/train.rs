use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DiffusionConfig, TrainConfig};
use super::loss::loss_from_logits;
use super::model::SegModel;
use super::optim::Adam;
use super::params::{Bound, Branch};
use crate::diffusion::{forward_noise, gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numkit::{Graph, Tensor, Var};
use crate::seed::derive_seed;
use crate::sequence::{FeatureSequence, LabelSequence};

const STEP_STREAM: u64 = 0x5354_4550;
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// One supervised example: both feature streams and the target's labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub holistic: FeatureSequence,
    pub partial: FeatureSequence,
    pub labels: LabelSequence,
}

/// Diffusion inputs drawn for one sample in one step.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    /// One noise matrix per active branch, holistic first.
    pub eps: Vec<LabelSequence>,
}

impl NoiseDraw {
    pub fn draw(model: &SegModel, sched: &NoiseSchedule, labels: &LabelSequence, rng: &mut ChaCha8Rng) -> Self {
        let t = rng.random_range(1..=sched.steps());
        let eps = model
            .branches()
            .iter()
            .map(|_| gaussian(labels.len(), labels.classes(), rng))
            .collect();
        Self { t, eps }
    }
}

impl SegModel {
    /// Summed per-branch loss for one sample on `g`. Dropout is active when
    /// `rng` is set.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        sample: &TrainSample,
        sched: &NoiseSchedule,
        noise: &NoiseDraw,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<Var> {
        let xh = g.constant(sample.holistic.tensor().clone());
        self.sample_loss_with(g, p, xh, sample, sched, noise, rng)
    }

    /// [`Self::sample_loss`] with the holistic features supplied as a node,
    /// so gradients with respect to the input can be probed.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_loss_with(
        &self,
        g: &mut Graph,
        p: &Bound,
        xh: Var,
        sample: &TrainSample,
        sched: &NoiseSchedule,
        noise: &NoiseDraw,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<Var> {
        if sample.holistic.len() != sample.labels.len() || sample.partial.len() != sample.labels.len() {
            return Err(Error::Contract("features and labels differ in length".into()));
        }
        let zh = self.encode_var(g, p, xh, Branch::Holistic, rng)?;
        let zp = if self.config.ablation.no_partial {
            None
        } else {
            let xp = g.constant(sample.partial.tensor().clone());
            Some(self.encode_var(g, p, xp, Branch::Partial, rng)?)
        };
        let conds = self.conditions_var(g, p, zh, zp)?;
        let y0 = self.to_diffusion_space(&sample.labels);
        let mut total: Option<Var> = None;
        for ((cond, &which), eps) in conds.iter().zip(self.branches()).zip(&noise.eps) {
            let y_t = forward_noise(&y0, noise.t, eps, sched)?;
            let y = g.constant(y_t.into_tensor());
            let logits = self.decode_var(g, p, y, noise.t, cond, which, rng)?;
            let l = loss_from_logits(g, logits, &sample.labels)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        total.ok_or_else(|| Error::Contract("no active branch".into()))
    }
}

/// Progress counters saved with checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

/// Loss of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Owns a model and its optimizer state for one training run.
///
/// All randomness derives from `seed`: the batch order of epoch `e` from
/// `(seed, e)`, and timesteps, noise and dropout of step `s` from
/// `(seed, s)`. A trainer rebuilt from a checkpoint therefore continues the
/// exact run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SegModel,
    pub adam: Adam,
    pub sched: NoiseSchedule,
    pub config: TrainConfig,
    pub seed: u64,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(model: SegModel, diffusion: &DiffusionConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params);
        Ok(Self {
            model,
            adam,
            sched: diffusion.build()?,
            config,
            seed,
            progress: Progress::default(),
        })
    }

    /// Continues from saved optimizer state and counters.
    pub fn resume(
        model: SegModel,
        adam: Adam,
        progress: Progress,
        diffusion: &DiffusionConfig,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut tr = Self::new(model, diffusion, config, seed)?;
        if adam.m.len() != tr.model.params.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        tr.adam = adam;
        tr.progress = progress;
        Ok(tr)
    }

    /// Gradients of the mean batch loss, in parameter order, and the loss.
    pub fn batch_gradients(&self, batch: &[&TrainSample], rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor>, f64)> {
        let mut grads: Vec<Tensor> = self.model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let noise = NoiseDraw::draw(&self.model, &self.sched, &sample.labels, rng);
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g, true);
            let mut drop = Some(ChaCha8Rng::seed_from_u64(rng.random()));
            let loss = self.model.sample_loss(&mut g, &p, sample, &self.sched, &noise, &mut drop)?;
            total += g.value(loss).item();
            let mut gr = g.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gv) = gr.take(v) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += scale * b;
                    }
                }
            }
        }
        Ok((grads, total * scale))
    }

    /// One optimizer update on `batch`; returns the mean loss.
    pub fn train_step(&mut self, batch: &[&TrainSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let step = self.progress.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ STEP_STREAM, step));
        let diagnose = |e: Error| match e {
            Error::Numeric(msg) => Error::Training {
                step: step as usize,
                msg: format!("{msg} (epoch {}, lr {})", self.progress.epoch, self.config.lr),
            },
            other => other,
        };
        let (grads, loss) = self.batch_gradients(batch, &mut rng).map_err(diagnose)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: step as usize,
                msg: format!("non-finite loss {loss} or gradient"),
            });
        }
        self.adam.update(&mut self.model.params, &grads, &self.config)?;
        self.progress.step += 1;
        Ok(loss)
    }

    /// Sample order for epoch `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ SHUFFLE_STREAM, epoch as u64));
        idx.shuffle(&mut rng);
        idx
    }

    /// Runs the next epoch over `data`; returns the mean step loss.
    pub fn run_epoch(&mut self, data: &[TrainSample], mut on_step: impl FnMut(&StepReport)) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("no training samples".into()));
        }
        let epoch = self.progress.epoch;
        let order = self.epoch_order(data.len(), epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(&batch)?;
            on_step(&StepReport {
                step: self.progress.step,
                epoch,
                loss,
            });
            sum += loss;
            count += 1;
        }
        self.progress.epoch += 1;
        Ok(sum / count as f64)
    }
}
