use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{init_params, names, Bound, Branch, ParamStore};
use crate::error::{Error, Result};
use crate::fourier::{dft_time_var, ConditionBundle, FrequencyFeatures};
use crate::hpxlstm::{hp_xlstm_var, mlstm_layer, Coupling};
use crate::numkit::{Graph, Tensor, Var};
use crate::sequence::{FeatureSequence, LabelSequence};

/// Condition tensors of one branch on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub temporal: Var,
    /// Unnormalized spectrum of `temporal`; absent under `no_dft_cond`.
    pub frequency: Option<Var>,
    pub raw: Var,
}

/// The dual-branch segmenter: two encoders, the HP-xLSTM layer, and two
/// conditional denoising decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Sinusoidal embedding of a diffusion timestep, `[sin(tω_j) | cos(tω_j)]`.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for j in 0..half {
        let w = 10000f64.powf(-(j as f64) / half as f64);
        e[j] = (t as f64 * w).sin();
        e[half + j] = (t as f64 * w).cos();
    }
    Tensor::matrix(1, dim, e).expect("1×dim")
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut Option<ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) => g.dropout(x, rate, r),
        None => Ok(x),
    }
}

impl SegModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Reassembles a model from stored parameters, checking them against the
    /// layout `config` implies.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let layout = init_params(&config, 0)?;
        if layout.names() != params.names() {
            return Err(Error::Contract("parameter names do not match the model configuration".into()));
        }
        for ((name, a), b) in layout.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, configuration implies {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Branches that produce output under the current ablation.
    pub fn branches(&self) -> &'static [Branch] {
        if self.config.ablation.no_partial {
            &[Branch::Holistic]
        } else {
            &[Branch::Holistic, Branch::Partial]
        }
    }

    fn check_features(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.config.input_dim {
            return Err(Error::Config(format!(
                "features of shape {:?} do not match input_dim {}",
                x.shape(),
                self.config.input_dim
            )));
        }
        if x.shape()[0] == 0 {
            return Err(Error::Contract("empty feature sequence".into()));
        }
        Ok(())
    }

    /// Dilated residual encoder; dropout is active when `rng` is set.
    pub fn encode_var(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        which: Branch,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_features(g.value(x))?;
        let mut h = linear(g, x, p.var(&names::enc(which, "in.w")), p.var(&names::enc(which, "in.b")))?;
        for l in 0..self.config.encoder_layers {
            let c = g.dilated_conv1d(h, p.var(&names::enc_layer(which, l, "conv.w")), 1 << l)?;
            let c = g.add_bias(c, p.var(&names::enc_layer(which, l, "conv.b")))?;
            let c = g.relu(c)?;
            let c = linear(
                g,
                c,
                p.var(&names::enc_layer(which, l, "mix.w")),
                p.var(&names::enc_layer(which, l, "mix.b")),
            )?;
            let c = dropout(g, c, self.config.encoder_dropout, rng)?;
            h = g.add(h, c)?;
        }
        Ok(h)
    }

    /// Decoder conditions for each active branch from encoder outputs.
    /// `zp` must be present unless the partial branch is ablated.
    pub fn conditions_var(&self, g: &mut Graph, p: &Bound, zh: Var, zp: Option<Var>) -> Result<Vec<CondVars>> {
        let ab = self.config.ablation;
        let forget = self.config.forget_gate;
        let hidden: Vec<(Var, Var)> = match (ab.no_partial, zp) {
            (true, _) => {
                let zh_hat = if ab.no_hpxlstm {
                    zh
                } else {
                    let ph = p.branch(&names::xl(Branch::Holistic));
                    mlstm_layer(g, zh, zh, &ph, forget)?.0
                };
                vec![(zh, zh_hat)]
            }
            (false, Some(zp)) => {
                if ab.no_hpxlstm {
                    vec![(zh, zh), (zp, zp)]
                } else {
                    let coupling = if ab.no_bca { Coupling::Identity } else { Coupling::Bca };
                    let ph = p.branch(&names::xl(Branch::Holistic));
                    let pp = p.branch(&names::xl(Branch::Partial));
                    let (hh, hp) = hp_xlstm_var(g, zh, zp, &ph, &pp, forget, coupling)?;
                    vec![(zh, hh), (zp, hp)]
                }
            }
            (false, None) => return Err(Error::Contract("partial stream missing".into())),
        };
        hidden
            .into_iter()
            .map(|(raw, temporal)| {
                let frequency = if ab.no_dft_cond {
                    None
                } else {
                    Some(dft_time_var(g, temporal)?)
                };
                Ok(CondVars {
                    temporal,
                    frequency,
                    raw,
                })
            })
            .collect()
    }

    /// Denoising decoder; returns `L×C` logits of the clean-label estimate.
    ///
    /// The spectrum is scaled by `1/√L` on entry so its magnitude matches the
    /// temporal features regardless of sequence length.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_var(
        &self,
        g: &mut Graph,
        p: &Bound,
        y_t: Var,
        t: usize,
        cond: &CondVars,
        which: Branch,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (len, classes) = (g.shape(y_t)[0], g.shape(y_t)[1]);
        if classes != cfg.classes || g.shape(cond.temporal)[0] != len {
            return Err(Error::Contract(format!(
                "noisy labels {:?} do not fit {} classes over {} frames",
                g.shape(y_t),
                cfg.classes,
                g.shape(cond.temporal)[0]
            )));
        }
        let mut parts = vec![y_t, cond.temporal];
        if !cfg.ablation.no_dft_cond {
            let f = cond
                .frequency
                .ok_or_else(|| Error::Contract("frequency condition missing".into()))?;
            parts.push(g.scale(f, 1.0 / (len as f64).sqrt())?);
        }
        parts.push(cond.raw);
        let input = g.concat_cols(&parts)?;
        let mut h = linear(g, input, p.var(&names::dec(which, "in.w")), p.var(&names::dec(which, "in.b")))?;
        let emb = g.constant(time_embedding(t, cfg.time_embed));
        for l in 0..cfg.decoder_layers {
            let te = linear(
                g,
                emb,
                p.var(&names::dec_layer(which, l, "time.w")),
                p.var(&names::dec_layer(which, l, "time.b")),
            )?;
            let te = g.row(te, 0)?;
            let c = g.dilated_conv1d(h, p.var(&names::dec_layer(which, l, "conv.w")), 1 << l)?;
            let c = g.add_bias(c, p.var(&names::dec_layer(which, l, "conv.b")))?;
            let c = g.add_bias(c, te)?;
            let c = g.relu(c)?;
            let c = linear(
                g,
                c,
                p.var(&names::dec_layer(which, l, "mix.w")),
                p.var(&names::dec_layer(which, l, "mix.b")),
            )?;
            let c = dropout(g, c, cfg.decoder_dropout, rng)?;
            h = g.add(h, c)?;
        }
        linear(g, h, p.var(&names::dec(which, "out.w")), p.var(&names::dec(which, "out.b")))
    }

    /// Encoder output for one stream, without dropout.
    pub fn encode(&self, features: &FeatureSequence, which: Branch) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(features.tensor().clone());
        let z = self.encode_var(&mut g, &p, x, which, &mut None)?;
        FeatureSequence::from_tensor(g.value(z).clone())
    }

    /// Condition bundles of the active branches, holistic first.
    pub fn conditions(&self, holistic: &FeatureSequence, partial: &FeatureSequence) -> Result<Vec<ConditionBundle>> {
        if holistic.len() != partial.len() {
            return Err(Error::Contract(format!(
                "holistic stream has {} frames, partial {}",
                holistic.len(),
                partial.len()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xh = g.constant(holistic.tensor().clone());
        let zh = self.encode_var(&mut g, &p, xh, Branch::Holistic, &mut None)?;
        let zp = if self.config.ablation.no_partial {
            None
        } else {
            let xp = g.constant(partial.tensor().clone());
            Some(self.encode_var(&mut g, &p, xp, Branch::Partial, &mut None)?)
        };
        let conds = self.conditions_var(&mut g, &p, zh, zp)?;
        conds
            .iter()
            .map(|c| {
                Ok(ConditionBundle {
                    temporal: FeatureSequence::from_tensor(g.value(c.temporal).clone())?,
                    frequency: match c.frequency {
                        Some(f) => Some(FrequencyFeatures::from_tensor(g.value(f).clone())?),
                        None => None,
                    },
                    raw: FeatureSequence::from_tensor(g.value(c.raw).clone())?,
                })
            })
            .collect()
    }

    /// Clean-label probabilities `ŷ_0 ∈ [0,1]^{L×C}` from a noisy state.
    pub fn denoise(&self, y_t: &LabelSequence, t: usize, cond: &ConditionBundle, which: Branch) -> Result<LabelSequence> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let cv = bundle_vars(&mut g, cond);
        let y = g.constant(y_t.tensor().clone());
        let logits = self.decode_var(&mut g, &p, y, t, &cv, which, &mut None)?;
        let probs = g.sigmoid(logits)?;
        LabelSequence::from_tensor(g.value(probs).clone())
    }

    /// Ground truth in `{0,1}` to the diffused label space.
    pub fn to_diffusion_space(&self, y: &LabelSequence) -> LabelSequence {
        if self.config.symmetric_labels {
            LabelSequence::from_tensor(y.tensor().map(|v| 2.0 * v - 1.0)).expect("rank 2")
        } else {
            y.clone()
        }
    }

    /// Diffused label space back to probabilities, clamped to `[0,1]`.
    pub fn from_diffusion_space(&self, y: &LabelSequence) -> LabelSequence {
        let f = |v: f64| {
            let p = if self.config.symmetric_labels { (v + 1.0) / 2.0 } else { v };
            p.clamp(0.0, 1.0)
        };
        LabelSequence::from_tensor(y.tensor().map(f)).expect("rank 2")
    }
}

pub(crate) fn bundle_vars(g: &mut Graph, cond: &ConditionBundle) -> CondVars {
    CondVars {
        temporal: g.constant(cond.temporal.tensor().clone()),
        frequency: cond.frequency.as_ref().map(|f| g.constant(f.tensor().clone())),
        raw: g.constant(cond.raw.tensor().clone()),
    }
}
