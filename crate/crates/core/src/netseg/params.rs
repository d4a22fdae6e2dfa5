use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hpxlstm::BranchParams;
use crate::numkit::{Graph, Tensor, Var};
use crate::seed::derive_named;

/// Ordered, named parameter tensors. Declaration order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.without_grad());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, as gradient targets when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters placed on one graph, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Replaces the node a name resolves to, e.g. to probe gradients with
    /// respect to a single tensor.
    pub fn set(&mut self, name: &str, v: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        self.vars[i] = v;
        Ok(())
    }

    pub fn branch(&self, prefix: &str) -> BranchParams<Var> {
        let v = |field: &str| self.var(&format!("{prefix}.{field}"));
        BranchParams {
            w_q: v("w_q"),
            b_q: v("b_q"),
            w_k: v("w_k"),
            b_k: v("b_k"),
            w_v: v("w_v"),
            b_v: v("b_v"),
            w_i: v("w_i"),
            b_i: v("b_i"),
            w_f: v("w_f"),
            b_f: v("b_f"),
            w_o: v("w_o"),
            b_o: v("b_o"),
            bca_q: v("bca_q"),
            bca_k: v("bca_k"),
            bca_v: v("bca_v"),
        }
    }
}

/// Which of the two streams a component belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Holistic,
    Partial,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Holistic => "h",
            Branch::Partial => "p",
        }
    }
}

/// Parameter name helpers shared by initialization and the forward pass.
pub(crate) mod names {
    use super::Branch;

    pub fn enc(b: Branch, part: &str) -> String {
        format!("enc_{}.{part}", b.tag())
    }

    pub fn enc_layer(b: Branch, l: usize, part: &str) -> String {
        format!("enc_{}.l{l}.{part}", b.tag())
    }

    pub fn xl(b: Branch) -> String {
        format!("xl_{}", b.tag())
    }

    pub fn dec(b: Branch, part: &str) -> String {
        format!("dec_{}.{part}", b.tag())
    }

    pub fn dec_layer(b: Branch, l: usize, part: &str) -> String {
        format!("dec_{}.l{l}.{part}", b.tag())
    }
}

/// Builds the full parameter set. Every tensor draws from its own stream
/// derived from `(seed, name)`, so ablations that reshape one tensor leave
/// all others unchanged. Weights are uniform in `±1/√fan_in`, biases zero,
/// and values are rounded to 32-bit precision to match checkpoints.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let weight = |store: &mut ParamStore, name: String, shape: &[usize], fan_in: usize| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, &name));
        let t = Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng);
        store.insert(name, round_f32(t))
    };
    let zeros = |store: &mut ParamStore, name: String, n: usize| store.insert(name, Tensor::zeros(&[n]));
    let (d, k, maps) = (cfg.d, cfg.kernel, cfg.decoder_maps);

    for b in [Branch::Holistic, Branch::Partial] {
        weight(&mut store, names::enc(b, "in.w"), &[cfg.input_dim, d], cfg.input_dim)?;
        zeros(&mut store, names::enc(b, "in.b"), d)?;
        for l in 0..cfg.encoder_layers {
            weight(&mut store, names::enc_layer(b, l, "conv.w"), &[k, d, d], k * d)?;
            zeros(&mut store, names::enc_layer(b, l, "conv.b"), d)?;
            weight(&mut store, names::enc_layer(b, l, "mix.w"), &[d, d], d)?;
            zeros(&mut store, names::enc_layer(b, l, "mix.b"), d)?;
        }
    }
    for b in [Branch::Holistic, Branch::Partial] {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_named(seed, &names::xl(b)));
        let p = BranchParams::random(d, cfg.forget_bias, &mut rng);
        for (field, t) in p.named() {
            store.insert(format!("{}.{field}", names::xl(b)), round_f32(t.clone()))?;
        }
    }
    let width = cfg.decoder_input_width();
    for b in [Branch::Holistic, Branch::Partial] {
        weight(&mut store, names::dec(b, "in.w"), &[width, maps], width)?;
        zeros(&mut store, names::dec(b, "in.b"), maps)?;
        for l in 0..cfg.decoder_layers {
            weight(&mut store, names::dec_layer(b, l, "time.w"), &[cfg.time_embed, maps], cfg.time_embed)?;
            zeros(&mut store, names::dec_layer(b, l, "time.b"), maps)?;
            weight(&mut store, names::dec_layer(b, l, "conv.w"), &[k, maps, maps], k * maps)?;
            zeros(&mut store, names::dec_layer(b, l, "conv.b"), maps)?;
            weight(&mut store, names::dec_layer(b, l, "mix.w"), &[maps, maps], maps)?;
            zeros(&mut store, names::dec_layer(b, l, "mix.b"), maps)?;
        }
        weight(&mut store, names::dec(b, "out.w"), &[maps, cfg.classes], maps)?;
        zeros(&mut store, names::dec(b, "out.b"), cfg.classes)?;
    }
    Ok(store)
}

pub(crate) fn round_f32(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
