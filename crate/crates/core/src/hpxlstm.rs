//! HP-xLSTM: two mLSTM recurrences (holistic and partial) whose input gates
//! are driven by bidirectional cross-attention between the streams.
//!
//! Frames are rows, so every projection acts on the right: `q_t = z_t W_q + b_q`.
//! For branch `m` with opposite branch `o`:
//!
//! ```text
//! α      = softmax((z_o W_Q^m)(z_m W_K^m)ᵀ / √d)   row-wise over time
//! x̃_m    = α · (z_o W_V^m)
//! ĩ_t    = x̃_m,t · w_i + b_i
//! f̃_t    = z_m,t · w_f + b_f
//! m_t    = max(log f_t + m_{t−1}, ĩ_t)
//! C_t    = f'_t C_{t−1} + i'_t v_t k_tᵀ,   n_t = f'_t n_{t−1} + i'_t k_t
//! h_t    = σ(õ_t) ⊙ C_t q_t / max(|n_tᵀ q_t|, e^{−m_t})
//! ```
//!
//! with `i'_t = exp(ĩ_t − m_t)` and `f'_t = exp(log f_t + m_{t−1} − m_t)`. The
//! stabilized states are the unstabilized ones scaled by `e^{−m_t}`, and the
//! denominator floor `e^{−m_t}` is the scaled `1`, so `h_t` is exactly the
//! unstabilized value. Because `h_t` does not depend on `m`, the stabilizer
//! is carried as a plain number outside the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Graph, Tensor, Var};
use crate::sequence::FeatureSequence;

/// Input-gate pre-activations below this are treated as a closed gate.
pub const GATE_FLOOR: f64 = -1e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetGate {
    #[default]
    Sigmoid,
    Exp,
}

/// How the input-gate features of each branch are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Coupling {
    /// Cross-attention from the opposite branch.
    #[default]
    Bca,
    /// Each branch gates on its own features (BCA ablated).
    Identity,
}

/// Matrix memory, normalizer and log-scale stabilizer of one mLSTM head.
#[derive(Clone, Debug, PartialEq)]
pub struct MLSTMState {
    pub c: Tensor,
    pub n: Tensor,
    pub m: f64,
}

impl MLSTMState {
    pub fn zeros(d: usize) -> Self {
        Self {
            c: Tensor::zeros(&[d, d]),
            n: Tensor::zeros(&[d]),
            m: 0.0,
        }
    }
}

/// Parameters of one branch. `T` is [`Tensor`] for storage and [`Var`]
/// once bound to a graph.
#[derive(Clone, Debug)]
pub struct BranchParams<T = Tensor> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    /// `d×1`
    pub w_i: T,
    /// `[1]`
    pub b_i: T,
    /// `d×1`
    pub w_f: T,
    /// `[1]`
    pub b_f: T,
    pub w_o: T,
    pub b_o: T,
    pub bca_q: T,
    pub bca_k: T,
    pub bca_v: T,
}

impl<T> BranchParams<T> {
    /// Parameters paired with stable names, in declaration order.
    pub fn named(&self) -> [(&'static str, &T); 15] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_i", &self.w_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("b_f", &self.b_f),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("bca_q", &self.bca_q),
            ("bca_k", &self.bca_k),
            ("bca_v", &self.bca_v),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BranchParams<U> {
        BranchParams {
            w_q: f(&self.w_q),
            b_q: f(&self.b_q),
            w_k: f(&self.w_k),
            b_k: f(&self.b_k),
            w_v: f(&self.w_v),
            b_v: f(&self.b_v),
            w_i: f(&self.w_i),
            b_i: f(&self.b_i),
            w_f: f(&self.w_f),
            b_f: f(&self.b_f),
            w_o: f(&self.w_o),
            b_o: f(&self.b_o),
            bca_q: f(&self.bca_q),
            bca_k: f(&self.bca_k),
            bca_v: f(&self.bca_v),
        }
    }
}

impl BranchParams<Tensor> {
    /// Uniform `±1/√d` weights, zero biases except the forget bias, which
    /// starts at `forget_bias` so early training retains memory.
    pub fn random<R: Rng + ?Sized>(d: usize, forget_bias: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |shape: &[usize]| Tensor::uniform(shape, bound, rng);
        let (w_q, w_k, w_v) = (mat(&[d, d]), mat(&[d, d]), mat(&[d, d]));
        let (w_i, w_f, w_o) = (mat(&[d, 1]), mat(&[d, 1]), mat(&[d, d]));
        let (bca_q, bca_k, bca_v) = (mat(&[d, d]), mat(&[d, d]), mat(&[d, d]));
        Self {
            w_q,
            b_q: Tensor::zeros(&[d]),
            w_k,
            b_k: Tensor::zeros(&[d]),
            w_v,
            b_v: Tensor::zeros(&[d]),
            w_i,
            b_i: Tensor::zeros(&[1]),
            w_f,
            b_f: Tensor::full(&[1], forget_bias),
            w_o,
            b_o: Tensor::zeros(&[d]),
            bca_q,
            bca_k,
            bca_v,
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Places every tensor on `g` as a constant, or as a gradient target
    /// when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BranchParams<Var> {
        self.map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Cross-attended gate features for the branch owning `params`:
/// queries and values from `other`, keys from `own`.
pub fn cross_attend(g: &mut Graph, other: Var, own: Var, params: &BranchParams<Var>) -> Result<Var> {
    let d = g.shape(own)[1];
    let q = g.matmul(other, params.bca_q)?;
    let k = g.matmul(own, params.bca_k)?;
    let v = g.matmul(other, params.bca_v)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scores, 1)?;
    g.matmul(attn, v)
}

/// Taped bidirectional cross-attention; returns `(x̃_h, x̃_p)`.
pub fn bca_var(
    g: &mut Graph,
    zh: Var,
    zp: Var,
    ph: &BranchParams<Var>,
    pp: &BranchParams<Var>,
) -> Result<(Var, Var)> {
    check_pair(g.shape(zh), g.shape(zp))?;
    let xp = cross_attend(g, zh, zp, pp)?;
    let xh = cross_attend(g, zp, zh, ph)?;
    Ok((xh, xp))
}

fn check_pair(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 {
        return Err(Error::Dimension(format!("HP-xLSTM expects L×d inputs, got {a:?} and {b:?}")));
    }
    if a[0] != b[0] {
        return Err(Error::Contract(format!(
            "holistic and partial streams differ in length ({} vs {})",
            a[0], b[0]
        )));
    }
    if a[1] != b[1] {
        return Err(Error::Dimension(format!("stream widths differ ({} vs {})", a[1], b[1])));
    }
    Ok(())
}

/// Recurrent state on a graph. `m` lives outside the tape.
pub struct StateVars {
    pub c: Var,
    pub n: Var,
    pub m: f64,
}

impl StateVars {
    pub fn constant(g: &mut Graph, s: &MLSTMState) -> Self {
        Self {
            c: g.constant(s.c.clone()),
            n: g.constant(s.n.clone()),
            m: s.m,
        }
    }
}

/// Per-step projected inputs of one recurrence step.
pub struct StepInputs {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Scalar input-gate pre-activation.
    pub i_pre: Var,
    /// Scalar `log f_t`.
    pub log_f: Var,
    /// `σ(õ_t)`, a `d`-vector.
    pub o_gate: Var,
}

/// One stabilized recurrence step; returns the new state and `h_t`.
pub fn step_var(g: &mut Graph, state: &StateVars, x: &StepInputs, step: usize) -> Result<(StateVars, Var)> {
    let (i_val, lf_val) = (g.value(x.i_pre).item(), g.value(x.log_f).item());
    let m_new = (lf_val + state.m).max(i_val);
    if !m_new.is_finite() {
        return Err(Error::Numeric(format!("mLSTM stabilizer is not finite at step {step}")));
    }
    let f_arg = g.shift(x.log_f, state.m - m_new)?;
    let f_gate = g.exp(f_arg)?;
    let i_arg = g.shift(x.i_pre, -m_new)?;
    let i_gate = g.exp(i_arg)?;

    let vk = g.outer(x.v, x.k)?;
    let write = g.scalar_mul(i_gate, vk)?;
    let keep = g.scalar_mul(f_gate, state.c)?;
    let c = g.add(keep, write)?;

    let nk = g.scalar_mul(i_gate, x.k)?;
    let nf = g.scalar_mul(f_gate, state.n)?;
    let n = g.add(nf, nk)?;

    let nq = g.dot(n, x.q)?;
    let nq = g.abs(nq)?;
    let denom = g.clamp_min(nq, (-m_new).exp())?;
    let cq = g.matvec(c, x.q)?;
    let h_tilde = g.scalar_div(cq, denom)?;
    let h = g.mul(x.o_gate, h_tilde)?;
    Ok((StateVars { c, n, m: m_new }, h))
}

/// Projections of a whole `L×d` stream for one branch.
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub log_f: Var,
    pub o_gate: Var,
}

pub fn project(g: &mut Graph, z: Var, p: &BranchParams<Var>, forget: ForgetGate) -> Result<Projections> {
    let d = g.shape(z)[1];
    let q = linear(g, z, p.w_q, p.b_q)?;
    let k = g.matmul(z, p.w_k)?;
    let k = g.scale(k, 1.0 / (d as f64).sqrt())?;
    let k = g.add_bias(k, p.b_k)?;
    let v = linear(g, z, p.w_v, p.b_v)?;
    let f_pre = linear(g, z, p.w_f, p.b_f)?;
    let log_f = match forget {
        ForgetGate::Sigmoid => g.log_sigmoid(f_pre)?,
        ForgetGate::Exp => f_pre,
    };
    let o_pre = linear(g, z, p.w_o, p.b_o)?;
    let o_gate = g.sigmoid(o_pre)?;
    Ok(Projections { q, k, v, log_f, o_gate })
}

/// Runs one branch's recurrence left to right from a zero state, with
/// input-gate features `gate_x` (`L×d`). Returns the `L×d` hidden sequence
/// and the final state values.
pub fn mlstm_layer(
    g: &mut Graph,
    z: Var,
    gate_x: Var,
    p: &BranchParams<Var>,
    forget: ForgetGate,
) -> Result<(Var, MLSTMState)> {
    let (len, d) = (g.shape(z)[0], g.shape(z)[1]);
    let proj = project(g, z, p, forget)?;
    let i_pre = linear(g, gate_x, p.w_i, p.b_i)?;
    let mut state = StateVars::constant(g, &MLSTMState::zeros(d));
    let mut hs = Vec::with_capacity(len);
    for t in 0..len {
        let inputs = StepInputs {
            q: g.row(proj.q, t)?,
            k: g.row(proj.k, t)?,
            v: g.row(proj.v, t)?,
            i_pre: g.element(i_pre, t)?,
            log_f: g.element(proj.log_f, t)?,
            o_gate: g.row(proj.o_gate, t)?,
        };
        let (next, h) = step_var(g, &state, &inputs, t)?;
        state = next;
        hs.push(h);
    }
    let out = if len == 0 {
        g.constant(Tensor::zeros(&[0, d]))
    } else {
        g.stack_rows(&hs)?
    };
    let fin = MLSTMState {
        c: g.value(state.c).clone(),
        n: g.value(state.n).clone(),
        m: state.m,
    };
    Ok((out, fin))
}

/// Taped HP-xLSTM over full `L×d` streams; returns `(ẑ_h, ẑ_p)`.
pub fn hp_xlstm_var(
    g: &mut Graph,
    zh: Var,
    zp: Var,
    ph: &BranchParams<Var>,
    pp: &BranchParams<Var>,
    forget: ForgetGate,
    coupling: Coupling,
) -> Result<(Var, Var)> {
    check_pair(g.shape(zh), g.shape(zp))?;
    let (xh, xp) = match coupling {
        Coupling::Bca => bca_var(g, zh, zp, ph, pp)?,
        Coupling::Identity => (zh, zp),
    };
    let (hh, _) = mlstm_layer(g, zh, xh, ph, forget)?;
    let (hp, _) = mlstm_layer(g, zp, xp, pp, forget)?;
    Ok((hh, hp))
}

/// Bidirectional cross-attention on plain sequences; returns `(x̃_h, x̃_p)`.
pub fn bca(
    zh: &FeatureSequence,
    zp: &FeatureSequence,
    ph: &BranchParams,
    pp: &BranchParams,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let mut g = Graph::new();
    let (vh, vp) = (g.constant(zh.tensor().clone()), g.constant(zp.tensor().clone()));
    let (bh, bp) = (ph.bind(&mut g, false), pp.bind(&mut g, false));
    let (xh, xp) = bca_var(&mut g, vh, vp, &bh, &bp)?;
    Ok((
        FeatureSequence::from_tensor(g.value(xh).clone())?,
        FeatureSequence::from_tensor(g.value(xp).clone())?,
    ))
}

/// Attention weights `α` used to build the gate features of the branch
/// owning `params` (queries from `other`, keys from `own`).
pub fn attention_weights(other: &FeatureSequence, own: &FeatureSequence, params: &BranchParams) -> Result<Tensor> {
    check_pair(other.tensor().shape(), own.tensor().shape())?;
    let mut g = Graph::new();
    let (vo, vs) = (g.constant(other.tensor().clone()), g.constant(own.tensor().clone()));
    let p = params.bind(&mut g, false);
    let d = own.width();
    let q = g.matmul(vo, p.bca_q)?;
    let k = g.matmul(vs, p.bca_k)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    let a = g.softmax(s, 1)?;
    Ok(g.value(a).clone())
}

/// One recurrence step on plain values. `z_t` feeds the query, key, value,
/// forget and output projections; `i_tilde` is the input-gate
/// pre-activation produced by the BCA path.
pub fn mlstm_step(
    state: &MLSTMState,
    z_t: &[f64],
    i_tilde: f64,
    params: &BranchParams,
    forget: ForgetGate,
) -> Result<(MLSTMState, Vec<f64>)> {
    let d = params.width();
    if z_t.len() != d || state.c.shape() != [d, d] || state.n.shape() != [d] {
        return Err(Error::Dimension(format!("mlstm_step: width {d} expected")));
    }
    if i_tilde.is_nan() {
        return Err(Error::Numeric("NaN input gate at step 0".into()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let z = g.constant(Tensor::matrix(1, d, z_t.to_vec())?);
    let proj = project(&mut g, z, &p, forget)?;
    let inputs = StepInputs {
        q: g.row(proj.q, 0)?,
        k: g.row(proj.k, 0)?,
        v: g.row(proj.v, 0)?,
        i_pre: g.constant(Tensor::scalar(i_tilde.max(GATE_FLOOR))),
        log_f: g.element(proj.log_f, 0)?,
        o_gate: g.row(proj.o_gate, 0)?,
    };
    let st = StateVars::constant(&mut g, state);
    let (next, h) = step_var(&mut g, &st, &inputs, 0)?;
    Ok((
        MLSTMState {
            c: g.value(next.c).clone(),
            n: g.value(next.n).clone(),
            m: next.m,
        },
        g.value(h).data().to_vec(),
    ))
}

/// HP-xLSTM on plain sequences; returns `(ẑ_h, ẑ_p)`.
pub fn hp_xlstm(
    zh: &FeatureSequence,
    zp: &FeatureSequence,
    ph: &BranchParams,
    pp: &BranchParams,
    forget: ForgetGate,
    coupling: Coupling,
) -> Result<(FeatureSequence, FeatureSequence)> {
    let mut g = Graph::new();
    let (vh, vp) = (g.constant(zh.tensor().clone()), g.constant(zp.tensor().clone()));
    let (bh, bp) = (ph.bind(&mut g, false), pp.bind(&mut g, false));
    let (oh, op) = hp_xlstm_var(&mut g, vh, vp, &bh, &bp, forget, coupling)?;
    Ok((
        FeatureSequence::from_tensor(g.value(oh).clone())?,
        FeatureSequence::from_tensor(g.value(op).clone())?,
    ))
}
