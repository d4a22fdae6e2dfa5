use super::config::TrainConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Adam moments for every parameter of a [`ParamStore`], in the same order.
///
/// After each update, parameters and moments are rounded to 32-bit precision
/// so a run resumed from a checkpoint continues bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract("gradient count does not match parameter count".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            for (((pj, mj), vj), &gj) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mj = to_f32(cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj);
                *vj = to_f32(cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj);
                let step = cfg.lr * (*mj / bc1) / ((*vj / bc2).sqrt() + cfg.adam_eps);
                *pj = to_f32(*pj - step);
            }
        }
        Ok(())
    }
}

fn to_f32(x: f64) -> f64 {
    x as f32 as f64
}
