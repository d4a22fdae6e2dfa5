//! Training objective: binary cross-entropy plus a boundary-alignment term,
//! equally weighted.
//!
//! The boundary sequence of an `L×C` matrix `y` is
//! `b_t = max_c |y_{t+1,c} − y_{t,c}|` for `t < L−1`, smoothed with the
//! zero-padded kernel `[1, 2, 1] / 4`. The boundary term is the mean squared
//! error between the smoothed sequences of prediction and ground truth, and
//! is zero for single-frame inputs.

use crate::error::{Error, Result};
use crate::numkit::{Graph, Tensor, Var};
use crate::sequence::LabelSequence;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;

fn check(pred: &LabelSequence, gt: &LabelSequence) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    if !gt.is_binary() {
        return Err(Error::Contract("ground-truth labels must be 0 or 1".into()));
    }
    if gt.is_empty() || gt.classes() == 0 {
        return Err(Error::Dimension("empty label sequence".into()));
    }
    Ok(())
}

/// Smoothed boundary sequence of plain values.
pub fn boundary_sequence(y: &LabelSequence) -> Vec<f64> {
    let len = y.len();
    if len < 2 {
        return Vec::new();
    }
    let raw: Vec<f64> = (0..len - 1)
        .map(|t| {
            y.frame(t + 1)
                .iter()
                .zip(y.frame(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    smooth(&raw)
}

fn smooth(b: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|t| {
            let left = if t > 0 { b[t - 1] } else { 0.0 };
            let right = if t + 1 < n { b[t + 1] } else { 0.0 };
            0.25 * left + 0.5 * b[t] + 0.25 * right
        })
        .collect()
}

fn smoothing_matrix(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for t in 0..n {
        m.data_mut()[t * n + t] = 0.5;
        if t > 0 {
            m.data_mut()[t * n + t - 1] = 0.25;
        }
        if t + 1 < n {
            m.data_mut()[t * n + t + 1] = 0.25;
        }
    }
    m
}

/// Loss of predicted probabilities against binary ground truth.
pub fn loss(pred: &LabelSequence, gt: &LabelSequence) -> Result<f64> {
    check(pred, gt)?;
    let bce = pred
        .tensor()
        .data()
        .iter()
        .zip(gt.tensor().data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / gt.tensor().len() as f64;
    let clamped = LabelSequence::from_tensor(pred.tensor().map(|p| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)))?;
    Ok(bce + boundary_mse(&boundary_sequence(&clamped), &boundary_sequence(gt)))
}

fn boundary_mse(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Taped loss from decoder logits. The cross-entropy is computed from the
/// logits directly, the boundary term from `sigmoid(logits)`.
pub fn loss_from_logits(g: &mut Graph, logits: Var, gt: &LabelSequence) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape != gt.tensor().shape() {
        return Err(Error::Dimension(format!("logits {shape:?} vs ground truth {:?}", gt.tensor().shape())));
    }
    if !gt.is_binary() {
        return Err(Error::Contract("ground-truth labels must be 0 or 1".into()));
    }
    let bce = g.bce_with_logits(logits, gt.tensor())?;
    let len = shape[0];
    if len < 2 {
        return Ok(bce);
    }
    let probs = g.sigmoid(logits)?;
    let next = g.slice_rows(probs, 1, len)?;
    let prev = g.slice_rows(probs, 0, len - 1)?;
    let diff = g.sub(next, prev)?;
    let diff = g.abs(diff)?;
    let raw = g.max_axis(diff, 1)?;
    let s = g.constant(smoothing_matrix(len - 1));
    let pred_b = g.matvec(s, raw)?;
    let target = g.constant(Tensor::vector(boundary_sequence(gt)));
    let err = g.sub(pred_b, target)?;
    let sq = g.mul(err, err)?;
    let mse = g.mean(sq)?;
    g.add(bce, mse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent scalar-loop transcription of the objective.
    fn oracle(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> f64 {
        let (l, c) = (gt.len(), gt[0].len());
        let clamp = |p: f64| p.max(1e-6).min(1.0 - 1e-6);
        let mut bce = 0.0;
        for t in 0..l {
            for k in 0..c {
                let p = clamp(pred[t][k]);
                bce -= if gt[t][k] == 1.0 { p.ln() } else { (1.0 - p).ln() };
            }
        }
        bce /= (l * c) as f64;
        if l < 2 {
            return bce;
        }
        let bnd = |y: &dyn Fn(usize, usize) -> f64| {
            let mut raw = vec![0.0; l - 1];
            for t in 0..l - 1 {
                for k in 0..c {
                    raw[t] = f64::max(raw[t], (y(t + 1, k) - y(t, k)).abs());
                }
            }
            let mut out = vec![0.0; l - 1];
            for t in 0..l - 1 {
                let mut acc = 2.0 * raw[t];
                if t >= 1 {
                    acc += raw[t - 1];
                }
                if t + 2 <= l - 1 {
                    acc += raw[t + 1];
                }
                out[t] = acc / 4.0;
            }
            out
        };
        let bp = bnd(&|t, k| clamp(pred[t][k]));
        let bg = bnd(&|t, k| gt[t][k]);
        let mut mse = 0.0;
        for t in 0..l - 1 {
            mse += (bp[t] - bg[t]).powi(2);
        }
        bce + mse / (l - 1) as f64
    }

    fn random_case(seed: u64, l: usize, c: usize) -> (LabelSequence, LabelSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..l * c).map(|_| rng.random::<f64>()).collect();
        let gt: Vec<f64> = (0..l * c).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        (LabelSequence::new(l, c, pred).unwrap(), LabelSequence::new(l, c, gt).unwrap())
    }

    fn rows(y: &LabelSequence) -> Vec<Vec<f64>> {
        (0..y.len()).map(|t| y.frame(t).to_vec()).collect()
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let (_, gt) = random_case(1, 12, 3);
        assert!(loss(&gt, &gt).unwrap() < 1e-4);
    }

    #[test]
    fn half_probability_gives_ln2() {
        let gt = LabelSequence::new(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let pred = LabelSequence::new(1, 3, vec![0.5; 3]).unwrap();
        assert!((loss(&pred, &gt).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        for seed in 0..20 {
            let (pred, gt) = random_case(seed, 2 + seed as usize, 1 + (seed % 4) as usize);
            let a = loss(&pred, &gt).unwrap();
            let b = oracle(&rows(&pred), &rows(&gt));
            assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn taped_loss_agrees_with_plain_loss() {
        let (pred, gt) = random_case(7, 9, 3);
        let logits = pred.tensor().map(|p| (p / (1.0 - p)).ln());
        let mut g = Graph::new();
        let v = g.constant(logits);
        let l = loss_from_logits(&mut g, v, &gt).unwrap();
        assert!((g.value(l).item() - loss(&pred, &gt).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn non_binary_ground_truth_is_rejected() {
        let gt = LabelSequence::new(2, 1, vec![0.5, 1.0]).unwrap();
        assert!(matches!(loss(&gt, &gt), Err(Error::Contract(_))));
    }
}
