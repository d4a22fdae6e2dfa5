use super::model::SegModel;
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sequence::{FeatureSequence, LabelSequence};

/// Probabilities above this (strictly) become active labels.
pub const THRESHOLD: f64 = 0.5;

/// Result of sampling both branches for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Per-branch probabilities, holistic first.
    pub branches: Vec<LabelSequence>,
    /// Elementwise mean of the branch probabilities.
    pub probabilities: LabelSequence,
    /// `probabilities` binarized at [`THRESHOLD`].
    pub labels: LabelSequence,
}

/// Elementwise mean of equally shaped probability matrices.
pub fn merge(outputs: &[LabelSequence]) -> Result<LabelSequence> {
    let first = outputs.first().ok_or_else(|| Error::Contract("nothing to merge".into()))?;
    if outputs.iter().any(|o| !o.same_shape(first)) {
        return Err(Error::Dimension("branch outputs differ in shape".into()));
    }
    let n = outputs.len() as f64;
    let mut data = vec![0.0; first.tensor().len()];
    for o in outputs {
        for (a, b) in data.iter_mut().zip(o.tensor().data()) {
            *a += b;
        }
    }
    data.iter_mut().for_each(|v| *v /= n);
    LabelSequence::new(first.len(), first.classes(), data)
}

/// Runs the reverse diffusion once per active branch, each from its own
/// noise stream derived from `seed`, and merges the final probabilities.
pub fn infer(
    model: &SegModel,
    holistic: &FeatureSequence,
    partial: &FeatureSequence,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Inference> {
    let conds = model.conditions(holistic, partial)?;
    let (len, classes) = (holistic.len(), model.config.classes);
    let mut branches = Vec::with_capacity(conds.len());
    for (i, (cond, &which)) in conds.iter().zip(model.branches()).enumerate() {
        let mut denoiser = |y: &LabelSequence, t: usize| -> Result<LabelSequence> {
            let probs = model.denoise(y, t, cond, which)?;
            Ok(model.to_diffusion_space(&probs))
        };
        let traj = sample(&mut denoiser, len, classes, sched, steps, derive_seed(seed, i as u64))?;
        let last = traj.last().expect("trajectory holds at least the initial state");
        branches.push(model.from_diffusion_space(last));
    }
    let probabilities = merge(&branches)?;
    let labels = probabilities.binarize(THRESHOLD);
    Ok(Inference {
        branches,
        probabilities,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_of_equal_outputs_is_identity() {
        let a = LabelSequence::new(2, 2, vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        assert_eq!(merge(&[a.clone(), a.clone()]).unwrap(), a);
    }

    #[test]
    fn disagreement_ties_binarize_to_zero() {
        let h = LabelSequence::new(1, 1, vec![1.0]).unwrap();
        let p = LabelSequence::new(1, 1, vec![0.0]).unwrap();
        let m = merge(&[h, p]).unwrap();
        assert_eq!(m.tensor().data(), &[0.5]);
        assert_eq!(m.binarize(THRESHOLD).tensor().data(), &[0.0]);
    }
}
