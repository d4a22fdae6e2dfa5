use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::sequence::{FeatureSequence, LabelSequence};

/// Exhaustive search covers `2^C` labelsets, so `C` is capped.
pub const ORACLE_MAX_CLASSES: usize = 16;

/// Per-frame labelset whose prototype sum is nearest (Euclidean) to the
/// frame's signal block (the first `D` channels; the reference block is
/// ignored). Ties go to the lexicographically smaller bitmask.
pub fn nearest_prototype_decode(x: &FeatureSequence, protos: &Tensor) -> Result<LabelSequence> {
    let (classes, dim) = (protos.rows(), protos.cols());
    if classes > ORACLE_MAX_CLASSES {
        return Err(Error::Config(format!("oracle supports at most {ORACLE_MAX_CLASSES} classes")));
    }
    if x.width() < dim {
        return Err(Error::Dimension(format!("features of width {} for prototypes of width {dim}", x.width())));
    }
    let sums: Vec<Vec<f64>> = (0..1usize << classes)
        .map(|mask| {
            let mut s = vec![0.0; dim];
            for c in (0..classes).filter(|c| mask >> c & 1 == 1) {
                s.iter_mut().zip(protos.row(c)).for_each(|(a, b)| *a += b);
            }
            s
        })
        .collect();
    let mut out = LabelSequence::zeros(x.len(), classes).into_tensor();
    for t in 0..x.len() {
        let frame = &x.frame(t)[..dim];
        let best = sums
            .iter()
            .enumerate()
            .map(|(mask, s)| (mask, s.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc })
            .0;
        for c in 0..classes {
            out.row_mut(t)[c] = (best >> c & 1) as f64;
        }
    }
    LabelSequence::from_tensor(out)
}
