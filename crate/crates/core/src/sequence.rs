//! Per-frame sequences: real-valued features and multi-label frame matrices.

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// `L×D` per-frame features for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(len: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::new(&[len, width], data)?))
    }

    pub fn zeros(len: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[len, width]))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Dimension(format!(
                "feature sequence must be L×D, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t.without_grad()))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.0.data()[t * self.width()..(t + 1) * self.width()]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `L×C` frame-by-class matrix: ground truth in `{0,1}`, diffusion states
/// unconstrained, decoded probabilities in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSequence(Tensor);

impl LabelSequence {
    pub fn new(len: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::new(&[len, classes], data)?))
    }

    pub fn zeros(len: usize, classes: usize) -> Self {
        Self(Tensor::zeros(&[len, classes]))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Dimension(format!(
                "label sequence must be L×C, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t.without_grad()))
    }

    /// One frame per entry, each given as the set of active class ids.
    pub fn from_labelsets(sets: &[Vec<usize>], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; sets.len() * classes];
        for (t, set) in sets.iter().enumerate() {
            for &c in set {
                if c >= classes {
                    return Err(Error::Contract(format!("class {c} out of {classes}")));
                }
                data[t * classes + c] = 1.0;
            }
        }
        Self::new(sets.len(), classes, data)
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.0.data()[t * self.classes()..(t + 1) * self.classes()]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Sorted active classes of frame `t` (entries equal to 1).
    pub fn labelset(&self, t: usize) -> Vec<usize> {
        self.frame(t)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(c, _)| c)
            .collect()
    }

    /// 1 where the value is strictly greater than `threshold`, else 0.
    pub fn binarize(&self, threshold: f64) -> Self {
        Self(self.0.map(|v| if v > threshold { 1.0 } else { 0.0 }))
    }

    pub fn same_shape(&self, other: &LabelSequence) -> bool {
        self.0.shape() == other.0.shape()
    }
}
