//! Temporal discrete Fourier transform and frequency-domain decoder conditions.
//!
//! The forward transform is unnormalized, `X_k = Σ_t x_t e^{-2πikt/L}` per
//! channel; the inverse carries the `1/L`. Complex bins are stored as real
//! parts followed by imaginary parts, so an `L×D` input gives an `L×2D`
//! output. Lengths that are powers of two go through an iterative radix-2
//! path, everything else through the direct `O(L²)` sum.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numkit::{CustomOp, Graph, Tensor, Var};
use crate::sequence::FeatureSequence;

/// `L×2D` spectrum: columns `0..D` real parts, `D..2D` imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyFeatures(Tensor);

impl FrequencyFeatures {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] % 2 != 0 {
            return Err(Error::Dimension(format!(
                "frequency features must be L×2D, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of complex channels `D`.
    pub fn channels(&self) -> usize {
        self.0.shape()[1] / 2
    }

    pub fn bin(&self, k: usize, channel: usize) -> Complex64 {
        let d = self.channels();
        let row = self.0.row(k);
        Complex64::new(row[channel], row[d + channel])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Direct `O(L²)` transform of one complex signal. `inverse` flips the sign
/// of the exponent; no normalization is applied.
pub fn dft_naive(signal: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = signal.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            signal
                .iter()
                .enumerate()
                .map(|(t, &x)| {
                    // Reduce k·t mod n first so the angle stays small.
                    let angle = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    x * Complex64::from_polar(1.0, angle)
                })
                .sum()
        })
        .collect()
}

/// Iterative radix-2 Cooley–Tukey; `signal.len()` must be a power of two.
pub fn fft_radix2(signal: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = signal.len();
    assert!(n.is_power_of_two(), "radix-2 transform needs a power-of-two length");
    let bits = n.trailing_zeros();
    let mut a: Vec<Complex64> = if n == 1 {
        signal.to_vec()
    } else {
        (0..n)
            .map(|i| signal[i.reverse_bits() >> (usize::BITS - bits)])
            .collect()
    };
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|j| Complex64::from_polar(1.0, sign * 2.0 * PI * j as f64 / size as f64))
            .collect();
        for start in (0..n).step_by(size) {
            for j in 0..half {
                let u = a[start + j];
                let v = a[start + j + half] * twiddles[j];
                a[start + j] = u + v;
                a[start + j + half] = u - v;
            }
        }
        size *= 2;
    }
    a
}

fn transform(signal: &[Complex64], inverse: bool) -> Vec<Complex64> {
    if signal.len().is_power_of_two() {
        fft_radix2(signal, inverse)
    } else {
        dft_naive(signal, inverse)
    }
}

fn column(x: &Tensor, c: usize) -> Vec<Complex64> {
    let w = x.shape()[1];
    (0..x.shape()[0])
        .map(|t| Complex64::new(x.data()[t * w + c], 0.0))
        .collect()
}

fn forward_tensor(x: &Tensor, naive: bool) -> Tensor {
    let (len, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; len * 2 * d];
    for c in 0..d {
        let col = column(x, c);
        let spec = if naive { dft_naive(&col, false) } else { transform(&col, false) };
        for (k, z) in spec.iter().enumerate() {
            out[k * 2 * d + c] = z.re;
            out[k * 2 * d + d + c] = z.im;
        }
    }
    Tensor::new(&[len, 2 * d], out).expect("shape arithmetic")
}

/// Real part of the inverse transform of an `L×2D` spectrum, scaled by `scale / L`.
fn inverse_tensor(f: &Tensor, scale: f64) -> Tensor {
    let (len, d) = (f.shape()[0], f.shape()[1] / 2);
    let mut out = vec![0.0; len * d];
    for c in 0..d {
        let spec: Vec<Complex64> = (0..len)
            .map(|k| Complex64::new(f.data()[k * 2 * d + c], f.data()[k * 2 * d + d + c]))
            .collect();
        let sig = transform(&spec, true);
        for (t, z) in sig.iter().enumerate() {
            out[t * d + c] = z.re * scale / len as f64;
        }
    }
    Tensor::new(&[len, d], out).expect("shape arithmetic")
}

/// Per-channel temporal DFT of an `L×D` sequence.
pub fn dft_time(x: &FeatureSequence) -> FrequencyFeatures {
    FrequencyFeatures(forward_tensor(x.tensor(), false))
}

/// Same as [`dft_time`] but always through the direct summation.
pub fn dft_time_naive(x: &FeatureSequence) -> FrequencyFeatures {
    FrequencyFeatures(forward_tensor(x.tensor(), true))
}

/// Inverse of [`dft_time`], keeping real parts.
pub fn idft_time(f: &FrequencyFeatures) -> FeatureSequence {
    FeatureSequence::from_tensor(inverse_tensor(f.tensor(), 1.0)).expect("rank 2")
}

/// The adjoint of the forward transform is `L · Re(idft(g))`.
struct DftOp;

impl CustomOp for DftOp {
    fn name(&self) -> &'static str {
        "dft_time"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let len = inputs[0].shape()[0] as f64;
        vec![Some(inverse_tensor(grad, len))]
    }
}

/// Taped [`dft_time`] on an `L×D` value.
pub fn dft_time_var(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    if t.rank() != 2 {
        return Err(Error::Dimension(format!("dft_time expects L×D, got {:?}", t.shape())));
    }
    let value = forward_tensor(t, false);
    g.custom(&[x], value, Box::new(DftOp))
}

/// Decoder conditions for one branch.
///
/// `temporal` is the HP-xLSTM output, `frequency` its spectrum, `raw` the
/// encoder output the recurrence consumed.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    pub temporal: FeatureSequence,
    pub frequency: Option<FrequencyFeatures>,
    pub raw: FeatureSequence,
}

impl ConditionBundle {
    /// Total channel count once concatenated: `d + 2d + d`, or `2d` without
    /// the frequency part.
    pub fn width(&self) -> usize {
        self.temporal.width() + self.frequency.as_ref().map_or(0, |f| 2 * f.channels()) + self.raw.width()
    }

    pub fn len(&self) -> usize {
        self.temporal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_conditions(z: &FeatureSequence, z_hat: &FeatureSequence) -> Result<ConditionBundle> {
    if z.len() != z_hat.len() {
        return Err(Error::Contract(format!(
            "encoder output has {} frames, HP-xLSTM output {}",
            z.len(),
            z_hat.len()
        )));
    }
    Ok(ConditionBundle {
        temporal: z_hat.clone(),
        frequency: Some(dft_time(z_hat)),
        raw: z.clone(),
    })
}
