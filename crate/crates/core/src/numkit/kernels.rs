//! Slice-level kernels shared by the forward and backward passes.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c = a (m×k) · b (k×n)`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
    c
}

/// `da += dc (m×n) · bᵀ`
pub fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(dcrow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db += aᵀ · dc (m×n)`
pub fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, dcrow, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Temporal offset of tap `k` for a centered kernel of odd width.
#[inline]
pub fn tap_offset(k: usize, width: usize, dilation: usize) -> isize {
    (k as isize - (width / 2) as isize) * dilation as isize
}

/// Centered dilated convolution along time with zero padding.
///
/// `x` is `len × d_in`, `w` is `width × d_in × d_out`.
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    len: usize,
    d_in: usize,
    d_out: usize,
    width: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; len * d_out];
    for t in 0..len {
        let orow = &mut out[t * d_out..(t + 1) * d_out];
        for k in 0..width {
            let s = t as isize + tap_offset(k, width, dilation);
            if s < 0 || s >= len as isize {
                continue;
            }
            let s = s as usize;
            let xrow = &x[s * d_in..(s + 1) * d_in];
            let wk = &w[k * d_in * d_out..(k + 1) * d_in * d_out];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, &wk[ci * d_out..(ci + 1) * d_out], orow);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    len: usize,
    d_in: usize,
    d_out: usize,
    width: usize,
    dilation: usize,
) {
    if let Some(dx) = dx {
        for t in 0..len {
            let grow = &dout[t * d_out..(t + 1) * d_out];
            for k in 0..width {
                let s = t as isize + tap_offset(k, width, dilation);
                if s < 0 || s >= len as isize {
                    continue;
                }
                let s = s as usize;
                let wk = &w[k * d_in * d_out..(k + 1) * d_in * d_out];
                for ci in 0..d_in {
                    dx[s * d_in + ci] += dot(grow, &wk[ci * d_out..(ci + 1) * d_out]);
                }
            }
        }
    }
    if let Some(dw) = dw {
        for t in 0..len {
            let grow = &dout[t * d_out..(t + 1) * d_out];
            for k in 0..width {
                let s = t as isize + tap_offset(k, width, dilation);
                if s < 0 || s >= len as isize {
                    continue;
                }
                let s = s as usize;
                let dwk = &mut dw[k * d_in * d_out..(k + 1) * d_in * d_out];
                for ci in 0..d_in {
                    let xv = x[s * d_in + ci];
                    if xv != 0.0 {
                        axpy(xv, grow, &mut dwk[ci * d_out..(ci + 1) * d_out]);
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, n, inner)` extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x[idx(j)] - max).exp();
                y[idx(j)] = e;
                sum += e;
            }
            for j in 0..n {
                y[idx(j)] /= sum;
            }
        }
    }
    y
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without cancellation.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Mean-free binary cross-entropy term on a logit.
#[inline]
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
