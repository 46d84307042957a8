//! Dense `f64` linear algebra with a reverse-mode tape and a
//! central-difference gradient oracle.

mod fd;
mod graph;
mod tensor;

pub use fd::{finite_diff_grad, finite_diff_grad_fourth_order, max_relative_error, relative_error, DEFAULT_FD_STEP};
pub use graph::{Graph, Var};
pub use tensor::{Mask, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn ensure_finite(t: Tensor, op: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_finite(matmul_raw(a, b)?, "matmul")
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// Row-wise softmax restricted to the positions allowed by `mask`.
///
/// Disallowed positions are exactly zero. A row with no allowed position is
/// a precondition error.
pub fn masked_softmax(logits: &Tensor, mask: &Mask) -> Result<Tensor> {
    ensure_finite(masked_softmax_raw(logits, mask)?, "masked_softmax")
}

pub(crate) fn masked_softmax_raw(logits: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (r, c) = (logits.rows(), logits.cols());
    if mask.rows() != r || mask.cols() != c {
        return Err(Error::dim(
            "masked_softmax",
            logits.shape(),
            &[mask.rows(), mask.cols()],
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let allowed = mask.row(i);
        let row = logits.row(i);
        let max = row
            .iter()
            .zip(allowed)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Precondition(format!(
                "masked_softmax: row {i} has no allowed position"
            )));
        }
        let dst = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for j in 0..c {
            if allowed[j] {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_raw(logits.shape().to_vec(), out))
}

/// Per-row standardization followed by `gain * x̂ + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (y, _, _) = layer_norm_raw(x, gain, bias, eps)?;
    ensure_finite(y, "layer_norm")
}

/// Returns the output, the standardized input and per-row `1/σ`.
pub(crate) fn layer_norm_raw(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (r, d) = (x.rows(), x.cols());
    if gain.len() != d {
        return Err(Error::dim("layer_norm gain", x.shape(), gain.shape()));
    }
    if bias.len() != d {
        return Err(Error::dim("layer_norm bias", x.shape(), bias.shape()));
    }
    let mut y = vec![0.0; r * d];
    let mut xhat = vec![0.0; r * d];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[i] = s;
        for j in 0..d {
            let h = if var == 0.0 { 0.0 } else { (row[j] - mean) * s };
            xhat[i * d + j] = h;
            y[i * d + j] = gain.data()[j] * h + bias.data()[j];
        }
    }
    Ok((
        Tensor::from_raw(x.shape().to_vec(), y),
        Tensor::from_raw(x.shape().to_vec(), xhat),
        inv_std,
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log Σ exp(v)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
