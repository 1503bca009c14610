use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`unit_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax logits".into(),
            index,
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax logits".into(),
            index,
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&l| l - lse).collect())
}

pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>> {
    unit_normalize_with_norm(v).map(|(u, _)| u)
}

/// Returns the unit vector together with the original norm.
pub fn unit_normalize_with_norm(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    if v.is_empty() {
        return Err(Error::Empty("vector"));
    }
    let norm = l2_norm(v);
    if !(norm >= NORM_EPS) {
        return Err(Error::DegenerateNorm {
            norm,
            threshold: NORM_EPS,
        });
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// Logistic sigmoid, branching on sign so `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid expressed through its output `s`.
#[inline]
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Derivative of `tanh` expressed through its output `t`.
#[inline]
pub fn tanh_grad_from_output(t: f64) -> f64 {
    1.0 - t * t
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}
