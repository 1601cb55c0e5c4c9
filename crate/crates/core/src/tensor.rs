//! Dense 64-bit matrices and the scalar math shared by every operation.
//!
//! All sequence data in this crate is time-major: a feature sequence with
//! `T` frames and width `F` is a `T x F` matrix. Vectors (biases, layer-norm
//! affines) are stored as `1 x F` matrices so a single type covers everything.

use ndarray::Array2;
use thiserror::Error;

/// Row-major dense matrix of 64-bit floats.
pub type Matrix = Array2<f64>;

/// Input value below which `log` is clamped to keep losses finite on
/// saturated softmax outputs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    DimMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op} requires {requirement}, got {got}")]
    BadArgument {
        op: &'static str,
        requirement: &'static str,
        got: String,
    },
    #[error("backward requires a scalar loss, got {got}")]
    NonScalarLoss { got: String },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

pub(crate) fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Build a matrix from nested row slices. Panics on ragged rows; this is a
/// fixture convenience, not a parsing surface.
pub fn matrix_from_rows(rows: &[&[f64]]) -> Matrix {
    let nrows = rows.len();
    let ncols = if nrows == 0 { 0 } else { rows[0].len() };
    let mut flat = Vec::with_capacity(nrows * ncols);
    for r in rows {
        assert_eq!(r.len(), ncols, "ragged rows");
        flat.extend_from_slice(r);
    }
    Matrix::from_shape_vec((nrows, ncols), flat).expect("consistent shape")
}

pub fn zeros(rows: usize, cols: usize) -> Matrix {
    Matrix::zeros((rows, cols))
}

// ── Buffer recycling ─────────────────────────────────────────────────
//
// A training step allocates thousands of short-lived matrices whose sizes
// repeat exactly across steps. Recycling their backing vectors avoids the
// page-fault traffic that otherwise dominates the backward pass. Contents
// of recycled buffers are stale; `pooled_uninit` is only for outputs that
// are fully overwritten before being read.

use std::cell::RefCell;
use std::collections::HashMap;

thread_local! {
    static BUF_POOL: RefCell<HashMap<usize, Vec<Vec<f64>>>> = RefCell::new(HashMap::new());
}

fn take_vec(len: usize) -> Option<Vec<f64>> {
    BUF_POOL.with(|p| p.borrow_mut().get_mut(&len).and_then(|v| v.pop()))
}

/// Matrix with unspecified contents; every element must be written before
/// any read.
pub(crate) fn pooled_uninit(rows: usize, cols: usize) -> Matrix {
    let len = rows * cols;
    let data = take_vec(len).unwrap_or_else(|| vec![0.0; len]);
    Matrix::from_shape_vec((rows, cols), data).expect("length matches")
}

/// Zero-filled matrix, reusing a pooled buffer when available.
pub(crate) fn pooled_zeros(rows: usize, cols: usize) -> Matrix {
    match take_vec(rows * cols) {
        Some(mut data) => {
            data.fill(0.0);
            Matrix::from_shape_vec((rows, cols), data).expect("length matches")
        }
        None => Matrix::zeros((rows, cols)),
    }
}

/// Return a matrix's storage to the pool.
pub(crate) fn recycle(m: Matrix) {
    if m.is_standard_layout() {
        let data = m.into_raw_vec();
        if data.capacity() == data.len() && !data.is_empty() {
            BUF_POOL.with(|p| p.borrow_mut().entry(data.len()).or_default().push(data));
        }
    }
}

/// GELU in its exact erf form: x * Phi(x) with Phi the standard normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of the exact-erf GELU: Phi(x) + x * phi(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exponential over a slice of non-positive values (softmax rows after max
/// subtraction), accurate to ~1 ulp. The branch-free rational form keeps
/// the loop vectorizable; inputs are floored at -708 where the true value
/// is already below the normal range.
pub(crate) fn exp_nonpos_slice(xs: &mut [f64]) {
    const C1: f64 = 6.931_457_519_531_25e-1;
    const C2: f64 = 1.428_606_820_309_417_2e-6;
    const P0: f64 = 1.261_771_930_748_105_9e-4;
    const P1: f64 = 3.029_944_077_074_419_6e-2;
    const P2: f64 = 9.999_999_999_999_999e-1;
    const Q0: f64 = 3.001_985_051_386_644_6e-6;
    const Q1: f64 = 2.524_483_403_496_841e-3;
    const Q2: f64 = 2.272_655_482_081_550_3e-1;
    const Q3: f64 = 2.0;
    for v in xs.iter_mut() {
        let x = (*v).max(-708.0);
        let k = (std::f64::consts::LOG2_E * x + 0.5).floor();
        let r = x - k * C1 - k * C2;
        let rr = r * r;
        let p = r * ((P0 * rr + P1) * rr + P2);
        let q = ((Q0 * rr + Q1) * rr + Q2) * rr + Q3;
        let e = 1.0 + 2.0 * p / (q - p);
        let bits = ((k as i64 + 1023) as u64) << 52;
        *v = e * f64::from_bits(bits);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        let cases = [
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (0.7071067811865476, 0.6826894921370859),
            (2.0, 0.9953222650189527),
        ];
        for (x, want) in cases {
            assert!((libm::erf(x) - want).abs() < 1e-14, "erf({x})");
            assert!((libm::erf(-x) + want).abs() < 1e-14, "erf(-{x})");
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.8413447460685429).abs() < 1e-12);
        // gelu(x) - gelu(-x) = x exactly, from the CDF reflection identity.
        for x in [0.3, 1.7, -2.2] {
            assert!((gelu_scalar(x) - gelu_scalar(-x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for x in [-3.0, -1.0, -0.1, 0.0, 0.5, 1.0, 2.5] {
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!(
                (gelu_grad_scalar(x) - fd).abs() < 1e-8,
                "x={x}: {} vs {fd}",
                gelu_grad_scalar(x)
            );
        }
    }

    #[test]
    fn fast_exp_matches_std_within_ulps() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -708.0 * (i as f64 / 200_000.0);
            let mut v = [x];
            exp_nonpos_slice(&mut v);
            let want = x.exp();
            let rel = if want > 0.0 {
                (v[0] - want).abs() / want
            } else {
                v[0].abs()
            };
            worst = worst.max(rel);
        }
        assert!(worst < 1e-15, "worst rel deviation {worst}");
        let mut zero = [0.0];
        exp_nonpos_slice(&mut zero);
        assert_eq!(zero[0], 1.0, "exp(0) must be exactly one");
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        for x in [0.1, 1.0, 5.0, 30.0] {
            let s = sigmoid_scalar(x);
            assert!((sigmoid_scalar(-x) - (1.0 - s)).abs() < 1e-15);
        }
    }
}
