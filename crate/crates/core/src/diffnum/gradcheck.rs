//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the forward function; it never looks at the
//! tape's backward pass, so it is an independent oracle for it.

use crate::scalar::Scalar;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient<S: Scalar>(x: &[S], h: f64, mut f: impl FnMut(&[S]) -> S) -> Vec<f64> {
    let mut probe = x.to_vec();
    let h_s = S::of(h);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h_s;
            let up = f(&probe).as_f64();
            probe[i] = orig - h_s;
            let down = f(&probe).as_f64();
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares an analytic gradient with central differences of `f` at `x`.
pub fn check_gradient<S: Scalar>(
    x: &[S],
    analytic: &[S],
    h: f64,
    floor: f64,
    f: impl FnMut(&[S]) -> S,
) -> GradCheck {
    let numeric = numeric_gradient(x, h, f);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: x.len(),
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        let a = a.as_f64();
        out.max_rel_err = out.max_rel_err.max(rel_err(a, *n, floor));
        out.max_abs_err = out.max_abs_err.max((a - n).abs());
    }
    out
}
