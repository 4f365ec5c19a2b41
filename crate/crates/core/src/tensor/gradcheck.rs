//! Central-difference gradient checking.
//!
//! The numeric side never touches the tape's reverse pass: it re-runs the
//! forward map on perturbed copies of the input, so it is an independent
//! oracle for every backward rule.

use super::{Tape, Tensor};

/// Result of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
    pub max_rel_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `f` at `x0` against central differences
/// with half-step `h`.
///
/// `f` must produce a scalar from the given tape and input. The check
/// evaluates `f` twice per input coordinate, so keep inputs small. Choosing
/// `h` trades truncation error (`h` too large) against floating-point
/// cancellation (`h` too small); `1e-5`..`1e-6` works well for the
/// well-scaled inputs used here.
pub fn finite_diff_check<F>(f: F, x0: &Tensor, h: f64) -> GradCheck
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let tape = Tape::new();
    let x = tape.var(x0);
    let out = f(&tape, &x);
    assert_eq!(
        out.numel(),
        1,
        "finite_diff_check: f must return a scalar, got shape {:?}",
        out.shape()
    );
    let analytic = if out.node().is_some() {
        tape.backward(&out).wrt_or_zero(&x)
    } else {
        vec![0.0; x0.numel()]
    };

    let mut numeric = Vec::with_capacity(x0.numel());
    for i in 0..x0.numel() {
        let eval = |delta: f64| -> f64 {
            let mut probe = Tensor::new(x0.shape(), x0.to_vec());
            probe.data_mut()[i] += delta;
            let inference = Tape::inference();
            f(&inference, &probe).item()
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);
    GradCheck { max_rel_err, analytic, numeric }
}
