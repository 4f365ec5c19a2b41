//! Simulated uniform affine quantization.
//!
//! The quantizer maps a real tensor `X` onto `b`-bit integer codes via
//! `X_q = clip(round(X / s) + z, 0, 2^b - 1)` and reconstructs with
//! `X_hat = s * (X_q - z)`. Everything here is *simulated*: codes are held in
//! `u32` and reconstruction happens immediately, so a quantized forward pass
//! is the original float graph with `fake_quant` inserted at chosen points.
//!
//! Range estimation comes in four flavours:
//!
//! * [`minmax_params`] — the exact span of the tensor.
//! * [`mse_estimator`] — shrinks the span by a factor `c` and keeps the `c`
//!   minimizing reconstruction error; useful when a few outliers would
//!   otherwise stretch the grid.
//! * [`CalibrationState`] — an exponential moving average of per-batch
//!   min/max, for activations observed over a stream of batches.
//! * [`percentile_range`] — clips the span to symmetric percentiles of a
//!   retained sample buffer.
//!
//! Rounding is half-away-from-zero throughout, and the zero point is always
//! clamped into `[0, 2^b - 1]` so codes and zero point alike fit in `b` bits.
//! The clamp is exact for any range straddling zero; for ranges lying far on
//! one side of zero (say all values in `[2, 6]`) it pins the zero point to an
//! endpoint and reconstruction degrades — acceptable here because every
//! tensor we calibrate is either a weight centred near zero or an activation
//! whose observed range includes it.

use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub mod model_quant;

pub use model_quant::{quantize_model, QuantScheme, QuantizedModel, SpecRecord};

// ---------------------------------------------------------------------------
// Specs and code tensors
// ---------------------------------------------------------------------------

/// Which statistic of the data chooses the quantization range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeEstimator {
    /// Exact min/max of the tensor.
    MinMax,
    /// Grid search over symmetric range shrink factors, minimizing MSE.
    Mse,
    /// Momentum-averaged per-batch min/max (activations).
    RunningMinMax,
    /// Symmetric percentiles of retained samples (activations).
    Percentile,
}

impl std::fmt::Display for RangeEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            RangeEstimator::MinMax => "min_max",
            RangeEstimator::Mse => "mse",
            RangeEstimator::RunningMinMax => "running_min_max",
            RangeEstimator::Percentile => "percentile",
        };
        f.write_str(name)
    }
}

/// Whether a spec quantizes a stored weight or a streamed activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weight,
    Activation,
}

/// A fully resolved per-tensor quantizer: bit width, scale, zero point, and
/// bookkeeping about how the range was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    /// Bit width `b >= 2`; codes live in `[0, 2^b - 1]`.
    pub bits: u32,
    /// Positive step size between adjacent codes.
    pub scale: f64,
    /// Integer code that reconstructs to exactly zero, clamped to `[0, 2^b - 1]`.
    pub zero_point: i64,
    /// How the range was estimated.
    pub estimator: RangeEstimator,
    /// What kind of tensor this spec applies to.
    pub target: QuantTarget,
    /// True when the calibrated range had zero width and the fallback
    /// (`s = 1`) was used.
    pub degenerate: bool,
}

impl QuantizerSpec {
    /// Largest representable code, `2^b - 1`.
    pub fn max_code(&self) -> u32 {
        max_code(self.bits)
    }

    /// The reconstruction value of code `q`: `s * (q - z)`.
    pub fn decode(&self, code: u32) -> f64 {
        self.scale * (code as i64 - self.zero_point) as f64
    }
}

fn max_code(bits: u32) -> u32 {
    assert!(
        (2..=31).contains(&bits),
        "quantizer: bit width must be in [2, 31], got {bits}"
    );
    (1u32 << bits) - 1
}

/// Integer codes plus the spec that produced them.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    values: Vec<u32>,
    spec: QuantizerSpec,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn spec(&self) -> &QuantizerSpec {
        &self.spec
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

// ---------------------------------------------------------------------------
// Core transform
// ---------------------------------------------------------------------------

/// Round half away from zero, the tie rule used for all code assignment.
fn round_ties_away(x: f64) -> f64 {
    x.round()
}

fn clamp_zero_point(z: f64, bits: u32) -> i64 {
    let hi = max_code(bits) as f64;
    round_ties_away(z).clamp(0.0, hi) as i64
}

/// Scale and zero point for a closed range `[lo, hi]`.
///
/// Returns `(s, z, degenerate)`. A zero-width range falls back to `s = 1`,
/// `z = -round(lo)` (clamped), which reconstructs the constant exactly
/// whenever it is a representable integer multiple of the fallback scale.
pub fn params_from_range(lo: f64, hi: f64, bits: u32) -> (f64, i64, bool) {
    assert!(
        lo.is_finite() && hi.is_finite() && lo <= hi,
        "quantizer: invalid range [{lo}, {hi}]"
    );
    let levels = max_code(bits) as f64;
    if hi == lo {
        let z = clamp_zero_point(-round_ties_away(lo), bits);
        return (1.0, z, true);
    }
    let s = (hi - lo) / levels;
    let z = clamp_zero_point(-round_ties_away(lo / s), bits);
    (s, z, false)
}

/// Grid parameters for the smallest range covering both `[lo, hi]` and zero.
///
/// Calibrated grids always contain zero so the zero-point code stays inside
/// `[0, 2^b - 1]`. A span that excludes zero — a normalization gain hovering
/// around 1.0, probabilities bunched near `1/T` — would otherwise push the
/// zero-point far past the code boundary, and the mandatory clamp would then
/// shift every reconstruction in the tensor by the same large offset.
pub fn anchored_params(lo: f64, hi: f64, bits: u32) -> (f64, i64, bool) {
    params_from_range(lo.min(0.0), hi.max(0.0), bits)
}

/// Min/max calibration over a slice of finite values. Non-degenerate grids
/// are anchored at zero (see [`anchored_params`]); a constant tensor keeps
/// the `s = 1` fallback so the constant itself stays on the grid.
pub fn minmax_params(x: &[f64], bits: u32) -> Result<(f64, i64, bool)> {
    let (lo, hi) = finite_span(x, "minmax_params")?;
    if hi == lo {
        return Ok(params_from_range(lo, hi, bits));
    }
    Ok(anchored_params(lo, hi, bits))
}

fn finite_span(x: &[f64], op: &'static str) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(LabError::invalid(op, "empty tensor"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        if !v.is_finite() {
            return Err(LabError::invalid(op, format!("non-finite value {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Map values to integer codes: `clip(round(x / s) + z, 0, 2^b - 1)`.
pub fn quantize(x: &[f64], shape: &[usize], spec: &QuantizerSpec) -> Result<QuantizedTensor> {
    assert!(spec.scale > 0.0, "quantize: scale must be positive");
    assert_eq!(
        x.len(),
        shape.iter().product::<usize>(),
        "quantize: data length {} does not match shape {:?}",
        x.len(),
        shape
    );
    let hi = spec.max_code() as i64;
    let mut values = Vec::with_capacity(x.len());
    for &v in x {
        if !v.is_finite() {
            return Err(LabError::invalid("quantize", format!("non-finite value {v}")));
        }
        let code = (round_ties_away(v / spec.scale) as i64 + spec.zero_point).clamp(0, hi);
        values.push(code as u32);
    }
    Ok(QuantizedTensor {
        values,
        spec: spec.clone(),
        shape: shape.to_vec(),
    })
}

/// Reconstruct real values from codes: `s * (q - z)`.
pub fn dequantize(xq: &QuantizedTensor) -> Vec<f64> {
    xq.values.iter().map(|&q| xq.spec.decode(q)).collect()
}

/// Simulated quantization: quantize then immediately dequantize.
pub fn fake_quant(x: &[f64], spec: &QuantizerSpec) -> Result<Vec<f64>> {
    let shape = [x.len()];
    let xq = quantize(x, &shape, spec)?;
    Ok(dequantize(&xq))
}

// ---------------------------------------------------------------------------
// Range estimators
// ---------------------------------------------------------------------------

/// Settings for the MSE range search.
pub const MSE_SHRINK_LO: f64 = 0.3;
pub const MSE_SHRINK_HI: f64 = 1.0;
pub const MSE_GRID_DEFAULT: usize = 64;

/// Grid-search the symmetric shrink factor `c` applied to the min/max range,
/// keeping the candidate whose round-trip squared error is smallest. Every
/// candidate grid is anchored at zero (see [`anchored_params`]). Ties go to
/// the larger `c` (the wider range).
pub fn mse_estimator(w: &[f64], bits: u32, grid: usize) -> Result<(f64, i64, bool)> {
    assert!(grid >= 2, "mse_estimator: grid must have at least 2 points");
    let (lo, hi) = finite_span(w, "mse_estimator")?;
    if hi == lo {
        return Ok(params_from_range(lo, hi, bits));
    }
    let mut best: Option<(f64, (f64, i64, bool))> = None;
    for i in 0..grid {
        let c = MSE_SHRINK_LO
            + (MSE_SHRINK_HI - MSE_SHRINK_LO) * (i as f64) / ((grid - 1) as f64);
        let (s, z, degenerate) = anchored_params(lo * c, hi * c, bits);
        let spec = QuantizerSpec {
            bits,
            scale: s,
            zero_point: z,
            estimator: RangeEstimator::Mse,
            target: QuantTarget::Weight,
            degenerate,
        };
        let recon = fake_quant(w, &spec)?;
        let err: f64 = w
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // `<=` so that equal-error candidates at larger c replace earlier ones.
        let better = match &best {
            None => true,
            Some((best_err, _)) => err <= *best_err,
        };
        if better {
            best = Some((err, (s, z, degenerate)));
        }
    }
    Ok(best.expect("grid >= 2 guarantees at least one candidate").1)
}

/// Exponential-moving-average min/max over a stream of batches, with an
/// optional retained sample buffer for percentile estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationState {
    running_min: f64,
    running_max: f64,
    /// EMA weight on the previous estimate; `(0, 1)`.
    momentum: f64,
    batches_seen: u64,
    /// Flattened values retained for percentile estimation, when enabled.
    sample_buffer: Option<Vec<f64>>,
}

impl CalibrationState {
    /// A fresh state. `keep_samples` enables the percentile buffer.
    pub fn new(momentum: f64, keep_samples: bool) -> Self {
        assert!(
            momentum > 0.0 && momentum < 1.0,
            "calibration: momentum must lie in (0, 1), got {momentum}"
        );
        CalibrationState {
            running_min: f64::INFINITY,
            running_max: f64::NEG_INFINITY,
            momentum,
            batches_seen: 0,
            sample_buffer: if keep_samples { Some(Vec::new()) } else { None },
        }
    }

    pub fn running_min(&self) -> f64 {
        self.running_min
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    pub fn samples(&self) -> Option<&[f64]> {
        self.sample_buffer.as_deref()
    }

    /// Fold one batch of observed values into the running range. The first
    /// batch sets the range outright; later batches blend with momentum `m`:
    /// `run <- m * run + (1 - m) * batch`.
    pub fn update(&mut self, batch: &[f64]) -> Result<()> {
        let (lo, hi) = finite_span(batch, "running_minmax_update")?;
        if self.batches_seen == 0 {
            self.running_min = lo;
            self.running_max = hi;
        } else {
            let m = self.momentum;
            self.running_min = m * self.running_min + (1.0 - m) * lo;
            self.running_max = m * self.running_max + (1.0 - m) * hi;
        }
        self.batches_seen += 1;
        if let Some(buf) = &mut self.sample_buffer {
            buf.extend_from_slice(batch);
        }
        Ok(())
    }

    /// The current calibrated range.
    pub fn range(&self) -> Result<(f64, f64)> {
        if self.batches_seen == 0 {
            return Err(LabError::invalid(
                "calibration",
                "range requested before any batch was observed",
            ));
        }
        Ok((self.running_min, self.running_max))
    }
}

/// Free-function form of [`CalibrationState::update`], returning the new state.
pub fn running_minmax_update(mut state: CalibrationState, batch: &[f64]) -> Result<CalibrationState> {
    state.update(batch)?;
    Ok(state)
}

/// Symmetric percentile range of a sample: returns the `(100 - p)`-th and
/// `p`-th percentiles by linear interpolation on the sorted values. `p = 100`
/// reproduces the exact min/max.
pub fn percentile_range(samples: &[f64], p: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(LabError::invalid("percentile_range", "empty sample"));
    }
    assert!(
        p > 50.0 && p <= 100.0,
        "percentile_range: p must lie in (50, 100], got {p}"
    );
    let mut sorted = samples.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(LabError::invalid("percentile_range", "non-finite sample"));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare totally"));
    let hi = interpolate_percentile(&sorted, p);
    let lo = interpolate_percentile(&sorted, 100.0 - p);
    Ok((lo, hi))
}

fn interpolate_percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * ((n - 1) as f64);
    let lo_idx = rank.floor() as usize;
    let hi_idx = rank.ceil() as usize;
    let frac = rank - lo_idx as f64;
    sorted[lo_idx] + frac * (sorted[hi_idx] - sorted[lo_idx])
}

// ---------------------------------------------------------------------------
