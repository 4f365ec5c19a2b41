//! Attention normalizers: vanilla softmax, clipped softmax, and
//! normalized clipped softmax.
//!
//! The clipped family maps probabilities through `clip((zeta - gamma) * p +
//! gamma, 0, 1)` with stretch `zeta >= 1` and offset `gamma <= 0`, so a row
//! can emit exact zeros and exact ones; clipped entries block gradient flow.
//! With a fixed `gamma` the un-clipped row mass `zeta + (T - 1) * gamma`
//! drifts with row length `T`. The normalized variant instead fixes that
//! mass to a target `beta` and derives `gamma = (beta - zeta) / (T - 1)`
//! per row domain, which makes the budget independent of sequence length —
//! including causally, where the domain of row `t` is the `t + 1` positions
//! it may attend to.
//!
//! Plain `&[f64]` functions serve analysis and tests; [`attention_normalize`]
//! is the tape-integrated version the model trains through. Both run the
//! same row kernel, so their outputs agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::tensor::{kernels, Mask, Tape, Tensor};
use crate::{LabError, Result};

/// Which normalizer attention uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Vanilla,
    #[serde(alias = "cs")]
    Clipped,
    #[serde(alias = "ncs")]
    NormalizedClipped,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Clipped => "cs",
            Variant::NormalizedClipped => "ncs",
        })
    }
}

/// Whether rows may attend everywhere or only backwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Bidirectional,
    Causal,
}

/// Declarative normalizer choice, as it appears in run configs.
///
/// `gamma` (clipped) and `beta` (normalized) may be given directly; when
/// absent they are derived from `alpha` at the pretraining length: `gamma =
/// -alpha / T` and `beta = zeta + (T - 1) * (-alpha / T)`. Explicit values
/// win over `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftmaxConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub direction: Direction,
}

fn default_zeta() -> f64 {
    1.0
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        SoftmaxConfig {
            variant: Variant::Vanilla,
            zeta: 1.0,
            gamma: None,
            alpha: None,
            beta: None,
            direction: Direction::Bidirectional,
        }
    }
}

impl SoftmaxConfig {
    pub fn vanilla(direction: Direction) -> Self {
        SoftmaxConfig { direction, ..Default::default() }
    }

    pub fn clipped(zeta: f64, gamma: f64, direction: Direction) -> Self {
        SoftmaxConfig {
            variant: Variant::Clipped,
            zeta,
            gamma: Some(gamma),
            direction,
            ..Default::default()
        }
    }

    pub fn normalized(zeta: f64, beta: f64, direction: Direction) -> Self {
        SoftmaxConfig {
            variant: Variant::NormalizedClipped,
            zeta,
            beta: Some(beta),
            direction,
            ..Default::default()
        }
    }

    /// Pins the free coefficients down at pretraining length `t_pre`.
    pub fn resolve(&self, t_pre: usize) -> Result<Normalizer> {
        if !(self.zeta >= 1.0) {
            return Err(LabError::config(
                "softmax.zeta",
                format!("stretch must be >= 1, got {}", self.zeta),
            ));
        }
        if t_pre == 0 {
            return Err(LabError::config("softmax", "pretraining length must be positive"));
        }
        match self.variant {
            Variant::Vanilla => Ok(Normalizer::Vanilla),
            Variant::Clipped => {
                let gamma = match (self.gamma, self.alpha) {
                    (Some(g), _) => g,
                    (None, Some(a)) => gamma_from_alpha(a, t_pre),
                    (None, None) => {
                        return Err(LabError::config(
                            "softmax.gamma",
                            "clipped softmax needs `gamma` or `alpha`",
                        ))
                    }
                };
                if gamma > 0.0 {
                    return Err(LabError::config(
                        "softmax.gamma",
                        format!("offset must be <= 0, got {gamma}"),
                    ));
                }
                Ok(Normalizer::Clipped { zeta: self.zeta, gamma })
            }
            Variant::NormalizedClipped => {
                let beta = match (self.beta, self.alpha) {
                    (Some(b), _) => b,
                    (None, Some(a)) => beta_matching_cs(self.zeta, a, t_pre),
                    (None, None) => {
                        return Err(LabError::config(
                            "softmax.beta",
                            "normalized clipped softmax needs `beta` or `alpha`",
                        ))
                    }
                };
                if beta > self.zeta {
                    return Err(LabError::config(
                        "softmax.beta",
                        format!("target sum {beta} exceeds zeta {}", self.zeta),
                    ));
                }
                Ok(Normalizer::NormalizedClipped { zeta: self.zeta, beta })
            }
        }
    }
}

/// A fully determined normalizer (no optional knobs left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalizer {
    Vanilla,
    /// Fixed offset regardless of evaluated row length.
    Clipped { zeta: f64, gamma: f64 },
    /// Offset re-derived from the target mass for every row domain.
    NormalizedClipped { zeta: f64, beta: f64 },
}

// ── scalar helpers ──────────────────────────────────────────────────────

/// Offset that spends clip budget `alpha` evenly over a length-`t` row:
/// `-alpha / t`.
pub fn gamma_from_alpha(alpha: f64, t: usize) -> f64 {
    assert!(t > 0, "gamma_from_alpha: row length must be positive");
    -alpha / t as f64
}

/// Un-clipped row mass of the clipped softmax at row length `t`:
/// `zeta + (t - 1) * gamma`.
pub fn cs_unclipped_sum(zeta: f64, gamma: f64, t: usize) -> f64 {
    assert!(t > 0, "cs_unclipped_sum: row length must be positive");
    zeta + (t - 1) as f64 * gamma
}

/// The length-independent mass target that reproduces a clipped softmax
/// parameterized by `alpha` at its own pretraining length.
pub fn beta_matching_cs(zeta: f64, alpha: f64, t_pre: usize) -> f64 {
    cs_unclipped_sum(zeta, gamma_from_alpha(alpha, t_pre), t_pre)
}

/// Offset that realizes un-clipped mass `beta` over a row domain of `t`
/// entries: `(beta - zeta) / (t - 1)`, with the single-entry domain
/// degenerating to zero offset.
pub fn ncs_gamma(zeta: f64, beta: f64, t: usize) -> f64 {
    assert!(t > 0, "ncs_gamma: row domain must be non-empty");
    if t == 1 {
        0.0
    } else {
        (beta - zeta) / (t - 1) as f64
    }
}

// ── plain row functions ─────────────────────────────────────────────────

/// Numerically stable softmax of one row.
pub fn vanilla_softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "vanilla_softmax: empty logits");
    let mut row = logits.to_vec();
    kernels::softmax_row_in_place(&mut row);
    row
}

/// The clipped softmax's pre-clip values `(zeta - gamma) * p + gamma`.
pub fn cs_preclip(logits: &[f64], zeta: f64, gamma: f64) -> Vec<f64> {
    let mut row = vanilla_softmax(logits);
    for v in row.iter_mut() {
        *v = (zeta - gamma) * *v + gamma;
    }
    row
}

/// Clipped softmax of one row with a fixed offset.
pub fn clipped_softmax(logits: &[f64], zeta: f64, gamma: f64) -> Vec<f64> {
    let mut row = cs_preclip(logits, zeta, gamma);
    for v in row.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    row
}

/// Normalized clipped softmax of one row whose domain holds `attendable`
/// entries: `logits.len()` bidirectionally, the 1-based query position
/// causally.
pub fn ncs_softmax(logits: &[f64], zeta: f64, beta: f64, attendable: usize) -> Vec<f64> {
    clipped_softmax(logits, zeta, ncs_gamma(zeta, beta, attendable))
}

// ── tape integration ────────────────────────────────────────────────────

/// Normalizes every row of a score matrix on the tape.
///
/// Masked entries are excluded from the row's domain: they take no part in
/// the softmax, the normalized variant sizes `gamma` by the attendable
/// count of each row, and the excluded positions come out as exact zeros
/// with no gradient. A row with nothing attendable is a hard error.
pub fn attention_normalize(
    tape: &Tape,
    scores: &Tensor,
    normalizer: &Normalizer,
    mask: Option<&Mask>,
) -> Tensor {
    let (rows, cols) = scores.dims2("attention_normalize");
    let attendable = match mask {
        Some(mask) => {
            let counts = mask.attendable_per_row();
            assert!(
                counts.iter().all(|&c| c > 0),
                "attention_normalize: a row has no attendable entries"
            );
            counts
        }
        None => vec![cols; rows],
    };
    let probs = match mask {
        Some(mask) => tape.softmax_rows(&tape.masked_fill(scores, mask, f64::NEG_INFINITY)),
        None => tape.softmax_rows(scores),
    };
    match *normalizer {
        Normalizer::Vanilla => probs,
        Normalizer::Clipped { zeta, gamma } => {
            tape.clip(&tape.affine(&probs, zeta - gamma, gamma), 0.0, 1.0)
        }
        Normalizer::NormalizedClipped { zeta, beta } => {
            let gammas: Vec<f64> =
                attendable.iter().map(|&t| ncs_gamma(zeta, beta, t)).collect();
            let muls: Vec<f64> = gammas.iter().map(|g| zeta - g).collect();
            tape.clip(&tape.rowwise_affine(&probs, &muls, &gammas), 0.0, 1.0)
        }
    }
}
