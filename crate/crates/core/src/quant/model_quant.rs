//! Whole-model simulated quantization.
//!
//! Quantizing a model has two halves. Weights are static: every parameter
//! tensor (embeddings and normalization affines included) gets a per-tensor
//! spec from its own values, chosen by min/max or the MSE grid search. The
//! output head is the exception — it reuses the token embedding, and the
//! quantized model keeps a full-precision copy for the head role while the
//! embedding role is quantized like any other table.
//!
//! Activations are streamed: their specs come from calibration, a handful
//! of training batches run through the weight-quantized model with a hook
//! that accumulates per-site statistics (momentum-averaged min/max, or
//! buffered samples for percentile ranges). One batch contributes one
//! statistics update per site, no matter how many tensors the site emits.
//!
//! The quantized forward pass is the original graph with a fake-quant
//! (quantize then immediately dequantize in float) spliced in at every
//! activation site and every weight. Specs are static after calibration, so
//! evaluation at other sequence lengths reuses them unchanged.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{mask_batch, PackedDataset};
use crate::model::{activation_sites, ForwardOutput, Model, Objective, SiteHook};
use crate::quant::{
    anchored_params, fake_quant, minmax_params, mse_estimator, percentile_range,
    CalibrationState, QuantTarget, QuantizerSpec, RangeEstimator, MSE_GRID_DEFAULT,
};
use crate::rng::SeedStreams;
use crate::tensor::{Tape, Tensor};
use crate::{LabError, Result};

/// How to quantize a whole model: bit width, range estimators, and the
/// calibration protocol. The full-scale recipe this mirrors calibrates over
/// 16 batches of size 8; encoder-family runs estimate weight ranges by
/// min/max, decoder-family runs by MSE search with 99.999th-percentile
/// activation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantScheme {
    pub bits: u32,
    /// `min_max` or `mse`.
    pub weight_estimator: RangeEstimator,
    /// `running_min_max` or `percentile`.
    pub act_estimator: RangeEstimator,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
    /// Momentum of the running min/max estimator.
    pub momentum: f64,
    /// Upper percentile for the percentile estimator (lower is symmetric).
    pub percentile: f64,
    /// Grid resolution of the MSE range search.
    pub mse_grid: usize,
    /// Whether the decoder's final normalization (parameters and output
    /// site) is quantized like everything else. The excluded-output-layer
    /// convention is ambiguous about it; flip this to leave it in full
    /// precision.
    pub quantize_final_norm: bool,
}

impl Default for QuantScheme {
    fn default() -> Self {
        QuantScheme {
            bits: 8,
            weight_estimator: RangeEstimator::MinMax,
            act_estimator: RangeEstimator::RunningMinMax,
            calib_batches: 16,
            calib_batch_size: 8,
            momentum: 0.9,
            percentile: 99.999,
            mse_grid: MSE_GRID_DEFAULT,
            quantize_final_norm: true,
        }
    }
}

impl QuantScheme {
    pub fn validate(&self) -> Result<()> {
        if !(2..=24).contains(&self.bits) {
            return Err(LabError::config(
                "quant.bits",
                format!("must lie in [2, 24], got {}", self.bits),
            ));
        }
        match self.weight_estimator {
            RangeEstimator::MinMax | RangeEstimator::Mse => {}
            other => {
                return Err(LabError::config(
                    "quant.weight_estimator",
                    format!("{other} is calibration-based; weights use min_max or mse"),
                ));
            }
        }
        match self.act_estimator {
            RangeEstimator::RunningMinMax | RangeEstimator::Percentile => {}
            other => {
                return Err(LabError::config(
                    "quant.act_estimator",
                    format!("{other} is static; activations use running_min_max or percentile"),
                ));
            }
        }
        if self.calib_batches == 0 || self.calib_batch_size == 0 {
            return Err(LabError::config(
                "quant.calib_batches",
                "calibration needs at least one batch of at least one sequence",
            ));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(LabError::config(
                "quant.momentum",
                format!("must lie in (0, 1), got {}", self.momentum),
            ));
        }
        if !(self.percentile > 50.0 && self.percentile <= 100.0) {
            return Err(LabError::config(
                "quant.percentile",
                format!("must lie in (50, 100], got {}", self.percentile),
            ));
        }
        if self.mse_grid < 2 {
            return Err(LabError::config("quant.mse_grid", "needs at least 2 grid points"));
        }
        Ok(())
    }
}

/// One exported quantizer record, as written into run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub site: String,
    pub s: f64,
    pub z: i64,
    pub b: u32,
    pub estimator: RangeEstimator,
}

fn record(site: &str, spec: &QuantizerSpec) -> SpecRecord {
    SpecRecord {
        site: site.to_string(),
        s: spec.scale,
        z: spec.zero_point,
        b: spec.bits,
        estimator: spec.estimator,
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Per-site accumulator: batch-local extrema (or a sample buffer for the
/// percentile estimator) folded into the calibration state once per batch.
struct SiteCalib {
    state: CalibrationState,
    buffer_samples: bool,
    touched: bool,
    lo: f64,
    hi: f64,
    pending: Vec<f64>,
}

impl SiteCalib {
    fn new(scheme: &QuantScheme) -> SiteCalib {
        let buffer_samples = scheme.act_estimator == RangeEstimator::Percentile;
        SiteCalib {
            state: CalibrationState::new(scheme.momentum, buffer_samples),
            buffer_samples,
            touched: false,
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            pending: Vec::new(),
        }
    }

    fn observe(&mut self, values: &[f64]) {
        if self.buffer_samples {
            self.pending.extend_from_slice(values);
        } else {
            for &v in values {
                self.lo = self.lo.min(v);
                self.hi = self.hi.max(v);
            }
        }
        self.touched = true;
    }

    fn end_batch(&mut self) -> Result<()> {
        if !self.touched {
            return Ok(());
        }
        if self.buffer_samples {
            self.state.update(&self.pending)?;
            self.pending.clear();
        } else {
            self.state.update(&[self.lo, self.hi])?;
        }
        self.lo = f64::INFINITY;
        self.hi = f64::NEG_INFINITY;
        self.touched = false;
        Ok(())
    }

    fn range(&self, scheme: &QuantScheme) -> Result<(f64, f64)> {
        match scheme.act_estimator {
            RangeEstimator::Percentile => {
                let samples = self
                    .state
                    .samples()
                    .expect("percentile calibration buffers samples");
                percentile_range(samples, scheme.percentile)
            }
            _ => self.state.range(),
        }
    }
}

struct CalibHook<'a> {
    sites: &'a mut HashMap<String, SiteCalib>,
}

impl SiteHook for CalibHook<'_> {
    fn observe(&mut self, site: &str, value: &Tensor) -> Option<Tensor> {
        if let Some(calib) = self.sites.get_mut(site) {
            calib.observe(value.data());
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Quantized model
// ---------------------------------------------------------------------------

/// A model whose weights are fake-quantized in place and whose forward
/// passes splice fake-quant at every calibrated activation site. Use
/// inference tapes: the spliced activations carry no gradients.
#[derive(Debug)]
pub struct QuantizedModel {
    model: Model,
    scheme: QuantScheme,
    weight_specs: Vec<(String, QuantizerSpec)>,
    act_specs: Vec<(String, QuantizerSpec)>,
    act_map: HashMap<String, QuantizerSpec>,
}

struct FakeQuantHook<'a> {
    specs: &'a HashMap<String, QuantizerSpec>,
}

impl SiteHook for FakeQuantHook<'_> {
    fn observe(&mut self, site: &str, value: &Tensor) -> Option<Tensor> {
        self.specs.get(site).map(|spec| {
            let data = fake_quant(value.data(), spec).expect("calibrated spec is valid");
            Tensor::new(value.shape(), data)
        })
    }
}

impl QuantizedModel {
    pub fn cfg(&self) -> &crate::model::ModelConfig {
        self.model.cfg()
    }

    /// The underlying model (weights already fake-quantized, head raw).
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn weight_specs(&self) -> &[(String, QuantizerSpec)] {
        &self.weight_specs
    }

    pub fn act_specs(&self) -> &[(String, QuantizerSpec)] {
        &self.act_specs
    }

    /// Every spec as a flat record list: weights first, then activation
    /// sites in traversal order.
    pub fn spec_records(&self) -> Vec<SpecRecord> {
        self.weight_specs
            .iter()
            .chain(self.act_specs.iter())
            .map(|(name, spec)| record(name, spec))
            .collect()
    }

    pub fn forward_mlm(
        &self,
        tape: &Tape,
        ids: &[usize],
        positions: &[usize],
        targets: &[usize],
        seq_len: usize,
    ) -> Result<ForwardOutput> {
        let mut hook = FakeQuantHook { specs: &self.act_map };
        self.model
            .forward_mlm_hooked(tape, ids, positions, targets, seq_len, &mut hook)
    }

    pub fn forward_clm(&self, tape: &Tape, ids: &[usize], seq_len: usize) -> Result<ForwardOutput> {
        let mut hook = FakeQuantHook { specs: &self.act_map };
        self.model.forward_clm_hooked(tape, ids, seq_len, &mut hook)
    }

    pub fn hidden_states(&self, tape: &Tape, ids: &[usize], seq_len: usize) -> Result<Tensor> {
        let mut hook = FakeQuantHook { specs: &self.act_map };
        self.model.hidden_states(tape, ids, seq_len, &mut hook)
    }
}

fn weight_spec(data: &[f64], scheme: &QuantScheme) -> Result<QuantizerSpec> {
    let (scale, zero_point, degenerate) = match scheme.weight_estimator {
        RangeEstimator::MinMax => minmax_params(data, scheme.bits)?,
        RangeEstimator::Mse => mse_estimator(data, scheme.bits, scheme.mse_grid)?,
        _ => unreachable!("validated weight estimator"),
    };
    Ok(QuantizerSpec {
        bits: scheme.bits,
        scale,
        zero_point,
        estimator: scheme.weight_estimator,
        target: QuantTarget::Weight,
        degenerate,
    })
}

/// Quantize every weight, calibrate every activation site over batches
/// drawn from `train` (sampled and, for masked models, corrupted via
/// seed streams so the procedure is deterministic), and return the handle.
pub fn quantize_model(
    model: &Model,
    train: &PackedDataset,
    scheme: &QuantScheme,
    streams: &SeedStreams,
) -> Result<QuantizedModel> {
    scheme.validate()?;
    if train.num_sequences() < scheme.calib_batch_size {
        return Err(LabError::config(
            "quant.calib_batch_size",
            format!(
                "{} exceeds the {} calibration sequences available",
                scheme.calib_batch_size,
                train.num_sequences()
            ),
        ));
    }

    let mut model = model.clone();
    let skip_final_norm = !scheme.quantize_final_norm;
    let raw_head = model.params().get("tok_emb").detached();

    // Weights first, so calibration sees the activations the quantized
    // model will actually produce.
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let mut weight_specs = Vec::with_capacity(names.len());
    for name in &names {
        if skip_final_norm && name.starts_with("final_norm") {
            continue;
        }
        let tensor = model.params().get(name);
        let spec = weight_spec(tensor.data(), scheme)?;
        let data = fake_quant(tensor.data(), &spec)?;
        let shape = tensor.shape().to_vec();
        model.params_mut().set(name, Tensor::new(&shape, data));
        weight_specs.push((name.clone(), spec));
    }
    // The output head reuses the embedding at full precision.
    model.set_head_weight(Some(raw_head));

    let mut sites = activation_sites(model.cfg());
    if skip_final_norm {
        sites.retain(|s| s != "final_norm");
    }
    let mut calib: HashMap<String, SiteCalib> = sites
        .iter()
        .map(|s| (s.clone(), SiteCalib::new(scheme)))
        .collect();

    let seq_len = train.seq_len();
    for batch in 0..scheme.calib_batches {
        let mut rng = streams.keyed("calib", batch as u64);
        let idx = rand::seq::index::sample(
            &mut rng,
            train.num_sequences(),
            scheme.calib_batch_size,
        )
        .into_vec();
        let ids = train.gather_batch(&idx);
        let ids = match model.cfg().objective {
            Objective::Mlm => {
                let mut mask_rng = streams.keyed("calib-mask", batch as u64);
                mask_batch(&ids, model.cfg().vocab_size, model.cfg().mlm_prob, &mut mask_rng)
                    .corrupted
            }
            Objective::CausalLm => ids,
        };
        let tape = Tape::inference();
        let mut hook = CalibHook { sites: &mut calib };
        model.hidden_states(&tape, &ids, seq_len, &mut hook)?;
        for site in calib.values_mut() {
            site.end_batch()?;
        }
    }

    let mut act_specs = Vec::with_capacity(sites.len());
    for site in &sites {
        let state = &calib[site];
        let (lo, hi) = state.range(scheme)?;
        // Zero-anchored like the weight grids: a site whose calibrated range
        // sits entirely on one side of zero would otherwise lose its whole
        // decode window to the zero-point clamp.
        let (scale, zero_point, degenerate) = anchored_params(lo, hi, scheme.bits);
        act_specs.push((
            site.clone(),
            QuantizerSpec {
                bits: scheme.bits,
                scale,
                zero_point,
                estimator: scheme.act_estimator,
                target: QuantTarget::Activation,
                degenerate,
            },
        ));
    }
    let act_map = act_specs.iter().cloned().collect();
    Ok(QuantizedModel {
        model,
        scheme: scheme.clone(),
        weight_specs,
        act_specs,
        act_map,
    })
}

// ---------------------------------------------------------------------------
