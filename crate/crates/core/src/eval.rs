//! Quality and outlier diagnostics for trained models.
//!
//! Everything here is read-only over the model: perplexity and masked-token
//! accuracy on a packed validation set, activation outlier statistics
//! (infinity norm and kurtosis per capture site), sequence-length sweeps,
//! and the full-precision vs. quantized comparison that ties a run's
//! numbers into one report.
//!
//! Evaluation must be a pure function of (model, data, seed). Masked
//! positions are drawn from a stream keyed by the *content* of each
//! sequence rather than its index, and per-sequence contributions are
//! reduced in a content-sorted order, so shuffling the dataset changes
//! no reported number — not even in the last bit.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mask_batch, PackedDataset};
use crate::model::{ActivationTrace, ForwardOutput, Model, ModelConfig, Objective};
use crate::quant::{quantize_model, QuantScheme, QuantizedModel};
use crate::rng::SeedStreams;
use crate::tensor::Tape;
use crate::{LabError, Result};

/// Version stamp written into every structured report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Outlier statistics at full scale aggregate over this many validation
/// samples; desk-scale runs default to [`DESK_OUTLIER_SAMPLES`].
pub const FULL_SCALE_OUTLIER_SAMPLES: usize = 1024;

/// Desk-scale default for [`OutlierReport`] sample counts.
pub const DESK_OUTLIER_SAMPLES: usize = 256;

/// How many times to redraw an all-skip evaluation mask before giving up
/// on a sequence.
const MAX_MASK_RETRIES: usize = 1000;

// ---------------------------------------------------------------------------
// Evaluation settings
// ---------------------------------------------------------------------------

/// Knobs for the evaluation pass of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sequence lengths for [`length_sweep`]; empty means no sweep.
    pub lengths: Vec<usize>,
    /// Validation sequences to trace for the outlier report.
    pub n_samples: usize,
    /// Report excess kurtosis (Pearson minus 3) instead of plain Pearson.
    pub kurtosis_excess: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lengths: Vec::new(),
            n_samples: DESK_OUTLIER_SAMPLES,
            kurtosis_excess: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(LabError::config("eval.n_samples", "must be positive"));
        }
        if let Some(&l) = self.lengths.iter().find(|&&l| l < 2) {
            return Err(LabError::config(
                "eval.lengths",
                format!("lengths must be at least 2, got {l}"),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scoreable models
// ---------------------------------------------------------------------------

/// Anything evaluation can score: the full-precision model or its
/// quantized twin, behind one face.
pub trait EvalModel {
    fn config(&self) -> &ModelConfig;

    fn score_mlm(
        &self,
        tape: &Tape,
        ids: &[usize],
        positions: &[usize],
        targets: &[usize],
        seq_len: usize,
    ) -> Result<ForwardOutput>;

    fn score_clm(&self, tape: &Tape, ids: &[usize], seq_len: usize) -> Result<ForwardOutput>;
}

impl EvalModel for Model {
    fn config(&self) -> &ModelConfig {
        self.cfg()
    }

    fn score_mlm(
        &self,
        tape: &Tape,
        ids: &[usize],
        positions: &[usize],
        targets: &[usize],
        seq_len: usize,
    ) -> Result<ForwardOutput> {
        self.forward_mlm(tape, ids, positions, targets, seq_len)
    }

    fn score_clm(&self, tape: &Tape, ids: &[usize], seq_len: usize) -> Result<ForwardOutput> {
        self.forward_clm(tape, ids, seq_len)
    }
}

impl EvalModel for QuantizedModel {
    fn config(&self) -> &ModelConfig {
        self.cfg()
    }

    fn score_mlm(
        &self,
        tape: &Tape,
        ids: &[usize],
        positions: &[usize],
        targets: &[usize],
        seq_len: usize,
    ) -> Result<ForwardOutput> {
        self.forward_mlm(tape, ids, positions, targets, seq_len)
    }

    fn score_clm(&self, tape: &Tape, ids: &[usize], seq_len: usize) -> Result<ForwardOutput> {
        self.forward_clm(tape, ids, seq_len)
    }
}

// ---------------------------------------------------------------------------
// Perplexity and accuracy
// ---------------------------------------------------------------------------

/// FNV-1a over the little-endian token bytes: a stable fingerprint of one
/// sequence's content, independent of where it sits in the dataset.
fn content_key(seq: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in seq {
        for b in t.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// One sequence's contribution to the aggregate metrics.
struct SeqScore {
    key: u64,
    /// Mean position loss times the number of scored positions.
    weighted_loss: f64,
    n_positions: usize,
    n_correct: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Score every sequence independently (batch of one) and return the
/// contributions sorted by content key, so downstream sums cannot depend
/// on dataset order. Masked evaluation draws from a stream keyed by the
/// sequence content; a sequence whose redraws never select a position is
/// skipped with zero weight.
fn score_sequences<M: EvalModel>(
    model: &M,
    data: &PackedDataset,
    streams: &SeedStreams,
) -> Result<Vec<SeqScore>> {
    let cfg = model.config();
    if data.num_sequences() == 0 {
        return Err(LabError::invalid("evaluate", "dataset holds no sequences"));
    }
    let seq_len = data.seq_len();
    if seq_len > cfg.max_seq_len {
        return Err(LabError::invalid(
            "evaluate",
            format!(
                "dataset length {seq_len} exceeds the position table capacity {}",
                cfg.max_seq_len
            ),
        ));
    }

    let mut scores = Vec::with_capacity(data.num_sequences());
    for i in 0..data.num_sequences() {
        let seq = data.sequence(i);
        let key = content_key(seq);
        let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let tape = Tape::inference();
        let score = match cfg.objective {
            Objective::Mlm => {
                let mut rng = streams.keyed("eval", key);
                let mut masked = None;
                for _ in 0..MAX_MASK_RETRIES {
                    let mb = mask_batch(&ids, cfg.vocab_size, cfg.mlm_prob, &mut rng);
                    if !mb.positions.is_empty() {
                        masked = Some(mb);
                        break;
                    }
                }
                let Some(mb) = masked else {
                    continue; // nothing maskable in this sequence
                };
                let out =
                    model.score_mlm(&tape, &mb.corrupted, &mb.positions, &mb.targets, seq_len)?;
                let n = mb.positions.len();
                let vocab = cfg.vocab_size;
                let logits = out.logits.data();
                let n_correct = mb
                    .targets
                    .iter()
                    .enumerate()
                    .filter(|&(r, &t)| argmax(&logits[r * vocab..(r + 1) * vocab]) == t)
                    .count();
                SeqScore {
                    key,
                    weighted_loss: out.loss.data()[0] * n as f64,
                    n_positions: n,
                    n_correct,
                }
            }
            Objective::CausalLm => {
                let out = model.score_clm(&tape, &ids, seq_len)?;
                let n = seq_len - 1;
                SeqScore {
                    key,
                    weighted_loss: out.loss.data()[0] * n as f64,
                    n_positions: n,
                    n_correct: 0,
                }
            }
        };
        scores.push(score);
    }
    scores.sort_by_key(|s| s.key);
    Ok(scores)
}

/// Exponential of the mean token-level cross-entropy: masked positions
/// only for a masked-token model, every next-token position for a causal
/// one.
pub fn perplexity<M: EvalModel>(
    model: &M,
    data: &PackedDataset,
    streams: &SeedStreams,
) -> Result<f64> {
    let scores = score_sequences(model, data, streams)?;
    let total: usize = scores.iter().map(|s| s.n_positions).sum();
    if total == 0 {
        return Err(LabError::invalid(
            "perplexity",
            "no position in the dataset could be scored",
        ));
    }
    let loss_sum: f64 = scores.iter().map(|s| s.weighted_loss).sum();
    Ok((loss_sum / total as f64).exp())
}

/// Fraction of masked positions whose top logit is the original token.
pub fn mlm_accuracy<M: EvalModel>(
    model: &M,
    data: &PackedDataset,
    streams: &SeedStreams,
) -> Result<f64> {
    if model.config().objective != Objective::Mlm {
        return Err(LabError::invalid(
            "mlm_accuracy",
            "model was built for next-token prediction",
        ));
    }
    let scores = score_sequences(model, data, streams)?;
    let total: usize = scores.iter().map(|s| s.n_positions).sum();
    if total == 0 {
        return Err(LabError::invalid(
            "mlm_accuracy",
            "no position in the dataset could be masked",
        ));
    }
    let correct: usize = scores.iter().map(|s| s.n_correct).sum();
    Ok(correct as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Kurtosis
// ---------------------------------------------------------------------------

/// Pearson kurtosis m₄/m₂² of a flattened sample (no bias correction):
/// about 3 for Gaussian data, 1.8 for uniform, large for spiky tails.
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    kurtosis_with(x, false)
}

/// Kurtosis with a switchable convention: `excess` subtracts the Gaussian
/// reference value 3.
pub fn kurtosis_with(x: &[f64], excess: bool) -> Result<f64> {
    if x.len() < 2 {
        return Err(LabError::invalid(
            "kurtosis",
            format!("need at least 2 values, got {}", x.len()),
        ));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &v in x {
        let d2 = (v - mean) * (v - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return Err(LabError::ZeroVariance);
    }
    let k = m4 / (m2 * m2);
    Ok(if excess { k - 3.0 } else { k })
}

// ---------------------------------------------------------------------------
// Outlier report
// ---------------------------------------------------------------------------

/// Per-site slice of an [`OutlierReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteOutliers {
    pub site: String,
    /// Max over samples of the site's infinity norm.
    pub max_inf_norm: f64,
    /// Mean kurtosis over samples, excluding flagged ones; 0 if all flagged.
    pub avg_kurtosis: f64,
    /// Samples whose site values had zero variance (kurtosis undefined).
    pub n_flagged: usize,
}

/// Activation outlier statistics over a set of validation sequences.
///
/// `max_inf_norm` is the global maximum of ‖·‖∞ over every (site, sample)
/// pair; `avg_kurtosis` is the unweighted mean over the same pairs, with
/// zero-variance pairs excluded and counted. Attention probabilities are
/// not part of the aggregate: they are bounded inside [0, 1] by
/// construction and say nothing about activation outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub schema_version: u32,
    /// Sequences actually traced (the request is clamped to the dataset).
    pub n_samples: usize,
    /// Which kurtosis convention the averages use.
    pub kurtosis_excess: bool,
    pub max_inf_norm: f64,
    pub avg_kurtosis: f64,
    /// (site, sample) pairs excluded from `avg_kurtosis` for zero variance.
    pub zero_variance_excluded: usize,
    pub per_site: Vec<SiteOutliers>,
}

/// One traced sample reduced to (site name, flattened values) pairs, with
/// the bounded attention-probability sites dropped.
fn site_samples(trace: &ActivationTrace) -> Vec<(String, Vec<f64>)> {
    trace
        .site_order()
        .into_iter()
        .filter(|site| !site.ends_with(".probs"))
        .map(|site| (site.to_string(), trace.site_values(site)))
        .collect()
}

struct OutlierAggregate {
    max_inf_norm: f64,
    avg_kurtosis: f64,
    flagged: usize,
    per_site: Vec<SiteOutliers>,
}

fn inf_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m: f64, &v| m.max(v.abs()))
}

/// Reduce traced samples to the outlier aggregate. Pure so its algebraic
/// properties (positive 1-homogeneity of the max norm, scale invariance
/// of kurtosis) can be checked directly on synthetic inputs.
fn aggregate_outliers(samples: &[Vec<(String, Vec<f64>)>], excess: bool) -> OutlierAggregate {
    struct Acc {
        max_inf: f64,
        k_sum: f64,
        k_count: usize,
        flagged: usize,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_site: HashMap<String, Acc> = HashMap::new();
    let mut global_max = 0.0_f64;
    let mut global_sum = 0.0;
    let mut global_count = 0usize;
    let mut global_flagged = 0usize;

    for sample in samples {
        for (site, values) in sample {
            let acc = by_site.entry(site.clone()).or_insert_with(|| {
                order.push(site.clone());
                Acc { max_inf: 0.0, k_sum: 0.0, k_count: 0, flagged: 0 }
            });
            let norm = inf_norm(values);
            acc.max_inf = acc.max_inf.max(norm);
            global_max = global_max.max(norm);
            match kurtosis_with(values, excess) {
                Ok(k) => {
                    acc.k_sum += k;
                    acc.k_count += 1;
                    global_sum += k;
                    global_count += 1;
                }
                Err(LabError::ZeroVariance) => {
                    acc.flagged += 1;
                    global_flagged += 1;
                }
                Err(_) => unreachable!("capture sites never hold fewer than 2 values"),
            }
        }
    }

    let per_site = order
        .into_iter()
        .map(|site| {
            let acc = &by_site[&site];
            SiteOutliers {
                site,
                max_inf_norm: acc.max_inf,
                avg_kurtosis: if acc.k_count == 0 { 0.0 } else { acc.k_sum / acc.k_count as f64 },
                n_flagged: acc.flagged,
            }
        })
        .collect();

    OutlierAggregate {
        max_inf_norm: global_max,
        avg_kurtosis: if global_count == 0 { 0.0 } else { global_sum / global_count as f64 },
        flagged: global_flagged,
        per_site,
    }
}

/// Trace up to `n_samples` validation sequences and aggregate outlier
/// statistics per capture site.
///
/// Sequences are traced in dataset order, uncorrupted: masking noise has
/// no business inside an outlier statistic, and the clean pass makes the
/// report a pure function of (model, data).
pub fn outlier_report(
    model: &Model,
    data: &PackedDataset,
    n_samples: usize,
    kurtosis_excess: bool,
) -> Result<OutlierReport> {
    if n_samples == 0 {
        return Err(LabError::invalid("outlier_report", "n_samples must be positive"));
    }
    if data.seq_len() > model.cfg().max_seq_len {
        return Err(LabError::invalid(
            "outlier_report",
            format!(
                "dataset length {} exceeds the position table capacity {}",
                data.seq_len(),
                model.cfg().max_seq_len
            ),
        ));
    }
    let n = n_samples.min(data.num_sequences());
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let ids: Vec<usize> = data.sequence(i).iter().map(|&t| t as usize).collect();
        let trace = model.capture_activations(&ids, data.seq_len())?;
        samples.push(site_samples(&trace));
    }
    let agg = aggregate_outliers(&samples, kurtosis_excess);
    Ok(OutlierReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_samples: n,
        kurtosis_excess,
        max_inf_norm: agg.max_inf_norm,
        avg_kurtosis: agg.avg_kurtosis,
        zero_variance_excluded: agg.flagged,
        per_site: agg.per_site,
    })
}

// ---------------------------------------------------------------------------
// Sequence-length sweep
// ---------------------------------------------------------------------------

/// One row of a sequence-length sweep: the quality metric at one packing
/// length (masked-token accuracy for MLM, perplexity for causal models).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub length: usize,
    pub metric: f64,
    pub n_sequences: usize,
}

/// Repack the validation stream at each length and score the model there.
/// Lengths are deduplicated and rows come back sorted ascending; sweeping
/// the training length reproduces the plain evaluation number exactly.
pub fn length_sweep<M: EvalModel>(
    model: &M,
    data: &PackedDataset,
    lengths: &[usize],
    streams: &SeedStreams,
) -> Result<Vec<SweepRow>> {
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    let capacity = model.config().max_seq_len;

    let mut rows = Vec::with_capacity(lengths.len());
    for length in lengths {
        if length > capacity {
            return Err(LabError::invalid(
                "length_sweep",
                format!("length {length} exceeds the position table capacity {capacity}"),
            ));
        }
        let repacked = data.repack(length)?;
        let metric = match model.config().objective {
            Objective::Mlm => mlm_accuracy(model, &repacked, streams)?,
            Objective::CausalLm => perplexity(model, &repacked, streams)?,
        };
        rows.push(SweepRow { length, metric, n_sequences: repacked.num_sequences() });
    }
    Ok(rows)
}

/// Write sweep rows as CSV with a fixed `length,metric,n_sequences` header.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("length,metric,n_sequences\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.length, r.metric, r.n_sequences));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Full-precision vs. quantized
// ---------------------------------------------------------------------------

/// Everything one evaluation produces, in one versioned document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Top-level seed the evaluation streams derive from.
    pub seed: u64,
    /// Hash of the corpus the validation set was packed from.
    pub corpus_hash: String,
    pub fp_ppl: f64,
    /// Perplexity of the quantized twin, when one was built.
    pub quant_ppl: Option<f64>,
    /// Full-precision masked-token accuracy (masked models only).
    pub mlm_accuracy: Option<f64>,
    /// Length-sweep rows, when a sweep was run.
    pub lengths: Vec<SweepRow>,
    /// Echo of the quantization scheme behind `quant_ppl`.
    pub scheme: Option<QuantScheme>,
    /// Seed behind the calibration batches.
    pub calib_seed: Option<u64>,
    pub outliers: Option<OutlierReport>,
}

/// Score the model, quantize it, score the twin, and attach the outlier
/// report — the single document for a full-precision vs. quantized run.
/// Calibration batches are drawn from the training set with the same
/// seeded streams, so the whole comparison is deterministic in the seed.
pub fn fp_vs_quant(
    model: &Model,
    train: &PackedDataset,
    val: &PackedDataset,
    scheme: &QuantScheme,
    eval: &EvalConfig,
    streams: &SeedStreams,
) -> Result<EvalReport> {
    eval.validate()?;
    let fp_ppl = perplexity(model, val, streams)?;
    let accuracy = match model.cfg().objective {
        Objective::Mlm => Some(mlm_accuracy(model, val, streams)?),
        Objective::CausalLm => None,
    };
    let outliers = outlier_report(model, val, eval.n_samples, eval.kurtosis_excess)?;
    let quantized = quantize_model(model, train, scheme, streams)?;
    let quant_ppl = perplexity(&quantized, val, streams)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: streams.seed(),
        corpus_hash: val.corpus_hash().to_string(),
        fp_ppl,
        quant_ppl: Some(quant_ppl),
        mlm_accuracy: accuracy,
        lengths: Vec::new(),
        scheme: Some(scheme.clone()),
        calib_seed: Some(streams.seed()),
        outliers: Some(outliers),
    })
}

// ---------------------------------------------------------------------------
