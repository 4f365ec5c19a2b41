//! A tiny trainable transformer with a pluggable attention normalizer.
//!
//! Two flavours share one implementation: a bidirectional encoder trained
//! with masked-token prediction (post-norm blocks, like the small BERT
//! family) and a causal decoder trained on next-token prediction (pre-norm
//! blocks, like the small OPT family). The attention normalizer — vanilla,
//! clipped, or normalized-clipped softmax — is chosen by config and is the
//! only thing that changes between comparison runs.
//!
//! The forward pass exposes *activation sites*: named tensors (projection
//! outputs, attention probabilities, residual sums, normalization outputs)
//! that a [`SiteHook`] can observe or replace. Hooks power activation
//! capture for outlier statistics, calibration for quantization, and the
//! fake-quantized forward itself. Sites are enumerated in traversal order by
//! [`activation_sites`], and [`Model::capture_activations`] is guaranteed to
//! visit exactly that list.
//!
//! The token embedding is tied to the output head. A quantized model keeps
//! the head in full precision by overriding it with
//! [`Model::set_head_weight`] while the embedding role stays quantized.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::NUM_RESERVED;
use crate::softmax::{attention_normalize, Direction, Normalizer, SoftmaxConfig};
use crate::tensor::{Mask, Tape, Tensor};
use crate::{LabError, Result};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointArray};

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Epsilon inside every layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Training objective, which also fixes the attention direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mlm,
    CausalLm,
}

/// Where layer normalization sits relative to each sub-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// Normalize after each residual add (encoder convention).
    PostNorm,
    /// Normalize the sub-block input, with a final norm after the last
    /// layer (decoder convention).
    PreNorm,
}

/// Architecture and objective of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    /// Feed-forward width; `None` means `4 * hidden`.
    pub intermediate: Option<usize>,
    pub vocab_size: usize,
    /// Position-table capacity; evaluation may use any length up to this.
    pub max_seq_len: usize,
    pub objective: Objective,
    /// `None` picks the family convention: post-norm for MLM, pre-norm for
    /// causal LM.
    pub norm_placement: Option<NormPlacement>,
    pub softmax: SoftmaxConfig,
    /// Probability that a position is selected for masked prediction.
    pub mlm_prob: f64,
    /// Accepted for config compatibility; must stay 0 (not implemented).
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            intermediate: None,
            vocab_size: 512,
            max_seq_len: 32,
            objective: Objective::Mlm,
            norm_placement: None,
            softmax: SoftmaxConfig::default(),
            mlm_prob: 0.15,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Feed-forward width after applying the `4 * hidden` default.
    pub fn intermediate_size(&self) -> usize {
        self.intermediate.unwrap_or(4 * self.hidden)
    }

    /// Norm placement after applying the per-objective default.
    pub fn placement(&self) -> NormPlacement {
        self.norm_placement.unwrap_or(match self.objective {
            Objective::Mlm => NormPlacement::PostNorm,
            Objective::CausalLm => NormPlacement::PreNorm,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Check every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(LabError::config("model.n_layers", "must be at least 1"));
        }
        if self.hidden == 0 || self.n_heads == 0 {
            return Err(LabError::config("model.hidden", "hidden and n_heads must be positive"));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(LabError::config(
                "model.hidden",
                format!("{} is not divisible by n_heads = {}", self.hidden, self.n_heads),
            ));
        }
        if self.intermediate_size() == 0 {
            return Err(LabError::config("model.intermediate", "must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(LabError::config(
                "model.max_seq_len",
                format!("must be at least 2, got {}", self.max_seq_len),
            ));
        }
        if self.vocab_size <= NUM_RESERVED {
            return Err(LabError::config(
                "model.vocab_size",
                format!("must exceed the {NUM_RESERVED} reserved ids, got {}", self.vocab_size),
            ));
        }
        if self.objective == Objective::Mlm && !(self.mlm_prob > 0.0 && self.mlm_prob < 1.0) {
            return Err(LabError::config(
                "model.mlm_prob",
                format!("must lie in (0, 1) for masked prediction, got {}", self.mlm_prob),
            ));
        }
        if self.dropout != 0.0 {
            return Err(LabError::config(
                "model.dropout",
                "dropout is not implemented in this build; must be 0",
            ));
        }
        let want = match self.objective {
            Objective::Mlm => Direction::Bidirectional,
            Objective::CausalLm => Direction::Causal,
        };
        if self.softmax.direction != want {
            return Err(LabError::config(
                "softmax.direction",
                format!(
                    "objective {:?} requires {:?} attention, got {:?}",
                    self.objective, want, self.softmax.direction
                ),
            ));
        }
        // Surface bad normalizer knobs at config time rather than mid-run.
        self.softmax.resolve(self.max_seq_len)?;
        Ok(())
    }
}

/// Closed-form parameter count for a config (embeddings, one extra norm,
/// and per-layer attention + feed-forward + two norms; the output head is
/// tied and adds nothing).
pub fn param_count(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden;
    let i = cfg.intermediate_size();
    let per_layer = 4 * (h * h + h) + 2 * h + (h * i + i) + (i * h + h) + 2 * h;
    cfg.vocab_size * h + cfg.max_seq_len * h + 2 * h + cfg.n_layers * per_layer
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// Gaussian-initialized matrix or embedding table.
    Weight,
    /// Zero-initialized vector.
    Bias,
    /// One-initialized normalization gain.
    Gain,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let h = cfg.hidden;
    let i = cfg.intermediate_size();
    let mut specs = vec![
        ("tok_emb".into(), vec![cfg.vocab_size, h], ParamKind::Weight),
        ("pos_emb".into(), vec![cfg.max_seq_len, h], ParamKind::Weight),
    ];
    if cfg.objective == Objective::Mlm {
        specs.push(("emb_norm.gain".into(), vec![h], ParamKind::Gain));
        specs.push(("emb_norm.bias".into(), vec![h], ParamKind::Bias));
    }
    for l in 0..cfg.n_layers {
        let p = |suffix: &str| format!("layer.{l}.{suffix}");
        specs.push((p("attn.wq"), vec![h, h], ParamKind::Weight));
        specs.push((p("attn.bq"), vec![h], ParamKind::Bias));
        specs.push((p("attn.wk"), vec![h, h], ParamKind::Weight));
        specs.push((p("attn.bk"), vec![h], ParamKind::Bias));
        specs.push((p("attn.wv"), vec![h, h], ParamKind::Weight));
        specs.push((p("attn.bv"), vec![h], ParamKind::Bias));
        specs.push((p("attn.wo"), vec![h, h], ParamKind::Weight));
        specs.push((p("attn.bo"), vec![h], ParamKind::Bias));
        specs.push((p("attn_norm.gain"), vec![h], ParamKind::Gain));
        specs.push((p("attn_norm.bias"), vec![h], ParamKind::Bias));
        specs.push((p("ffn.w1"), vec![h, i], ParamKind::Weight));
        specs.push((p("ffn.b1"), vec![i], ParamKind::Bias));
        specs.push((p("ffn.w2"), vec![i, h], ParamKind::Weight));
        specs.push((p("ffn.b2"), vec![h], ParamKind::Bias));
        specs.push((p("ffn_norm.gain"), vec![h], ParamKind::Gain));
        specs.push((p("ffn_norm.bias"), vec![h], ParamKind::Bias));
    }
    if cfg.objective == Objective::CausalLm {
        specs.push(("final_norm.gain".into(), vec![h], ParamKind::Gain));
        specs.push(("final_norm.bias".into(), vec![h], ParamKind::Bias));
    }
    specs
}

/// The model's named tensors in a fixed, deterministic order.
#[derive(Debug, Clone)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    /// Fresh parameters: weights from `N(0, 0.02)`, biases zero, gains one.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Params {
        let normal = Normal::new(0.0, INIT_STD).expect("constant std is valid");
        let entries = param_specs(cfg)
            .into_iter()
            .map(|(name, shape, kind)| {
                let numel: usize = shape.iter().product();
                let data = match kind {
                    ParamKind::Weight => (0..numel).map(|_| normal.sample(rng)).collect(),
                    ParamKind::Bias => vec![0.0; numel],
                    ParamKind::Gain => vec![1.0; numel],
                };
                (name, Tensor::new(&shape, data))
            })
            .collect::<Vec<_>>();
        Params::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, Tensor)>) -> Params {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Params { entries, index }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("params: no tensor named {name}"));
        &self.entries[i].1
    }

    /// Replace a tensor wholesale; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("params: no tensor named {name}"));
        assert_eq!(
            self.entries[i].1.shape(),
            tensor.shape(),
            "params: shape change for {name}"
        );
        self.entries[i].1 = tensor;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether weight decay applies: matrices and embeddings decay, vectors
    /// (biases and normalization affine parameters) do not.
    pub fn decays(tensor: &Tensor) -> bool {
        tensor.shape().len() >= 2
    }
}

// ---------------------------------------------------------------------------
// Site hooks
// ---------------------------------------------------------------------------

/// Observer for named activation sites during a forward pass.
///
/// Returning `Some` splices the replacement into the graph in place of the
/// observed tensor (shapes must match). Replacement is only legal on
/// non-recording tapes: replacements carry no gradient.
pub trait SiteHook {
    fn observe(&mut self, site: &str, value: &Tensor) -> Option<Tensor>;
}

/// The default hook: sees nothing, changes nothing.
pub struct NoopHook;

impl SiteHook for NoopHook {
    fn observe(&mut self, _site: &str, _value: &Tensor) -> Option<Tensor> {
        None
    }
}

/// Every activation site of a config, in forward traversal order. Multiple
/// tensors may be observed at one site (attention probabilities appear once
/// per sequence and head); the logits matmul is deliberately not a site.
pub fn activation_sites(cfg: &ModelConfig) -> Vec<String> {
    let mut sites = vec!["embeddings".to_string()];
    if cfg.objective == Objective::Mlm {
        sites.push("emb_norm".into());
    }
    let post = cfg.placement() == NormPlacement::PostNorm;
    for l in 0..cfg.n_layers {
        let p = |suffix: &str| format!("layer.{l}.{suffix}");
        if !post {
            sites.push(p("attn_norm"));
        }
        sites.extend([
            p("attn.q"),
            p("attn.k"),
            p("attn.v"),
            p("attn.probs"),
            p("attn.context"),
            p("attn.out"),
            p("attn.residual"),
        ]);
        if post {
            sites.push(p("attn_norm"));
        }
        if !post {
            sites.push(p("ffn_norm"));
        }
        sites.extend([p("ffn.pre_act"), p("ffn.hidden"), p("ffn.out"), p("ffn.residual")]);
        if post {
            sites.push(p("ffn_norm"));
        }
    }
    if cfg.objective == Objective::CausalLm {
        sites.push("final_norm".into());
    }
    sites
}

// ---------------------------------------------------------------------------
// Activation traces
// ---------------------------------------------------------------------------

/// One observed tensor at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub site: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// All tensors observed during one forward pass, in traversal order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    /// Unique site names in first-seen order.
    pub fn site_order(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        let mut order = Vec::new();
        for e in &self.entries {
            if seen.insert(e.site.as_str()) {
                order.push(e.site.as_str());
            }
        }
        order
    }

    /// All entries observed at one site.
    pub fn by_site<'a>(&'a self, site: &'a str) -> impl Iterator<Item = &'a TraceEntry> {
        self.entries.iter().filter(move |e| e.site == site)
    }

    /// Concatenated values of every entry at one site.
    pub fn site_values(&self, site: &str) -> Vec<f64> {
        let mut out = Vec::new();
        for e in self.by_site(site) {
            out.extend_from_slice(&e.values);
        }
        out
    }
}

struct CaptureHook {
    trace: ActivationTrace,
}

impl SiteHook for CaptureHook {
    fn observe(&mut self, site: &str, value: &Tensor) -> Option<Tensor> {
        self.trace.entries.push(TraceEntry {
            site: site.to_string(),
            shape: value.shape().to_vec(),
            values: value.to_vec(),
        });
        None
    }
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// Per-head attention probabilities for a single sequence, plus a scalar
/// concentration statistic (largest column mass divided by the row count, so
/// 1.0 means every query attends to one key).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionExport {
    pub seq_len: usize,
    pub layers: Vec<LayerAttention>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer: usize,
    pub heads: Vec<HeadAttention>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadAttention {
    pub head: usize,
    /// Row-major `seq_len x seq_len` probabilities.
    pub probs: Vec<f64>,
    pub concentration: f64,
}

/// Largest column mass of a row-major square matrix, divided by its size.
pub fn concentration(probs: &[f64], t: usize) -> f64 {
    assert_eq!(probs.len(), t * t, "concentration: expected a {t}x{t} matrix");
    let mut best: f64 = 0.0;
    for col in 0..t {
        let mass: f64 = (0..t).map(|row| probs[row * t + col]).sum();
        best = best.max(mass);
    }
    best / t as f64
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Output of a loss-producing forward pass. Holds the tape-bound parameter
/// tensors so gradients can be read back by name after `backward`.
pub struct ForwardOutput {
    pub loss: Tensor,
    pub logits: Tensor,
    bound: Vec<(String, Tensor)>,
}

impl ForwardOutput {
    /// The tape-registered tensor for a parameter, if it participated.
    pub fn bound_param(&self, name: &str) -> Option<&Tensor> {
        self.bound
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.bound.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// A transformer plus its resolved attention normalizer.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    normalizer: Normalizer,
    params: Params,
    /// When set, the output head uses this tensor instead of the tied token
    /// embedding (the quantized forward keeps the head in full precision).
    head_weight: Option<Tensor>,
}

impl Model {
    /// Validate the config and initialize fresh parameters from `rng`.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Model> {
        cfg.validate()?;
        let params = Params::init(&cfg, rng);
        Model::assemble(cfg, params)
    }

    /// Build from existing parameters (checkpoint load, weight surgery).
    /// The parameter set must exactly match the config's spec.
    pub fn from_parts(cfg: ModelConfig, params: Params) -> Result<Model> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(LabError::invalid(
                "model",
                format!("expected {} parameter tensors, got {}", specs.len(), params.len()),
            ));
        }
        for (name, shape, _) in &specs {
            let have = params
                .index
                .get(name)
                .map(|&i| params.entries[i].1.shape());
            if have != Some(shape.as_slice()) {
                return Err(LabError::invalid(
                    "model",
                    format!("parameter {name} missing or has wrong shape {have:?}, want {shape:?}"),
                ));
            }
        }
        Model::assemble(cfg, params)
    }

    fn assemble(cfg: ModelConfig, params: Params) -> Result<Model> {
        let normalizer = cfg.softmax.resolve(cfg.max_seq_len)?;
        Ok(Model {
            cfg,
            normalizer,
            params,
            head_weight: None,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Override the tied output head (pass `None` to restore tying).
    pub fn set_head_weight(&mut self, weight: Option<Tensor>) {
        if let Some(w) = &weight {
            assert_eq!(
                w.shape(),
                self.params.get("tok_emb").shape(),
                "head weight must match the embedding table shape"
            );
        }
        self.head_weight = weight;
    }

    pub fn head_weight(&self) -> Option<&Tensor> {
        self.head_weight.as_ref()
    }

    // ── forward passes ──────────────────────────────────────────────────

    /// Hidden states `[batch * seq_len, hidden]` for a flat id buffer.
    pub fn hidden_states(
        &self,
        tape: &Tape,
        ids: &[usize],
        seq_len: usize,
        hook: &mut dyn SiteHook,
    ) -> Result<Tensor> {
        let mut ctx = Ctx::new(tape, hook);
        let hidden = self.forward_hidden(&mut ctx, ids, seq_len)?;
        Ok(hidden)
    }

    /// Masked-token loss: cross-entropy of `targets` at `positions` (flat
    /// indices into the `batch * seq_len` id buffer).
    pub fn forward_mlm(
        &self,
        tape: &Tape,
        ids: &[usize],
        positions: &[usize],
        targets: &[usize],
        seq_len: usize,
    ) -> Result<ForwardOutput> {
        self.forward_mlm_hooked(tape, ids, positions, targets, seq_len, &mut NoopHook)
    }

    pub fn forward_mlm_hooked(
        &self,
        tape: &Tape,
        ids: &[usize],
        positions: &[usize],
        targets: &[usize],
        seq_len: usize,
        hook: &mut dyn SiteHook,
    ) -> Result<ForwardOutput> {
        if self.cfg.objective != Objective::Mlm {
            return Err(LabError::invalid(
                "forward_mlm",
                "model was built for next-token prediction",
            ));
        }
        if positions.is_empty() {
            return Err(LabError::invalid("forward_mlm", "batch selects no positions to predict"));
        }
        if positions.len() != targets.len() {
            return Err(LabError::invalid(
                "forward_mlm",
                format!("{} positions but {} targets", positions.len(), targets.len()),
            ));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
            return Err(LabError::invalid(
                "forward_mlm",
                format!("position {p} outside batch of {} tokens", ids.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(LabError::invalid(
                "forward_mlm",
                format!("target id {t} outside vocabulary of {}", self.cfg.vocab_size),
            ));
        }
        let mut ctx = Ctx::new(tape, hook);
        let hidden = self.forward_hidden(&mut ctx, ids, seq_len)?;
        let picked = tape.gather_rows(&hidden, positions);
        let logits = self.head_logits(&mut ctx, &picked);
        let loss = tape.cross_entropy(&logits, targets);
        Ok(ForwardOutput {
            loss,
            logits,
            bound: ctx.bound,
        })
    }

    /// Next-token loss over every position but the last of each sequence.
    pub fn forward_clm(&self, tape: &Tape, ids: &[usize], seq_len: usize) -> Result<ForwardOutput> {
        self.forward_clm_hooked(tape, ids, seq_len, &mut NoopHook)
    }

    pub fn forward_clm_hooked(
        &self,
        tape: &Tape,
        ids: &[usize],
        seq_len: usize,
        hook: &mut dyn SiteHook,
    ) -> Result<ForwardOutput> {
        if self.cfg.objective != Objective::CausalLm {
            return Err(LabError::invalid(
                "forward_clm",
                "model was built for masked-token prediction",
            ));
        }
        if seq_len < 2 {
            return Err(LabError::invalid(
                "forward_clm",
                "next-token prediction needs sequences of at least 2 tokens",
            ));
        }
        let mut ctx = Ctx::new(tape, hook);
        let hidden = self.forward_hidden(&mut ctx, ids, seq_len)?;
        let mut positions = Vec::with_capacity(ids.len() - ids.len() / seq_len);
        let mut targets = Vec::with_capacity(positions.capacity());
        for (i, &next) in ids.iter().enumerate().skip(1) {
            if i % seq_len != 0 {
                positions.push(i - 1);
                targets.push(next);
            }
        }
        let picked = tape.gather_rows(&hidden, &positions);
        let logits = self.head_logits(&mut ctx, &picked);
        let loss = tape.cross_entropy(&logits, &targets);
        Ok(ForwardOutput {
            loss,
            logits,
            bound: ctx.bound,
        })
    }

    /// Record every activation site for one batch (inference mode).
    pub fn capture_activations(&self, ids: &[usize], seq_len: usize) -> Result<ActivationTrace> {
        let tape = Tape::inference();
        let mut hook = CaptureHook {
            trace: ActivationTrace::default(),
        };
        self.hidden_states(&tape, ids, seq_len, &mut hook)?;
        Ok(hook.trace)
    }

    /// Per-layer, per-head attention probabilities for one sequence.
    pub fn export_attention(&self, ids: &[usize], seq_len: usize) -> Result<AttentionExport> {
        if ids.len() != seq_len {
            return Err(LabError::invalid(
                "export_attention",
                format!("expected one sequence of {seq_len} tokens, got {}", ids.len()),
            ));
        }
        let trace = self.capture_activations(ids, seq_len)?;
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let site = format!("layer.{l}.attn.probs");
            let heads: Vec<HeadAttention> = trace
                .by_site(&site)
                .enumerate()
                .map(|(h, entry)| HeadAttention {
                    head: h,
                    probs: entry.values.clone(),
                    concentration: concentration(&entry.values, seq_len),
                })
                .collect();
            debug_assert_eq!(heads.len(), self.cfg.n_heads);
            layers.push(LayerAttention { layer: l, heads });
        }
        Ok(AttentionExport { seq_len, layers })
    }

    // ── internals ───────────────────────────────────────────────────────

    fn forward_hidden(&self, ctx: &mut Ctx<'_>, ids: &[usize], seq_len: usize) -> Result<Tensor> {
        if seq_len == 0 || ids.is_empty() || ids.len() % seq_len != 0 {
            return Err(LabError::invalid(
                "forward",
                format!("batch of {} ids is not a multiple of seq_len {seq_len}", ids.len()),
            ));
        }
        if seq_len > self.cfg.max_seq_len {
            return Err(LabError::invalid(
                "forward",
                format!(
                    "sequence length {seq_len} exceeds position capacity {}",
                    self.cfg.max_seq_len
                ),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(LabError::invalid(
                "forward",
                format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            ));
        }
        let tape = ctx.tape;
        let batch = ids.len() / seq_len;
        let mask = match self.cfg.objective {
            Objective::Mlm => None,
            Objective::CausalLm => Some(Mask::causal(seq_len)),
        };

        let tok_table = ctx.p(self, "tok_emb");
        let pos_table = ctx.p(self, "pos_emb");
        let tok = tape.embedding_lookup(&tok_table, ids);
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        let pos = tape.embedding_lookup(&pos_table, &pos_ids);
        let mut x = ctx.site("embeddings", tape.add(&tok, &pos));

        if self.cfg.objective == Objective::Mlm {
            let normed = self.ln_affine(ctx, &x, "emb_norm");
            x = ctx.site("emb_norm", normed);
        }

        let post = self.cfg.placement() == NormPlacement::PostNorm;
        for l in 0..self.cfg.n_layers {
            let p = |suffix: &str| format!("layer.{l}.{suffix}");
            // Attention sub-block.
            let attn_in = if post {
                x.clone()
            } else {
                let normed = self.ln_affine(ctx, &x, &p("attn_norm"));
                ctx.site(&p("attn_norm"), normed)
            };
            let attn = self.attention(ctx, &attn_in, l, batch, seq_len, mask.as_ref());
            x = ctx.site(&p("attn.residual"), ctx.tape.add(&x, &attn));
            if post {
                let normed = self.ln_affine(ctx, &x, &p("attn_norm"));
                x = ctx.site(&p("attn_norm"), normed);
            }
            // Feed-forward sub-block.
            let ffn_in = if post {
                x.clone()
            } else {
                let normed = self.ln_affine(ctx, &x, &p("ffn_norm"));
                ctx.site(&p("ffn_norm"), normed)
            };
            let ffn = self.feed_forward(ctx, &ffn_in, l);
            x = ctx.site(&p("ffn.residual"), ctx.tape.add(&x, &ffn));
            if post {
                let normed = self.ln_affine(ctx, &x, &p("ffn_norm"));
                x = ctx.site(&p("ffn_norm"), normed);
            }
        }

        if self.cfg.objective == Objective::CausalLm {
            let normed = self.ln_affine(ctx, &x, "final_norm");
            x = ctx.site("final_norm", normed);
        }
        Ok(x)
    }

    fn attention(
        &self,
        ctx: &mut Ctx<'_>,
        x: &Tensor,
        layer: usize,
        batch: usize,
        seq_len: usize,
        mask: Option<&Mask>,
    ) -> Tensor {
        let tape = ctx.tape;
        let p = |suffix: &str| format!("layer.{layer}.attn.{suffix}");
        let wq = ctx.p(self, &p("wq"));
        let bq = ctx.p(self, &p("bq"));
        let wk = ctx.p(self, &p("wk"));
        let bk = ctx.p(self, &p("bk"));
        let wv = ctx.p(self, &p("wv"));
        let bv = ctx.p(self, &p("bv"));
        let wo = ctx.p(self, &p("wo"));
        let bo = ctx.p(self, &p("bo"));

        let q = ctx.site(&p("q"), tape.add_row(&tape.matmul(x, &wq), &bq));
        let k = ctx.site(&p("k"), tape.add_row(&tape.matmul(x, &wk), &bk));
        let v = ctx.site(&p("v"), tape.add_row(&tape.matmul(x, &wv), &bv));

        let d = self.cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = tape.slice_rows(&q, b * seq_len, seq_len);
            let kb = tape.slice_rows(&k, b * seq_len, seq_len);
            let vb = tape.slice_rows(&v, b * seq_len, seq_len);
            let mut per_head = Vec::with_capacity(self.cfg.n_heads);
            for h in 0..self.cfg.n_heads {
                let qh = tape.slice_cols(&qb, h * d, d);
                let kh = tape.slice_cols(&kb, h * d, d);
                let vh = tape.slice_cols(&vb, h * d, d);
                let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)), scale);
                let probs = attention_normalize(tape, &scores, &self.normalizer, mask);
                let probs = ctx.site(&p("probs"), probs);
                per_head.push(tape.matmul(&probs, &vh));
            }
            let refs: Vec<&Tensor> = per_head.iter().collect();
            per_seq.push(tape.concat_cols(&refs));
        }
        let refs: Vec<&Tensor> = per_seq.iter().collect();
        let context = ctx.site(&p("context"), tape.concat_rows(&refs));
        ctx.site(&p("out"), tape.add_row(&tape.matmul(&context, &wo), &bo))
    }

    fn feed_forward(&self, ctx: &mut Ctx<'_>, x: &Tensor, layer: usize) -> Tensor {
        let tape = ctx.tape;
        let p = |suffix: &str| format!("layer.{layer}.ffn.{suffix}");
        let w1 = ctx.p(self, &p("w1"));
        let b1 = ctx.p(self, &p("b1"));
        let w2 = ctx.p(self, &p("w2"));
        let b2 = ctx.p(self, &p("b2"));
        let pre = ctx.site(&p("pre_act"), tape.add_row(&tape.matmul(x, &w1), &b1));
        let hidden = ctx.site(&p("hidden"), tape.gelu(&pre));
        ctx.site(&p("out"), tape.add_row(&tape.matmul(&hidden, &w2), &b2))
    }

    fn ln_affine(&self, ctx: &mut Ctx<'_>, x: &Tensor, prefix: &str) -> Tensor {
        let tape = ctx.tape;
        let gain = ctx.p(self, &format!("{prefix}.gain"));
        let bias = ctx.p(self, &format!("{prefix}.bias"));
        let normed = tape.layer_norm(x, LAYER_NORM_EPS);
        tape.add_row(&tape.mul_row(&normed, &gain), &bias)
    }

    fn head_logits(&self, ctx: &mut Ctx<'_>, picked: &Tensor) -> Tensor {
        let tape = ctx.tape;
        let w = match &self.head_weight {
            Some(w) => ctx.bind_named("head_weight", w),
            None => ctx.p(self, "tok_emb"),
        };
        tape.matmul(picked, &tape.transpose(&w))
    }
}

/// Per-forward state: the tape, the hook, and a cache of tape-bound
/// parameters so each one registers at most one gradient leaf (the tied
/// embedding must accumulate both its roles into a single node).
struct Ctx<'a> {
    tape: &'a Tape,
    hook: &'a mut dyn SiteHook,
    bound: Vec<(String, Tensor)>,
    bound_idx: HashMap<String, usize>,
}

impl<'a> Ctx<'a> {
    fn new(tape: &'a Tape, hook: &'a mut dyn SiteHook) -> Ctx<'a> {
        Ctx {
            tape,
            hook,
            bound: Vec::new(),
            bound_idx: HashMap::new(),
        }
    }

    /// The tape-bound tensor for a parameter, binding on first use. A tensor
    /// that already carries a node (a finite-difference probe spliced into
    /// `Params`) is used as-is.
    fn p(&mut self, model: &Model, name: &str) -> Tensor {
        self.bind_named(name, model.params.get(name))
    }

    fn bind_named(&mut self, name: &str, t: &Tensor) -> Tensor {
        if let Some(&i) = self.bound_idx.get(name) {
            return self.bound[i].1.clone();
        }
        let bound = if t.node().is_some() {
            t.clone()
        } else {
            self.tape.var(t)
        };
        self.bound_idx.insert(name.to_string(), self.bound.len());
        self.bound.push((name.to_string(), bound.clone()));
        bound
    }

    /// Pass a tensor through the hook, splicing in any replacement.
    fn site(&mut self, name: &str, value: Tensor) -> Tensor {
        match self.hook.observe(name, &value) {
            None => value,
            Some(replacement) => {
                assert!(
                    !self.tape.is_recording(),
                    "site hook replaced {name} on a recording tape; replacements carry no gradient"
                );
                assert_eq!(
                    replacement.shape(),
                    value.shape(),
                    "site hook changed the shape of {name}"
                );
                replacement
            }
        }
    }
}

// ---------------------------------------------------------------------------
