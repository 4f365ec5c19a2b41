//! Orchestration: a run config in, artifacts on disk out.
//!
//! Each command writes into one output directory:
//!
//! * pretrain — `config.resolved.toml`, `metrics.csv`, `model.ckpt`,
//!   `run.json`
//! * eval — `config.resolved.toml`, `eval_report.json`, and `sweep.csv`
//!   when the config asks for a length sweep
//! * sweep — one subdirectory per cell plus a combined `sweep_cells.csv`
//!   with the fixed header `method,pretrain_len,fp_ppl,max_inf_norm,`
//!   `avg_kurtosis,quant_ppl`; a failed cell keeps its row (metrics left
//!   empty) and the run continues
//! * export-attn — one `attn-l{layer}-h{head}.csv` matrix per head, a
//!   `concentration.csv` summary, and the decoded `sequence.txt`
//!
//! Every run rewrites its resolved config snapshot first, so any artifact
//! directory can be reproduced from the snapshot alone. Relative output
//! paths are rooted under `OUTLIER_LAB_OUT` when that variable is set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{build_datasets, RunConfig};
use crate::data::Vocab;
use crate::eval::{fp_vs_quant, length_sweep, write_sweep_csv, EvalReport, REPORT_SCHEMA_VERSION};
use crate::model::{load_checkpoint, Model};
use crate::rng::SeedStreams;
use crate::train::{write_metrics_csv, Trainer};
use crate::{LabError, Result};

pub const SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_SUMMARY_FILE: &str = "run.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_CELLS_FILE: &str = "sweep_cells.csv";
pub const SWEEP_CELLS_HEADER: &str = "method,pretrain_len,fp_ppl,max_inf_norm,avg_kurtosis,quant_ppl";

// ---------------------------------------------------------------------------
// Output directory resolution
// ---------------------------------------------------------------------------

/// Pick the output directory: an explicit override (the `--out` flag) wins
/// over the config's `out_dir`, which wins over `runs/<default_name>`;
/// a relative result is then rooted under `OUTLIER_LAB_OUT` if set.
pub fn resolve_out_dir(
    cfg_out: Option<&Path>,
    cli_out: Option<&Path>,
    default_name: &str,
) -> PathBuf {
    let root = std::env::var_os("OUTLIER_LAB_OUT").map(PathBuf::from);
    resolve_out_dir_under(root.as_deref(), cfg_out, cli_out, default_name)
}

fn resolve_out_dir_under(
    root: Option<&Path>,
    cfg_out: Option<&Path>,
    cli_out: Option<&Path>,
    default_name: &str,
) -> PathBuf {
    let chosen = cli_out
        .or(cfg_out)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| Path::new("runs").join(default_name));
    match root {
        Some(root) if chosen.is_relative() => root.join(chosen),
        _ => chosen,
    }
}

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(SNAPSHOT_FILE);
    std::fs::write(&path, cfg.to_toml()?)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// What `run_pretrain` leaves behind.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

/// Sidecar summary written next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub corpus_hash: String,
}

/// Train a fresh model per the config and write checkpoint, metrics CSV
/// and the resolved snapshot. On divergence the metrics collected so far
/// are still written before the error propagates.
pub fn run_pretrain(cfg: &RunConfig, out_override: Option<&Path>) -> Result<PretrainOutcome> {
    let cfg = cfg.clone().resolve()?;
    let out = resolve_out_dir(
        cfg.out_dir.as_deref(),
        out_override,
        &format!("pretrain-seed{}", cfg.seed),
    );
    write_snapshot(&cfg, &out)?;

    let data = build_datasets(&cfg)?;
    let streams = SeedStreams::new(cfg.seed);
    let model = Model::new(cfg.model.clone(), &mut streams.stream("init"))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;

    let run_result = trainer.run(&data.train);
    let metrics = out.join(METRICS_FILE);
    write_metrics_csv(trainer.records(), &metrics)?;
    run_result?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.save(&checkpoint)?;

    let records = trainer.records();
    let first_loss = records.first().map_or(f64::NAN, |r| r.loss);
    let final_loss = records.last().map_or(f64::NAN, |r| r.loss);
    let summary = RunSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        steps: trainer.step(),
        first_loss,
        final_loss,
        corpus_hash: data.train.corpus_hash().to_string(),
    };
    std::fs::write(
        out.join(RUN_SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).map_err(|e| LabError::Data(e.to_string()))?,
    )?;

    Ok(PretrainOutcome {
        out_dir: out,
        checkpoint,
        metrics,
        first_loss,
        final_loss,
        steps: trainer.step(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// What `run_eval` leaves behind.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub out_dir: PathBuf,
    pub report_path: PathBuf,
    pub sweep_csv: Option<PathBuf>,
    pub report: EvalReport,
}

fn load_model_checked(checkpoint: &Path, cfg: &RunConfig) -> Result<Model> {
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.config != cfg.model {
        return Err(LabError::config(
            "model",
            format!(
                "checkpoint at {} was trained with a different model block; \
                 evaluate against the run's resolved snapshot",
                checkpoint.display()
            ),
        ));
    }
    ckpt.model()
}

/// Score a checkpoint: full-precision vs. quantized comparison, outlier
/// report, and the configured length sweep, all written into the output
/// directory as one JSON report plus the sweep CSV.
pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_override: Option<&Path>,
) -> Result<EvalOutcome> {
    let cfg = cfg.clone().resolve()?;
    let out = resolve_out_dir(
        cfg.out_dir.as_deref(),
        out_override,
        &format!("eval-seed{}", cfg.seed),
    );
    write_snapshot(&cfg, &out)?;

    let data = build_datasets(&cfg)?;
    let model = load_model_checked(checkpoint, &cfg)?;
    let streams = SeedStreams::new(cfg.seed);

    let mut report = fp_vs_quant(&model, &data.train, &data.val, &cfg.quant, &cfg.eval, &streams)?;

    let mut sweep_csv = None;
    if !cfg.eval.lengths.is_empty() {
        report.lengths = length_sweep(&model, &data.val, &cfg.eval.lengths, &streams)?;
        let path = out.join(SWEEP_FILE);
        write_sweep_csv(&report.lengths, &path)?;
        sweep_csv = Some(path);
    }

    let report_path = out.join(EVAL_REPORT_FILE);
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(|e| LabError::Data(e.to_string()))?,
    )?;

    Ok(EvalOutcome { out_dir: out, report_path, sweep_csv, report })
}

// ---------------------------------------------------------------------------
// Sweep over run configs
// ---------------------------------------------------------------------------

/// One row of the combined sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    /// Normalizer name (`vanilla`, `cs`, `ncs`), or the config file stem
    /// when the file never parsed.
    pub method: String,
    /// Position capacity the cell pretrains at; 0 when unknown.
    pub pretrain_len: usize,
    pub fp_ppl: Option<f64>,
    pub max_inf_norm: Option<f64>,
    pub avg_kurtosis: Option<f64>,
    pub quant_ppl: Option<f64>,
    /// Why the metrics are missing, when they are.
    pub error: Option<String>,
}

/// What `run_sweep` leaves behind.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub out_dir: PathBuf,
    pub csv_path: PathBuf,
    pub cells: Vec<SweepCell>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_sweep_cell(path: &Path, cell_dir: &Path) -> Result<(String, usize, EvalReport)> {
    let cfg = RunConfig::load(path)?.resolve()?;
    let method = cfg.model.softmax.variant.to_string();
    let len = cfg.model.max_seq_len;
    let pre = run_pretrain(&cfg, Some(cell_dir))?;
    let eval = run_eval(&cfg, &pre.checkpoint, Some(cell_dir))?;
    Ok((method, len, eval.report))
}

/// Pretrain + evaluate every config in the list and combine the headline
/// numbers into one CSV. A failing cell is recorded in its row (metrics
/// empty, error kept in the outcome) and the sweep moves on.
pub fn run_sweep(configs: &[PathBuf], out_override: Option<&Path>) -> Result<SweepOutcome> {
    if configs.is_empty() {
        return Err(LabError::invalid("sweep", "no run configs given"));
    }
    let out = resolve_out_dir(None, out_override, "sweep");
    std::fs::create_dir_all(&out)?;

    let mut cells = Vec::with_capacity(configs.len());
    for (i, path) in configs.iter().enumerate() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("cell-{i}"));
        let cell_dir = out.join(format!("cell-{i:02}-{stem}"));
        let cell = match run_sweep_cell(path, &cell_dir) {
            Ok((method, len, report)) => {
                let outliers = report.outliers.as_ref();
                SweepCell {
                    method,
                    pretrain_len: len,
                    fp_ppl: Some(report.fp_ppl),
                    max_inf_norm: outliers.map(|o| o.max_inf_norm),
                    avg_kurtosis: outliers.map(|o| o.avg_kurtosis),
                    quant_ppl: report.quant_ppl,
                    error: None,
                }
            }
            Err(e) => SweepCell {
                method: stem,
                pretrain_len: 0,
                fp_ppl: None,
                max_inf_norm: None,
                avg_kurtosis: None,
                quant_ppl: None,
                error: Some(e.to_string()),
            },
        };
        cells.push(cell);
    }

    let mut csv = String::from(SWEEP_CELLS_HEADER);
    csv.push('\n');
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.method,
            c.pretrain_len,
            opt(c.fp_ppl),
            opt(c.max_inf_norm),
            opt(c.avg_kurtosis),
            opt(c.quant_ppl),
        ));
    }
    let csv_path = out.join(SWEEP_CELLS_FILE);
    std::fs::write(&csv_path, csv)?;

    Ok(SweepOutcome { out_dir: out, csv_path, cells })
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// What `run_export_attn` leaves behind.
#[derive(Debug, Clone)]
pub struct ExportOutcome {
    pub out_dir: PathBuf,
    pub matrices: Vec<PathBuf>,
    pub concentration_csv: PathBuf,
}

fn write_matrix_csv(path: &Path, probs: &[f64], t: usize) -> Result<()> {
    let mut text = String::new();
    for row in probs.chunks(t) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Dump one validation sequence's attention: a `seq_len x seq_len` CSV
/// matrix per (layer, head) plus a concentration summary.
pub fn run_export_attn(
    cfg: &RunConfig,
    checkpoint: &Path,
    sequence_index: usize,
    out_override: Option<&Path>,
) -> Result<ExportOutcome> {
    let cfg = cfg.clone().resolve()?;
    let out = resolve_out_dir(
        cfg.out_dir.as_deref(),
        out_override,
        &format!("attn-seed{}", cfg.seed),
    );
    write_snapshot(&cfg, &out)?;

    let data = build_datasets(&cfg)?;
    let model = load_model_checked(checkpoint, &cfg)?;
    if sequence_index >= data.val.num_sequences() {
        return Err(LabError::invalid(
            "export_attn",
            format!(
                "sequence index {sequence_index} outside the validation set of {}",
                data.val.num_sequences()
            ),
        ));
    }
    let ids: Vec<usize> =
        data.val.sequence(sequence_index).iter().map(|&t| t as usize).collect();
    let export = model.export_attention(&ids, data.val.seq_len())?;

    write_sequence_txt(&out, &ids, &data.vocab)?;

    let mut matrices = Vec::new();
    let mut conc = String::from("layer,head,concentration\n");
    for layer in &export.layers {
        for head in &layer.heads {
            let path = out.join(format!("attn-l{}-h{}.csv", layer.layer, head.head));
            write_matrix_csv(&path, &head.probs, export.seq_len)?;
            conc.push_str(&format!("{},{},{}\n", layer.layer, head.head, head.concentration));
            matrices.push(path);
        }
    }
    let concentration_csv = out.join("concentration.csv");
    std::fs::write(&concentration_csv, conc)?;

    Ok(ExportOutcome { out_dir: out, matrices, concentration_csv })
}

fn write_sequence_txt(out: &Path, ids: &[usize], vocab: &Vocab) -> Result<()> {
    let decoded = vocab.decode(ids)?;
    let id_line: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    std::fs::write(out.join("sequence.txt"), format!("{}\n{}\n", id_line.join(" "), decoded))?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Objective;
    use crate::softmax::{Direction, SoftmaxConfig};

    fn tiny_run(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.n_layers = 1;
        cfg.model.hidden = 16;
        cfg.model.n_heads = 2;
        cfg.model.vocab_size = 128;
        cfg.model.max_seq_len = 16;
        cfg.train.max_steps = 12;
        cfg.train.warmup_steps = 3;
        cfg.train.batch_size = 4;
        cfg.data.synth_bytes = 20_000;
        cfg.data.val_frac = 0.2;
        cfg.quant.calib_batches = 4;
        cfg.quant.calib_batch_size = 4;
        cfg.eval.n_samples = 4;
        cfg
    }

    #[test]
    fn out_dir_resolution_prefers_flag_then_config_then_default() {
        let cfg = Path::new("from-config");
        let flag = Path::new("from-flag");
        assert_eq!(
            resolve_out_dir_under(None, Some(cfg), Some(flag), "d"),
            PathBuf::from("from-flag")
        );
        assert_eq!(
            resolve_out_dir_under(None, Some(cfg), None, "d"),
            PathBuf::from("from-config")
        );
        assert_eq!(
            resolve_out_dir_under(None, None, None, "d"),
            Path::new("runs").join("d")
        );
        // The env root re-roots relative paths and leaves absolute ones be.
        let root = Path::new("/lab-out");
        assert_eq!(
            resolve_out_dir_under(Some(root), Some(cfg), None, "d"),
            Path::new("/lab-out").join("from-config")
        );
        assert_eq!(
            resolve_out_dir_under(Some(root), None, Some(Path::new("/abs/x")), "d"),
            PathBuf::from("/abs/x")
        );
    }

    #[test]
    fn pretrain_writes_checkpoint_metrics_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(1);
        let outcome = run_pretrain(&cfg, Some(dir.path())).unwrap();

        assert_eq!(outcome.steps, 12);
        assert!(outcome.checkpoint.exists());
        assert!(outcome.final_loss.is_finite());

        let metrics = std::fs::read_to_string(&outcome.metrics).unwrap();
        assert!(metrics.starts_with("step,loss,lr,grad_norm\n"));
        assert_eq!(metrics.lines().count(), 13, "header plus one row per step");

        // The snapshot alone reproduces the run's exact configuration.
        let snapshot = RunConfig::load(&dir.path().join(SNAPSHOT_FILE)).unwrap();
        assert_eq!(snapshot.train.seed, 1);
        assert_eq!(snapshot.resolve().unwrap(), cfg.resolve().unwrap());

        let summary: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_SUMMARY_FILE)).unwrap())
                .unwrap();
        assert_eq!(summary.steps, 12);
        assert_eq!(summary.final_loss, outcome.final_loss);
    }

    #[test]
    fn eval_scores_a_checkpoint_and_writes_the_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run(2);
        cfg.eval.lengths = vec![8, 16];
        let pre = run_pretrain(&cfg, Some(&dir.path().join("pre"))).unwrap();

        let eval_dir = dir.path().join("eval");
        let outcome = run_eval(&cfg, &pre.checkpoint, Some(&eval_dir)).unwrap();
        assert!(outcome.report_path.exists());
        assert_eq!(outcome.report.lengths.len(), 2);
        assert!(outcome.report.quant_ppl.is_some());
        assert!(outcome.report.outliers.is_some());

        let sweep = std::fs::read_to_string(outcome.sweep_csv.as_ref().unwrap()).unwrap();
        assert!(sweep.starts_with("length,metric,n_sequences\n"));

        // Determinism: evaluating the same checkpoint twice is bit-identical.
        let again = run_eval(&cfg, &pre.checkpoint, Some(&dir.path().join("eval2"))).unwrap();
        assert_eq!(
            std::fs::read_to_string(&outcome.report_path).unwrap(),
            std::fs::read_to_string(&again.report_path).unwrap()
        );
    }

    #[test]
    fn eval_rejects_a_checkpoint_from_another_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(3);
        let pre = run_pretrain(&cfg, Some(&dir.path().join("pre"))).unwrap();

        let mut other = tiny_run(3);
        other.model.hidden = 32;
        let err = run_eval(&other, &pre.checkpoint, Some(&dir.path().join("eval")))
            .unwrap_err()
            .to_string();
        assert!(err.contains("model"), "{err}");
    }

    #[test]
    fn sweep_keeps_rows_for_failing_cells_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        std::fs::write(&good, tiny_run(4).to_toml().unwrap()).unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "definitely not toml [").unwrap();

        let out = dir.path().join("sweep");
        let outcome = run_sweep(&[good.clone(), bad.clone()], Some(&out)).unwrap();
        assert_eq!(outcome.cells.len(), 2);
        assert!(outcome.cells[0].error.is_none());
        assert!(outcome.cells[0].fp_ppl.is_some());
        assert_eq!(outcome.cells[0].method, "vanilla");
        assert_eq!(outcome.cells[0].pretrain_len, 16);
        assert!(outcome.cells[1].error.is_some());
        assert_eq!(outcome.cells[1].method, "bad");

        let csv = std::fs::read_to_string(&outcome.csv_path).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SWEEP_CELLS_HEADER));
        assert_eq!(lines.clone().count(), 2, "one row per cell");
        let bad_row = lines.nth(1).unwrap();
        assert_eq!(bad_row, "bad,0,,,,", "failed cell keeps an empty-metric row");

        let again = run_sweep(&[good, bad], Some(&dir.path().join("sweep2"))).unwrap();
        assert_eq!(csv, std::fs::read_to_string(&again.csv_path).unwrap());
    }

    #[test]
    fn export_attn_dumps_every_head_and_its_concentration() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run(5);
        cfg.model.objective = Objective::CausalLm;
        cfg.softmax = Some(SoftmaxConfig::vanilla(Direction::Causal));
        let pre = run_pretrain(&cfg, Some(&dir.path().join("pre"))).unwrap();

        let out = dir.path().join("attn");
        let outcome = run_export_attn(&cfg, &pre.checkpoint, 0, Some(&out)).unwrap();
        assert_eq!(outcome.matrices.len(), 2, "one layer times two heads");
        let matrix = std::fs::read_to_string(&outcome.matrices[0]).unwrap();
        assert_eq!(matrix.lines().count(), 16);
        let first_row: Vec<&str> = matrix.lines().next().unwrap().split(',').collect();
        assert_eq!(first_row.len(), 16);

        let conc = std::fs::read_to_string(&outcome.concentration_csv).unwrap();
        assert!(conc.starts_with("layer,head,concentration\n"));
        assert_eq!(conc.lines().count(), 3, "header plus one row per head");
        assert!(out.join("sequence.txt").exists());

        let err = run_export_attn(&cfg, &pre.checkpoint, 10_000, Some(&out))
            .unwrap_err()
            .to_string();
        assert!(err.contains("sequence index"), "{err}");
    }
}
