//! Command implementations. Each command is a pure function of its resolved
//! configuration and input files; all outputs go to one directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dynsparse_core::costmodel::{energy_estimate, layer_breakdown, sparse_softmax_saving, CostReport, EnergyEstimate, EnergyTable};
use dynsparse_core::dataflow::{chain_simulate, column_union_bound, reduction_report, simulate, Schedule, ScheduleKind};
use dynsparse_core::maskgen::{global_token_mask, keep_per_row, random_mask};
use dynsparse_core::training::{
    eval_dataset, evaluate, train, AttentionMode, EvalMetrics, EvalOptions, ForwardOptions, MaskPolicy, ScheduleKind as TrainSchedule,
    Tape, ToyModel, TrainConfig, TrainOutcome,
};
use dynsparse_core::{Rng, SparseMask};
use serde::Serialize;

use crate::config::{
    CostCommand, DataflowCommand, MaskSource, ModelShape, OracleSparsityCommand, SweepCommand, TrainCommand,
};
use crate::error::{CliError, Result};
use crate::formats;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Envelope shared by every JSON report.
#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    artifact: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    results: R,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_report<C: Serialize, R: Serialize>(dir: &Path, name: &str, command: &str, config: &C, results: R) -> Result<PathBuf> {
    let report = Report {
        artifact: "dynsparse",
        version: VERSION,
        command,
        config,
        results,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(dir, name, &text)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    formats::read_checkpoint(&read_file(path)?)
}

/// Starting model for a training run: fresh, or a checkpoint whose
/// prediction path is reshaped to the requested σ and bit width.
fn initial_model(shape: &ModelShape, task: &dynsparse_core::training::ToyTaskSpec, init: Option<&Path>, seed: u64) -> Result<ToyModel> {
    let want = shape.model_config(task);
    match init {
        None => Ok(ToyModel::new(want, seed)?),
        Some(path) => {
            let model = load_checkpoint(path)?;
            let have = model.config();
            let same = (have.vocab, have.seq_len, have.d, have.heads, have.layers, have.ffn, have.classes, have.share_projection, have.scale)
                == (want.vocab, want.seq_len, want.d, want.heads, want.layers, want.ffn, want.classes, want.share_projection, want.scale);
            if !same {
                return Err(CliError::Config(format!(
                    "checkpoint {} does not match the configured model/task shape",
                    path.display()
                )));
            }
            Ok(model.with_predictor(want.sigma, want.pred_bits, seed)?)
        }
    }
}

fn evals_csv(evals: &[EvalMetrics]) -> String {
    let mut out = String::from("step,accuracy,model_loss,mse_loss,prediction_accuracy,relative_error,attention_sparsity,empty_rows\n");
    for e in evals {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.step,
            e.accuracy,
            e.model_loss,
            opt(e.mse_loss),
            opt(e.prediction_accuracy),
            opt(e.relative_error),
            e.attention_sparsity,
            e.empty_rows
        )
        .unwrap();
    }
    out
}

#[derive(Serialize)]
struct TrainResults<'a> {
    param_count: usize,
    steps: usize,
    final_eval: &'a EvalMetrics,
    evals: &'a [EvalMetrics],
}

pub fn cmd_train(cfg: &TrainCommand, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = initial_model(&cfg.model, &cfg.task, cfg.init_checkpoint.as_deref(), cfg.train.seed)?;
    let outcome = train(&cfg.train, &cfg.task, model)?;
    write_file(out, "checkpoint.dsackpt", &formats::write_checkpoint(&outcome.model))?;
    let mut lines = String::new();
    for h in &outcome.history {
        lines.push_str(&serde_json::to_string(h).expect("record serializes"));
        lines.push('\n');
    }
    write_file(out, "metrics.jsonl", &lines)?;
    write_file(out, "evals.csv", &evals_csv(&outcome.evals))?;
    write_report(
        out,
        "train_report.json",
        "train",
        cfg,
        TrainResults {
            param_count: outcome.model.param_count(),
            steps: outcome.history.len(),
            final_eval: outcome.final_eval(),
            evals: &outcome.evals,
        },
    )?;
    Ok(outcome)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub sigma: f64,
    pub bits: u32,
    pub sparsity: f64,
    pub policy: MaskPolicy,
    pub dense_accuracy: f64,
    pub accuracy: f64,
    pub prediction_accuracy: Option<f64>,
    pub layer_prediction_accuracy: Vec<f64>,
    pub mse_loss: Option<f64>,
    pub relative_error: Option<f64>,
}

/// Median across seeds of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub sigma: f64,
    pub bits: u32,
    pub sparsity: f64,
    pub policy: MaskPolicy,
    pub seeds: usize,
    pub median_accuracy: f64,
    pub median_prediction_accuracy: Option<f64>,
    pub median_layer_prediction_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResults {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(f64, u32, f64, MaskPolicy)> = Vec::new();
    for r in rows {
        let k = (r.sigma, r.bits, r.sparsity, r.policy);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(sigma, bits, sparsity, policy)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| (r.sigma, r.bits, r.sparsity, r.policy) == (sigma, bits, sparsity, policy))
                .collect();
            let mut acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            let mut pacc: Vec<f64> = group.iter().filter_map(|r| r.prediction_accuracy).collect();
            let layers = group.iter().map(|r| r.layer_prediction_accuracy.len()).min().unwrap_or(0);
            let per_layer = (0..layers)
                .map(|l| median(&mut group.iter().map(|r| r.layer_prediction_accuracy[l]).collect::<Vec<_>>()))
                .collect();
            SweepSummary {
                sigma,
                bits,
                sparsity,
                policy,
                seeds: group.len(),
                median_accuracy: median(&mut acc),
                median_prediction_accuracy: (!pacc.is_empty()).then(|| median(&mut pacc)),
                median_layer_prediction_accuracy: per_layer,
            }
        })
        .collect()
}

fn finetune_config(base: &TrainConfig, seed: u64, sparsity: f64, policy: MaskPolicy) -> TrainConfig {
    let mut t = base.clone();
    t.schedule = TrainSchedule::AdaptFinetune;
    t.seed = seed;
    t.sparsity = sparsity;
    t.policy = policy;
    t
}

pub fn cmd_sweep(cfg: &SweepCommand, out: &Path) -> Result<SweepResults> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let base = match &cfg.init_checkpoint {
            Some(path) => initial_model(&cfg.model, &cfg.task, Some(path), seed)?,
            None => {
                let mut pre = cfg.pretrain.clone();
                pre.seed = seed;
                pre.schedule = TrainSchedule::DensePretrain;
                train(&pre, &cfg.task, ToyModel::new(cfg.model.model_config(&cfg.task), seed)?)?.model
            }
        };
        let eval_set = eval_dataset(&cfg.task, cfg.finetune.eval_samples, seed)?;
        let dense_accuracy = evaluate(&base, &eval_set, &EvalOptions::new(AttentionMode::Dense))?.accuracy;
        let mut run = |sigma: f64, bits: u32, sparsity: f64, policy: MaskPolicy| -> Result<()> {
            let model = base.with_predictor(sigma, bits, seed)?;
            let ft = finetune_config(&cfg.finetune, seed, sparsity, policy);
            let outcome = train(&ft, &cfg.task, model)?;
            let e = outcome.final_eval();
            rows.push(SweepRow {
                seed,
                sigma,
                bits,
                sparsity,
                policy,
                dense_accuracy,
                accuracy: e.accuracy,
                prediction_accuracy: e.prediction_accuracy,
                layer_prediction_accuracy: e.layer_prediction_accuracy.clone(),
                mse_loss: e.mse_loss,
                relative_error: e.relative_error,
            });
            Ok(())
        };
        for &sigma in &cfg.sigmas {
            for &bits in &cfg.bits {
                for &sparsity in &cfg.sparsities {
                    run(sigma, bits, sparsity, MaskPolicy::Predicted)?;
                }
            }
        }
        let (sigma, bits) = (cfg.sigmas[0], cfg.bits[0]);
        for &sparsity in &cfg.sparsities {
            if cfg.random_control {
                run(sigma, bits, sparsity, MaskPolicy::Random)?;
            }
            if cfg.local_control {
                run(sigma, bits, sparsity, MaskPolicy::LocalWindow)?;
            }
        }
    }
    let results = SweepResults {
        summary: summarize(&rows),
        rows,
    };
    let mut csv = String::from("seed,sigma,bits,sparsity,policy,dense_accuracy,accuracy,prediction_accuracy,layer_prediction_accuracy,mse_loss,relative_error\n");
    for r in &results.rows {
        let layers: Vec<String> = r.layer_prediction_accuracy.iter().map(|v| v.to_string()).collect();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.sigma,
            r.bits,
            r.sparsity,
            policy_name(r.policy),
            r.dense_accuracy,
            r.accuracy,
            opt(r.prediction_accuracy),
            layers.join(";"),
            opt(r.mse_loss),
            opt(r.relative_error)
        )
        .unwrap();
    }
    write_file(out, "sweep.csv", &csv)?;
    write_report(out, "sweep_report.json", "sweep", cfg, &results)?;
    Ok(results)
}

fn policy_name(p: MaskPolicy) -> &'static str {
    match p {
        MaskPolicy::Predicted => "predicted",
        MaskPolicy::Oracle => "oracle",
        MaskPolicy::Random => "random",
        MaskPolicy::LocalWindow => "local_window",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub report: CostReport,
    pub energy: EnergyEstimate,
    /// `l² / nnz` of the softmax stage.
    pub softmax_saving: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostResults {
    pub energy_table: EnergyTable,
    pub rows: Vec<CostRow>,
}

pub fn cmd_cost(cfg: &CostCommand, out: &Path) -> Result<CostResults> {
    cfg.validate()?;
    let table = cfg.energy_table.clone().unwrap_or_else(EnergyTable::placeholder);
    let mut rows = Vec::new();
    for named in cfg.resolved_shapes()? {
        for &s in &cfg.sparsities {
            let report = layer_breakdown(&named.shape, s)?;
            let energy = energy_estimate(&report, &table)?;
            rows.push(CostRow {
                name: named.name.clone(),
                softmax_saving: sparse_softmax_saving(named.shape.l, s)?,
                report,
                energy,
            });
        }
    }
    let mut csv = String::from(
        "name,l,sparsity,linear,attention_dense,attention_dsa,other,prediction_raw,prediction_weighted,total_dense,total_dsa,reduction_ratio,overhead_ratio,overhead_vs_attention,attention_share,energy_relative,softmax_saving\n",
    );
    for r in &rows {
        let c = &r.report;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            c.shape.l,
            c.sparsity,
            c.macs_linear,
            c.macs_attention_dense,
            c.macs_attention_dsa,
            c.macs_other,
            c.macs_prediction_raw,
            c.macs_prediction_weighted,
            c.total_dense,
            c.total_dsa,
            c.reduction_ratio,
            c.overhead_ratio,
            c.overhead_vs_attention,
            c.attention_share,
            r.energy.relative,
            r.softmax_saving
        )
        .unwrap();
    }
    let results = CostResults {
        energy_table: table,
        rows,
    };
    write_file(out, "cost_breakdown.csv", &csv)?;
    write_report(out, "cost_report.json", "cost", cfg, &results)?;
    Ok(results)
}

/// Masks a trained checkpoint's predictor selects on held-out samples,
/// labelled `sample/layer/head`.
pub fn harvest_masks(model: &ToyModel, task: &dynsparse_core::training::ToyTaskSpec, sparsity: f64, samples: usize, seed: u64) -> Result<Vec<(String, SparseMask)>> {
    let data = eval_dataset(task, samples, seed)?;
    let mut opts = ForwardOptions::new(AttentionMode::Sparse {
        sparsity,
        policy: MaskPolicy::Predicted,
    });
    opts.collect = true;
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let mut tape = Tape::new(model.precision());
        let pass = model.forward(&mut tape, &s.tokens, None, &opts, &mut rng)?;
        for h in pass.heads {
            if let Some(m) = h.mask {
                out.push((format!("sample{i}/layer{}/head{}", h.layer, h.head), m));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataflowRow {
    pub source: usize,
    pub mask: String,
    pub l: usize,
    pub nnz: u64,
    pub band: usize,
    pub row_by_row: u64,
    pub row_parallel: u64,
    pub row_parallel_reordered: u64,
    pub column_union_bound: u64,
    pub ratio_row_parallel: f64,
    pub ratio_reordered: f64,
    pub pe_idle_row_parallel: u64,
    pub chain_total_reordered: u64,
    pub chain_reshuffled: u64,
    pub dominance_holds: bool,
    pub closed_form_holds: bool,
}

/// Fetch totals over all masks of one source at one band height.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataflowAggregate {
    pub source: usize,
    pub band: usize,
    pub masks: usize,
    pub nnz: u64,
    pub row_by_row: u64,
    pub row_parallel: u64,
    pub row_parallel_reordered: u64,
    pub ratio_row_parallel: f64,
    pub ratio_reordered: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataflowResults {
    pub rows: Vec<DataflowRow>,
    pub aggregates: Vec<DataflowAggregate>,
}

fn resolve_masks(src: &MaskSource, seed_override: Option<u64>) -> Result<Vec<(String, SparseMask)>> {
    Ok(match src {
        MaskSource::Diagonal { l } => vec![(format!("diagonal_{l}"), SparseMask::diagonal(*l))],
        MaskSource::GlobalToken { l, globals, window } => vec![(
            format!("global_token_{l}_{globals}_{window}"),
            global_token_mask(*l, *globals, *window)?,
        )],
        MaskSource::Random { l, sparsity, seed } => {
            let seed = seed_override.unwrap_or(*seed);
            let keep = keep_per_row(*l, *sparsity);
            vec![(format!("random_{l}_{sparsity}_{seed}"), random_mask(*l, keep, &mut Rng::new(seed))?)]
        }
        MaskSource::File { path } => vec![(path.display().to_string(), formats::read_mask(&read_file(path)?)?)],
        MaskSource::Trained {
            checkpoint,
            task,
            sparsity,
            samples,
            seed,
        } => {
            let model = load_checkpoint(checkpoint)?;
            harvest_masks(&model, task, *sparsity, *samples, seed_override.unwrap_or(*seed))?
        }
    })
}

pub fn dataflow_row(source: usize, name: &str, mask: &SparseMask, band: usize) -> Result<DataflowRow> {
    let r = reduction_report(mask, band)?;
    let par = simulate(mask, Schedule::new(ScheduleKind::RowParallel, band)?);
    let chain = chain_simulate(mask, Schedule::new(ScheduleKind::RowParallelReordered, band)?);
    let bound = column_union_bound(mask, band);
    Ok(DataflowRow {
        source,
        mask: name.to_string(),
        l: mask.l(),
        nnz: r.nnz,
        band,
        row_by_row: r.row_by_row,
        row_parallel: r.row_parallel,
        row_parallel_reordered: r.row_parallel_reordered,
        column_union_bound: bound,
        ratio_row_parallel: r.ratio_row_parallel,
        ratio_reordered: r.ratio_reordered,
        pe_idle_row_parallel: par.pe_idle_steps,
        chain_total_reordered: chain.total_fetches,
        chain_reshuffled: chain.reshuffled_entries,
        dominance_holds: r.row_parallel_reordered <= r.row_parallel && r.row_parallel <= r.row_by_row,
        closed_form_holds: r.row_parallel_reordered == bound,
    })
}

pub fn cmd_dataflow(cfg: &DataflowCommand, out: &Path) -> Result<DataflowResults> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for (si, src) in cfg.masks.iter().enumerate() {
        let masks = resolve_masks(src, cfg.seed)?;
        for &band in &cfg.bands {
            let start = rows.len();
            for (name, mask) in &masks {
                rows.push(dataflow_row(si, name, mask, band)?);
            }
            let group = &rows[start..];
            let sum = |f: fn(&DataflowRow) -> u64| group.iter().map(f).sum::<u64>();
            let (rbr, par, reo) = (sum(|r| r.row_by_row), sum(|r| r.row_parallel), sum(|r| r.row_parallel_reordered));
            aggregates.push(DataflowAggregate {
                source: si,
                band,
                masks: group.len(),
                nnz: sum(|r| r.nnz),
                row_by_row: rbr,
                row_parallel: par,
                row_parallel_reordered: reo,
                ratio_row_parallel: rbr as f64 / par.max(1) as f64,
                ratio_reordered: rbr as f64 / reo.max(1) as f64,
            });
        }
    }
    let mut csv = String::from("source,mask,l,nnz,band,row_by_row,row_parallel,row_parallel_reordered,column_union_bound,ratio_row_parallel,ratio_reordered,pe_idle_row_parallel,dominance_holds,closed_form_holds\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.source,
            r.mask,
            r.l,
            r.nnz,
            r.band,
            r.row_by_row,
            r.row_parallel,
            r.row_parallel_reordered,
            r.column_union_bound,
            r.ratio_row_parallel,
            r.ratio_reordered,
            r.pe_idle_row_parallel,
            r.dominance_holds,
            r.closed_form_holds
        )
        .unwrap();
    }
    let results = DataflowResults { rows, aggregates };
    write_file(out, "dataflow.csv", &csv)?;
    write_report(out, "dataflow_report.json", "dataflow", cfg, &results)?;
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub theta: f64,
    pub sparsity: f64,
    pub accuracy: f64,
    pub accuracy_drop: f64,
    pub empty_rows: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSparsityResults {
    /// Thresholds apply to post-softmax attention weights.
    pub threshold_domain: &'static str,
    pub baseline_accuracy: f64,
    pub rows: Vec<ThresholdRow>,
    /// Largest threshold whose accuracy drop stays within `max_drop`.
    pub best: Option<ThresholdRow>,
}

pub fn oracle_sparsity(model: &ToyModel, cfg: &OracleSparsityCommand) -> Result<OracleSparsityResults> {
    cfg.validate()?;
    let data = eval_dataset(&cfg.task, cfg.eval_samples, cfg.seed)?;
    let baseline = evaluate(model, &data, &EvalOptions::new(AttentionMode::Dense))?.accuracy;
    let mut thetas = cfg.thetas.clone();
    thetas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::new();
    for theta in thetas {
        let m = evaluate(model, &data, &EvalOptions::new(AttentionMode::Threshold { theta }))?;
        rows.push(ThresholdRow {
            theta,
            sparsity: m.attention_sparsity,
            accuracy: m.accuracy,
            accuracy_drop: baseline - m.accuracy,
            empty_rows: m.empty_rows,
        });
    }
    let best = rows
        .iter()
        .filter(|r| r.accuracy_drop <= cfg.max_drop + 1e-12)
        .max_by(|a, b| a.theta.partial_cmp(&b.theta).unwrap())
        .cloned();
    Ok(OracleSparsityResults {
        threshold_domain: "post_softmax",
        baseline_accuracy: baseline,
        rows,
        best,
    })
}

pub fn cmd_oracle_sparsity(cfg: &OracleSparsityCommand, out: &Path) -> Result<OracleSparsityResults> {
    cfg.validate()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let results = oracle_sparsity(&model, cfg)?;
    let mut csv = String::from("theta,sparsity,accuracy,accuracy_drop,empty_rows\n");
    for r in &results.rows {
        writeln!(csv, "{},{},{},{},{}", r.theta, r.sparsity, r.accuracy, r.accuracy_drop, r.empty_rows).unwrap();
    }
    write_file(out, "oracle_sparsity.csv", &csv)?;
    write_report(out, "oracle_sparsity_report.json", "oracle-sparsity", cfg, &results)?;
    Ok(results)
}
