//! JSON run configurations. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use dynsparse_core::costmodel::{EnergyTable, LayerShape, Preset};
use dynsparse_core::training::{MaskPolicy, ModelConfig, ScheduleKind, ToyTaskSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Transformer shape; sequence length, vocabulary and class count come from
/// the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub sigma: f64,
    pub pred_bits: u32,
    #[serde(default)]
    pub share_projection: bool,
    #[serde(default = "yes")]
    pub scale: bool,
}

fn yes() -> bool {
    true
}

impl ModelShape {
    pub fn model_config(&self, task: &ToyTaskSpec) -> ModelConfig {
        ModelConfig {
            vocab: task.vocab(),
            seq_len: task.seq_len,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            ffn: self.ffn,
            classes: task.num_classes,
            sigma: self.sigma,
            pred_bits: self.pred_bits,
            share_projection: self.share_projection,
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommand {
    pub task: ToyTaskSpec,
    pub model: ModelShape,
    pub train: TrainConfig,
    /// Starting weights; required by `adapt-finetune`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCommand {
    pub task: ToyTaskSpec,
    pub model: ModelShape,
    /// Dense pretraining per seed, skipped when `init_checkpoint` is given.
    pub pretrain: TrainConfig,
    /// Adaptation run per grid point; its sparsity and policy are replaced by
    /// the grid values.
    pub finetune: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub sigmas: Vec<f64>,
    pub bits: Vec<u32>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Adds a random-mask row per (seed, sparsity).
    #[serde(default)]
    pub random_control: bool,
    /// Adds a local-window row per (seed, sparsity).
    #[serde(default)]
    pub local_control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedShape {
    pub name: String,
    pub shape: LayerShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostCommand {
    /// Built-in shapes by name: text, text-4k, retrieval, image, desk.
    #[serde(default)]
    pub presets: Vec<String>,
    #[serde(default)]
    pub shapes: Vec<NamedShape>,
    pub sparsities: Vec<f64>,
    /// Relative MAC energy per precision; defaults to the documented
    /// placeholder table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_table: Option<EnergyTable>,
}

/// Where the masks of a dataflow run come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSource {
    Diagonal {
        l: usize,
    },
    GlobalToken {
        l: usize,
        globals: usize,
        window: usize,
    },
    Random {
        l: usize,
        sparsity: f64,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
    /// Masks produced by a checkpoint's predictor on held-out samples.
    Trained {
        checkpoint: PathBuf,
        task: ToyTaskSpec,
        sparsity: f64,
        samples: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataflowCommand {
    pub masks: Vec<MaskSource>,
    pub bands: Vec<usize>,
    /// Seed for `random` sources when `--seed` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSparsityCommand {
    pub checkpoint: PathBuf,
    pub task: ToyTaskSpec,
    pub eval_samples: usize,
    pub seed: u64,
    /// Post-softmax thresholds; weights below θ are dropped.
    pub thetas: Vec<f64>,
    /// Largest tolerated accuracy drop when picking the reported threshold.
    #[serde(default = "one_point")]
    pub max_drop: f64,
}

fn one_point() -> f64 {
    0.01
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| config_err(format!("{origin}: {e}")))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

fn check_sparsity(s: f64, what: &str) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(config_err(format!("{what}: sparsity {s} not in [0, 1)")))
    }
}

impl TrainCommand {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.model_config(&self.task).validate()?;
        self.train.validate()?;
        if self.train.schedule == ScheduleKind::AdaptFinetune && self.init_checkpoint.is_none() {
            return Err(config_err("adapt-finetune needs init_checkpoint"));
        }
        Ok(())
    }
}

impl SweepCommand {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.model_config(&self.task).validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.sigmas.is_empty() || self.bits.is_empty() || self.sparsities.is_empty() || self.seeds.is_empty() {
            return Err(config_err("sweep grid axes must be non-empty"));
        }
        for &s in &self.sparsities {
            check_sparsity(s, "sweep")?;
        }
        for &sigma in &self.sigmas {
            for &bits in &self.bits {
                let mut m = self.model.clone();
                m.sigma = sigma;
                m.pred_bits = bits;
                m.model_config(&self.task).validate()?;
            }
        }
        Ok(())
    }
}

impl CostCommand {
    pub fn resolved_shapes(&self) -> Result<Vec<NamedShape>> {
        let mut out = Vec::new();
        for name in &self.presets {
            let p = Preset::from_name(name).ok_or_else(|| config_err(format!("unknown preset {name:?}")))?;
            out.push(NamedShape {
                name: name.clone(),
                shape: p.shape(),
            });
        }
        out.extend(self.shapes.iter().cloned());
        if out.is_empty() {
            return Err(config_err("cost config lists no shapes"));
        }
        for s in &out {
            s.shape.validate()?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_shapes()?;
        if self.sparsities.is_empty() {
            return Err(config_err("cost config lists no sparsities"));
        }
        for &s in &self.sparsities {
            check_sparsity(s, "cost")?;
        }
        if let Some(t) = &self.energy_table {
            t.validate()?;
        }
        Ok(())
    }
}

impl DataflowCommand {
    pub fn validate(&self) -> Result<()> {
        if self.masks.is_empty() || self.bands.is_empty() {
            return Err(config_err("dataflow config needs masks and bands"));
        }
        if self.bands.contains(&0) {
            return Err(config_err("band height must be at least 1"));
        }
        for m in &self.masks {
            match m {
                MaskSource::Random { sparsity, .. } | MaskSource::Trained { sparsity, .. } => {
                    check_sparsity(*sparsity, "dataflow")?
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl OracleSparsityCommand {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.thetas.is_empty() || self.thetas.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(config_err("thetas must be a non-empty list of finite values >= 0"));
        }
        if self.eval_samples == 0 {
            return Err(config_err("eval_samples must be positive"));
        }
        Ok(())
    }
}

/// Desk-scale toy task and model.
pub fn desk_task() -> ToyTaskSpec {
    ToyTaskSpec::new(128)
}

pub fn desk_model() -> ModelShape {
    ModelShape {
        d: 64,
        heads: 2,
        layers: 2,
        ffn: 128,
        sigma: 0.5,
        pred_bits: 4,
        share_projection: false,
        scale: true,
    }
}

/// Dense pretraining recipe used by the desk presets and acceptance runs.
pub fn desk_pretrain(seed: u64) -> TrainConfig {
    let mut t = TrainConfig::new(ScheduleKind::DensePretrain, seed);
    t.dense_steps = DESK_DENSE_STEPS;
    t.sparse_steps = 0;
    t.lr = DESK_DENSE_LR;
    t.batch_size = DESK_BATCH;
    t
}

/// Adaptation recipe at 90% sparsity with the given mask policy.
pub fn desk_finetune(seed: u64, policy: MaskPolicy) -> TrainConfig {
    let mut t = TrainConfig::new(ScheduleKind::AdaptFinetune, seed);
    t.dense_steps = 0;
    t.sparse_steps = DESK_SPARSE_STEPS;
    t.sparsity = 0.9;
    t.lr = DESK_SPARSE_LR;
    t.predictor_lr = Some(DESK_PREDICTOR_LR);
    t.batch_size = DESK_BATCH;
    t.policy = policy;
    t
}

pub const DESK_DENSE_STEPS: usize = 600;
pub const DESK_SPARSE_STEPS: usize = 150;
pub const DESK_DENSE_LR: f64 = 3e-3;
pub const DESK_SPARSE_LR: f64 = 3e-3;
pub const DESK_PREDICTOR_LR: f64 = 5e-2;
pub const DESK_BATCH: usize = 16;
