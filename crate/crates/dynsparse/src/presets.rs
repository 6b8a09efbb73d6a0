//! Named configurations shipped with the binary.

use dynsparse_core::training::{MaskPolicy, ScheduleKind, TrainConfig};

use crate::config::{
    desk_finetune, desk_model, desk_pretrain, desk_task, CostCommand, DataflowCommand, MaskSource, SweepCommand,
    TrainCommand, DESK_DENSE_STEPS, DESK_SPARSE_STEPS,
};

/// Preset names grouped by the subcommand that accepts them.
pub const PRESETS: &[(&str, &str)] = &[
    ("train", "train-desk"),
    ("train", "train-desk-two-phase"),
    ("sweep", "sweep-desk"),
    ("sweep", "sweep-desk-sigma"),
    ("cost", "cost-text"),
    ("cost", "cost-all"),
    ("dataflow", "dataflow-fixtures"),
];

pub fn names_for(command: &str) -> Vec<&'static str> {
    PRESETS.iter().filter(|(c, _)| *c == command).map(|(_, n)| *n).collect()
}

pub const COST_SPARSITIES: [f64; 6] = [0.5, 0.75, 0.8, 0.9, 0.95, 0.99];

pub fn train(name: &str, seed: u64) -> Option<TrainCommand> {
    let train = match name {
        "train-desk" => desk_pretrain(seed),
        "train-desk-two-phase" => {
            let mut t = TrainConfig::new(ScheduleKind::FromScratchTwoPhase, seed);
            t.dense_steps = DESK_DENSE_STEPS;
            t.sparse_steps = DESK_SPARSE_STEPS;
            let ft = desk_finetune(seed, MaskPolicy::Predicted);
            t.lr = ft.lr;
            t.predictor_lr = ft.predictor_lr;
            t.batch_size = ft.batch_size;
            t.sparsity = ft.sparsity;
            t
        }
        _ => return None,
    };
    Some(TrainCommand {
        task: desk_task(),
        model: desk_model(),
        train,
        init_checkpoint: None,
    })
}

pub fn sweep(name: &str, seed: Option<u64>) -> Option<SweepCommand> {
    let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| vec![1, 2, 3]);
    let (sigmas, random_control, local_control) = match name {
        "sweep-desk" => (vec![desk_model().sigma], true, true),
        "sweep-desk-sigma" => (vec![0.125, 0.25, 0.5], false, false),
        _ => return None,
    };
    Some(SweepCommand {
        task: desk_task(),
        model: desk_model(),
        pretrain: desk_pretrain(0),
        finetune: desk_finetune(0, MaskPolicy::Predicted),
        init_checkpoint: None,
        sigmas,
        bits: vec![desk_model().pred_bits],
        sparsities: vec![0.9],
        seeds,
        random_control,
        local_control,
    })
}

pub fn cost(name: &str) -> Option<CostCommand> {
    let presets: Vec<String> = match name {
        "cost-text" => vec!["text".into()],
        "cost-all" => ["text", "text-4k", "retrieval", "image", "desk"].iter().map(|s| s.to_string()).collect(),
        _ => return None,
    };
    Some(CostCommand {
        presets,
        shapes: Vec::new(),
        sparsities: COST_SPARSITIES.to_vec(),
        energy_table: None,
    })
}

pub fn dataflow(name: &str, seed: Option<u64>) -> Option<DataflowCommand> {
    if name != "dataflow-fixtures" {
        return None;
    }
    Some(DataflowCommand {
        masks: vec![
            MaskSource::Diagonal { l: 64 },
            MaskSource::GlobalToken {
                l: 64,
                globals: 4,
                window: 4,
            },
            MaskSource::Random {
                l: 64,
                sparsity: 0.9,
                seed: 1,
            },
        ],
        bands: vec![1, 2, 4, 8, 16],
        seed,
    })
}
