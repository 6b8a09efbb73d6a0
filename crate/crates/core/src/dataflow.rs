//! Second-operand memory-access counts for sparse attention on a row-parallel
//! PE array.
//!
//! Each PE owns one attention row. For SDDMM the second operand is a column
//! of `Kᵀ`; for SpMM it is a row of `V`. Both are indexed by the kept column
//! `j`, so the same counting applies to both stages.
//!
//! Buffering model: one broadcast operand is live at a time and nothing is
//! cached across steps.
//!
//! - `RowByRow`: rows are processed one after another; every kept entry
//!   fetches its own operand.
//! - `RowParallel`: a band of rows runs in lock step, each PE taking its
//!   kept columns in ascending order. At step `t` the distinct columns
//!   requested by the band are fetched once each. Two PEs only share a fetch
//!   when they need the same column at the same step.
//! - `RowParallelReordered`: PEs may consume their columns in any order, so
//!   the band broadcasts each column of its union exactly once.
//!
//! `pe_idle_steps` counts load imbalance: within a band, every row shorter
//! than the longest row leaves its PE idle for the difference.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::maskgen::SparseMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    RowByRow,
    RowParallel,
    RowParallelReordered,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [
        ScheduleKind::RowByRow,
        ScheduleKind::RowParallel,
        ScheduleKind::RowParallelReordered,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Parallel PEs, i.e. rows per band.
    pub band: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, band: usize) -> Result<Self> {
        if band == 0 {
            return Err(param_err("Schedule", "band height must be at least 1"));
        }
        Ok(Schedule { kind, band })
    }
}

/// Counts for one band of rows.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BandTrace {
    pub first_row: usize,
    pub rows: usize,
    pub fetches: u64,
    pub steps: u64,
    pub idle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AccessTrace {
    pub schedule: Schedule,
    pub nnz: u64,
    pub operand_fetches: u64,
    pub broadcast_steps: u64,
    pub pe_idle_steps: u64,
    pub bands: Vec<BandTrace>,
}

/// Order in which each row of a band consumes its kept columns.
fn consumption_order(mask: &SparseMask, first: usize, end: usize, kind: ScheduleKind) -> Vec<Vec<usize>> {
    match kind {
        ScheduleKind::RowByRow | ScheduleKind::RowParallel => {
            (first..end).map(|i| mask.row(i).to_vec()).collect()
        }
        ScheduleKind::RowParallelReordered => {
            // Walk the band's column union in ascending order; each row takes
            // a column when it is broadcast.
            let union: BTreeSet<usize> = (first..end).flat_map(|i| mask.row(i).iter().copied()).collect();
            (first..end)
                .map(|i| union.iter().copied().filter(|&j| mask.contains(i, j)).collect())
                .collect()
        }
    }
}

fn simulate_band(mask: &SparseMask, first: usize, end: usize, kind: ScheduleKind) -> BandTrace {
    let counts: Vec<usize> = (first..end).map(|i| mask.row_count(i)).collect();
    let longest = counts.iter().copied().max().unwrap_or(0);
    let idle: u64 = counts.iter().map(|&c| (longest - c) as u64).sum();
    let (fetches, steps) = match kind {
        ScheduleKind::RowByRow => {
            let n: u64 = counts.iter().map(|&c| c as u64).sum();
            (n, n)
        }
        ScheduleKind::RowParallel => {
            let mut fetches = 0u64;
            let mut requested = BTreeSet::new();
            for t in 0..longest {
                requested.clear();
                requested.extend((first..end).filter_map(|i| mask.row(i).get(t).copied()));
                fetches += requested.len() as u64;
            }
            (fetches, longest as u64)
        }
        ScheduleKind::RowParallelReordered => {
            let union: BTreeSet<usize> = (first..end).flat_map(|i| mask.row(i).iter().copied()).collect();
            (union.len() as u64, union.len() as u64)
        }
    };
    BandTrace {
        first_row: first,
        rows: end - first,
        fetches,
        steps,
        idle: if kind == ScheduleKind::RowByRow { 0 } else { idle },
    }
}

/// Runs one schedule over a mask.
pub fn simulate(mask: &SparseMask, schedule: Schedule) -> AccessTrace {
    let band = match schedule.kind {
        ScheduleKind::RowByRow => 1,
        _ => schedule.band.max(1),
    };
    let l = mask.l();
    let mut bands = Vec::with_capacity(l.div_ceil(band));
    let mut first = 0;
    while first < l {
        let end = (first + band).min(l);
        bands.push(simulate_band(mask, first, end, schedule.kind));
        first = end;
    }
    AccessTrace {
        schedule,
        nnz: mask.nnz() as u64,
        operand_fetches: bands.iter().map(|b| b.fetches).sum(),
        broadcast_steps: bands.iter().map(|b| b.steps).sum(),
        pe_idle_steps: bands.iter().map(|b| b.idle).sum(),
        bands,
    }
}

/// `Σ_bands |union of kept columns in the band|`.
pub fn column_union_bound(mask: &SparseMask, band: usize) -> u64 {
    let band = band.max(1);
    (0..mask.l())
        .step_by(band)
        .map(|first| {
            let end = (first + band).min(mask.l());
            (first..end)
                .flat_map(|i| mask.row(i).iter().copied())
                .collect::<BTreeSet<_>>()
                .len() as u64
        })
        .sum()
}

/// Fetch counts of the three schedules and their reduction relative to
/// row-by-row processing.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReductionReport {
    pub band: usize,
    pub nnz: u64,
    pub row_by_row: u64,
    pub row_parallel: u64,
    pub row_parallel_reordered: u64,
    /// `nnz / fetches(row_parallel)`
    pub ratio_row_parallel: f64,
    /// `nnz / fetches(row_parallel_reordered)`
    pub ratio_reordered: f64,
}

pub fn reduction_report(mask: &SparseMask, band: usize) -> Result<ReductionReport> {
    let run = |kind| Schedule::new(kind, band).map(|s| simulate(mask, s).operand_fetches);
    let rbr = run(ScheduleKind::RowByRow)?;
    let par = run(ScheduleKind::RowParallel)?;
    let reo = run(ScheduleKind::RowParallelReordered)?;
    let ratio = |f: u64| if f == 0 { 1.0 } else { rbr as f64 / f as f64 };
    Ok(ReductionReport {
        band,
        nnz: mask.nnz() as u64,
        row_by_row: rbr,
        row_parallel: par,
        row_parallel_reordered: reo,
        ratio_row_parallel: ratio(par),
        ratio_reordered: ratio(reo),
    })
}

/// Both stages of the SDDMM → SpMM chain under one schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChainTrace {
    /// Fetches of `Kᵀ` columns.
    pub sddmm: AccessTrace,
    /// Fetches of `V` rows.
    pub spmm: AccessTrace,
    pub total_fetches: u64,
    /// Entries whose SpMM consumption position differs from the position in
    /// which SDDMM produced them; nonzero would require a permutation buffer
    /// between the stages.
    pub reshuffled_entries: u64,
}

/// Simulates the chain. Stage 2 consumes products in the order stage 1
/// produced them: product `(i, j)` needs row `j` of `V`, exactly the index of
/// the `Kᵀ` column that produced it.
pub fn chain_simulate(mask: &SparseMask, schedule: Schedule) -> ChainTrace {
    let sddmm = simulate(mask, schedule);
    let spmm = simulate(mask, schedule);
    let band = match schedule.kind {
        ScheduleKind::RowByRow => 1,
        _ => schedule.band.max(1),
    };
    let mut reshuffled = 0u64;
    let mut first = 0;
    while first < mask.l() {
        let end = (first + band).min(mask.l());
        let produced = consumption_order(mask, first, end, schedule.kind);
        // Stage 2 walks the same broadcast sequence over V rows.
        let consumed = consumption_order(mask, first, end, schedule.kind);
        for (p, c) in produced.iter().zip(&consumed) {
            reshuffled += p.iter().zip(c).filter(|(a, b)| a != b).count() as u64;
        }
        first = end;
    }
    ChainTrace {
        total_fetches: sddmm.operand_fetches + spmm.operand_fetches,
        sddmm,
        spmm,
        reshuffled_entries: reshuffled,
    }
}
