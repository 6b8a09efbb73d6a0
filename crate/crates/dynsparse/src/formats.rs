//! Plain-text containers for matrices, masks, sparse score/weight payloads
//! and model checkpoints.
//!
//! Every format starts with a magic line and is line oriented. Reals are
//! written with Rust's shortest round-trip formatting, so reading a file back
//! reproduces the exact values, and writing the same data twice produces the
//! same bytes.
//!
//! ```text
//! DSAMAT v1
//! 2 3 standard
//! 1 2 3
//! 4 5 6
//! ```
//!
//! ```text
//! DSAMASK v1
//! 4 balanced 2        (or: 4 ragged)
//! 0 3
//! 1 2
//! ...                 (one line per row; an empty line is an empty row)
//! ```
//!
//! `DSASCORES v1` and `DSAWEIGHTS v1` repeat the mask body and append a
//! `values` line followed by one line of values per row. Weights carry one
//! more line, `empty`, listing flagged row indices.
//!
//! A checkpoint (`DSACKPT v1`) holds one JSON line with the model
//! configuration, then `param NAME` and `projection LAYER INDEX SEED` headers,
//! each followed by an embedded `DSAMAT v1` block.

use std::fmt::Write as _;
use std::str::Lines;

use dynsparse_core::linalg::{Matrix, Precision};
use dynsparse_core::predictor::ProjectionMatrix;
use dynsparse_core::sparse::{SparseScores, SparseWeights};
use dynsparse_core::training::{ModelConfig, ToyModel};
use dynsparse_core::SparseMask;

use crate::error::{CliError, Result};

fn bad(what: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Format(format!("{what}: {detail}"))
}

fn next_line<'a>(lines: &mut Lines<'a>, what: &str) -> Result<&'a str> {
    lines.next().ok_or_else(|| bad(what, "unexpected end of input"))
}

fn expect_magic(lines: &mut Lines<'_>, magic: &str) -> Result<()> {
    let got = next_line(lines, magic)?;
    if got.trim_end() != magic {
        return Err(bad(magic, format!("expected header {magic:?}, found {got:?}")));
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| bad(what, format!("cannot parse {s:?}")))
}

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for (i, v) in items.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
    out
}

pub fn write_matrix(m: &Matrix) -> String {
    let precision = match m.precision() {
        Precision::Standard => "standard",
        Precision::High => "high",
    };
    let mut out = format!("DSAMAT v1\n{} {} {precision}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        out.push_str(&join(m.row(r)));
        out.push('\n');
    }
    out
}

fn read_matrix_lines(lines: &mut Lines<'_>) -> Result<Matrix> {
    const WHAT: &str = "DSAMAT";
    expect_magic(lines, "DSAMAT v1")?;
    let header: Vec<&str> = next_line(lines, WHAT)?.split_whitespace().collect();
    let [rows, cols, precision] = header[..] else {
        return Err(bad(WHAT, "header must be `rows cols precision`"));
    };
    let (rows, cols): (usize, usize) = (parse_num(rows, WHAT)?, parse_num(cols, WHAT)?);
    let precision = match precision {
        "standard" => Precision::Standard,
        "high" => Precision::High,
        other => return Err(bad(WHAT, format!("unknown precision {other:?}"))),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = next_line(lines, WHAT)?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| parse_num(v, WHAT))
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(bad(WHAT, format!("row {r} has {} values, expected {cols}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(bad(WHAT, format!("row {r} contains a non-finite value")));
        }
        data.extend(row);
    }
    Ok(Matrix::from_vec_with(rows, cols, data, precision)?)
}

pub fn read_matrix(text: &str) -> Result<Matrix> {
    read_matrix_lines(&mut text.lines())
}

fn write_mask_body(mask: &SparseMask, out: &mut String) {
    match mask.balanced_count() {
        Some(k) => writeln!(out, "{} balanced {k}", mask.l()).unwrap(),
        None => writeln!(out, "{} ragged", mask.l()).unwrap(),
    }
    for row in mask.rows() {
        out.push_str(&join(row));
        out.push('\n');
    }
}

fn read_mask_body(lines: &mut Lines<'_>, what: &str) -> Result<SparseMask> {
    let header: Vec<&str> = next_line(lines, what)?.split_whitespace().collect();
    let (l, balanced) = match header[..] {
        [l, "balanced", k] => (parse_num::<usize>(l, what)?, Some(parse_num::<usize>(k, what)?)),
        [l, "ragged"] => (parse_num::<usize>(l, what)?, None),
        _ => return Err(bad(what, "header must be `l balanced k` or `l ragged`")),
    };
    let mut rows = Vec::with_capacity(l);
    for _ in 0..l {
        let line = next_line(lines, what)?;
        rows.push(
            line.split_whitespace()
                .map(|v| parse_num(v, what))
                .collect::<Result<Vec<usize>>>()?,
        );
    }
    let mask = SparseMask::from_rows(l, rows)?;
    if let Some(k) = balanced {
        if mask.balanced_count() != Some(k) {
            return Err(bad(what, format!("header says balanced {k} but rows disagree")));
        }
    }
    Ok(mask)
}

pub fn write_mask(mask: &SparseMask) -> String {
    let mut out = String::from("DSAMASK v1\n");
    write_mask_body(mask, &mut out);
    out
}

pub fn read_mask(text: &str) -> Result<SparseMask> {
    let mut lines = text.lines();
    expect_magic(&mut lines, "DSAMASK v1")?;
    read_mask_body(&mut lines, "DSAMASK")
}

fn write_values(mask: &SparseMask, values: &[f64], out: &mut String) {
    out.push_str("values\n");
    let ptr = mask.row_ptr();
    for i in 0..mask.l() {
        out.push_str(&join(&values[ptr[i]..ptr[i + 1]]));
        out.push('\n');
    }
}

fn read_values(lines: &mut Lines<'_>, mask: &SparseMask, what: &str) -> Result<Vec<f64>> {
    if next_line(lines, what)?.trim_end() != "values" {
        return Err(bad(what, "missing `values` section"));
    }
    let mut values = Vec::with_capacity(mask.nnz());
    for i in 0..mask.l() {
        let row: Vec<f64> = next_line(lines, what)?
            .split_whitespace()
            .map(|v| parse_num(v, what))
            .collect::<Result<_>>()?;
        if row.len() != mask.row_count(i) {
            return Err(bad(what, format!("row {i} has {} values for {} kept entries", row.len(), mask.row_count(i))));
        }
        values.extend(row);
    }
    Ok(values)
}

pub fn write_scores(s: &SparseScores) -> String {
    let mut out = String::from("DSASCORES v1\n");
    write_mask_body(&s.mask, &mut out);
    write_values(&s.mask, &s.values, &mut out);
    out
}

pub fn read_scores(text: &str) -> Result<SparseScores> {
    let mut lines = text.lines();
    expect_magic(&mut lines, "DSASCORES v1")?;
    let mask = read_mask_body(&mut lines, "DSASCORES")?;
    let values = read_values(&mut lines, &mask, "DSASCORES")?;
    Ok(SparseScores { mask, values })
}

pub fn write_weights(w: &SparseWeights) -> String {
    let mut out = String::from("DSAWEIGHTS v1\n");
    write_mask_body(&w.mask, &mut out);
    write_values(&w.mask, &w.values, &mut out);
    let empty = w.empty_rows.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i);
    writeln!(out, "empty {}", join(empty)).unwrap();
    out
}

pub fn read_weights(text: &str) -> Result<SparseWeights> {
    const WHAT: &str = "DSAWEIGHTS";
    let mut lines = text.lines();
    expect_magic(&mut lines, "DSAWEIGHTS v1")?;
    let mask = read_mask_body(&mut lines, WHAT)?;
    let values = read_values(&mut lines, &mask, WHAT)?;
    let line = next_line(&mut lines, WHAT)?;
    let rest = line
        .strip_prefix("empty")
        .ok_or_else(|| bad(WHAT, "missing `empty` line"))?;
    let mut empty_rows = vec![false; mask.l()];
    for idx in rest.split_whitespace() {
        let i: usize = parse_num(idx, WHAT)?;
        *empty_rows
            .get_mut(i)
            .ok_or_else(|| bad(WHAT, format!("empty row {i} out of range")))? = true;
    }
    Ok(SparseWeights {
        mask,
        values,
        empty_rows,
    })
}

pub fn write_checkpoint(model: &ToyModel) -> String {
    let mut out = String::from("DSACKPT v1\n");
    out.push_str(&serde_json::to_string(model.config()).expect("config serializes"));
    out.push('\n');
    for p in model.params() {
        writeln!(out, "param {}", p.name).unwrap();
        out.push_str(&write_matrix(&p.value));
    }
    for (li, layer) in model.projections().iter().enumerate() {
        for (pi, proj) in layer.iter().enumerate() {
            writeln!(out, "projection {li} {pi} {}", proj.seed()).unwrap();
            out.push_str(&write_matrix(proj.matrix()));
        }
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<ToyModel> {
    const WHAT: &str = "DSACKPT";
    let mut lines = text.lines();
    expect_magic(&mut lines, "DSACKPT v1")?;
    let config: ModelConfig = serde_json::from_str(next_line(&mut lines, WHAT)?)
        .map_err(|e| bad(WHAT, format!("config line: {e}")))?;
    let mut params = Vec::new();
    let mut projections: Vec<Vec<ProjectionMatrix>> = Vec::new();
    while let Some(line) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[..] {
            ["param", name] => params.push((name.to_string(), read_matrix_lines(&mut lines)?)),
            ["projection", layer, index, seed] => {
                let (layer, index): (usize, usize) = (parse_num(layer, WHAT)?, parse_num(index, WHAT)?);
                let seed: u64 = parse_num(seed, WHAT)?;
                let m = read_matrix_lines(&mut lines)?;
                if layer == projections.len() {
                    projections.push(Vec::new());
                }
                let slot = projections
                    .get_mut(layer)
                    .filter(|l| l.len() == index)
                    .ok_or_else(|| bad(WHAT, format!("projection {layer} {index} out of order")))?;
                slot.push(ProjectionMatrix::from_matrix(m, seed)?);
            }
            [] => {}
            _ => return Err(bad(WHAT, format!("unexpected line {line:?}"))),
        }
    }
    Ok(ToyModel::from_parts(config, params, projections)?)
}
