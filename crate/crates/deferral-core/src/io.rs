//! Dataset file format: delimited text with a header row.
//!
//! Columns: `x0..x{d-1}, a, r[, h][, p0][, cf0..cf{k-1}][, in_S]` where `p0`
//! is the logged propensity, `cf*` columns carry the counterfactual table,
//! and `in_S` marks the generator's oracle deterministic set (1 flags the
//! record; the complement of the logged action is implied for binary
//! actions). Missing optional columns mean "absent".

use std::path::Path;

use thiserror::Error;

use crate::dataset::{
    ActionSpace, BanditLog, BanditRecord, CounterfactualTable, DataError, FeatureVector,
};
use crate::estimators::DeterministicSupportMask;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("empty file")]
    Empty,
    #[error("header names no feature columns")]
    NoFeatures,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    File(#[from] std::io::Error),
}

/// A dataset as stored on disk: the log plus optional counterfactuals and
/// oracle mask.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub log: BanditLog,
    pub counterfactuals: Option<CounterfactualTable>,
    pub oracle_mask: Option<DeterministicSupportMask>,
}

/// Serialize a dataset to the delimited text format.
pub fn to_text(
    log: &BanditLog,
    counterfactuals: Option<&CounterfactualTable>,
    oracle_mask: Option<&DeterministicSupportMask>,
) -> String {
    let d = log.dim;
    let k = log.num_actions();
    let has_h = log.records.iter().any(|r| r.human.is_some());
    let has_p = log.records.iter().any(|r| r.logged_propensity.is_some());

    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("a".into());
    header.push("r".into());
    if has_h {
        header.push("h".into());
    }
    if has_p {
        header.push("p0".into());
    }
    if counterfactuals.is_some() {
        for a in 0..k {
            header.push(format!("cf{a}"));
        }
    }
    if oracle_mask.is_some() {
        header.push("in_S".into());
    }

    let mut out = header.join(",");
    out.push('\n');
    for (i, rec) in log.records.iter().enumerate() {
        let mut fields: Vec<String> = rec
            .features
            .as_slice()
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        fields.push(rec.action.to_string());
        fields.push(format!("{:?}", rec.reward));
        if has_h {
            fields.push(rec.human.map_or(String::new(), |h| h.to_string()));
        }
        if has_p {
            fields.push(
                rec.logged_propensity
                    .map_or(String::new(), |p| format!("{p:?}")),
            );
        }
        if let Some(table) = counterfactuals {
            for a in 0..k {
                fields.push(format!("{:?}", table.reward(i, a)));
            }
        }
        if let Some(mask) = oracle_mask {
            fields.push(if mask.in_s(i) { "1".into() } else { "0".into() });
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Parse the delimited text format. The action count is inferred from the
/// `cf*` columns when present, otherwise from the maximum logged action.
pub fn from_text(text: &str) -> Result<DatasetFile, IoError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(IoError::Empty)?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut x_cols = Vec::new();
    let mut a_col = None;
    let mut r_col = None;
    let mut h_col = None;
    let mut p_col = None;
    let mut cf_cols = Vec::new();
    let mut mask_col = None;
    for (idx, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix('x') {
            if rest.parse::<usize>().is_ok() {
                x_cols.push(idx);
                continue;
            }
        }
        if let Some(rest) = name.strip_prefix("cf") {
            if rest.parse::<usize>().is_ok() {
                cf_cols.push(idx);
                continue;
            }
        }
        match *name {
            "a" => a_col = Some(idx),
            "r" => r_col = Some(idx),
            "h" => h_col = Some(idx),
            "p0" => p_col = Some(idx),
            "in_S" => mask_col = Some(idx),
            other => {
                return Err(IoError::Malformed {
                    line: 1,
                    reason: format!("unknown column: {other}"),
                })
            }
        }
    }
    if x_cols.is_empty() {
        return Err(IoError::NoFeatures);
    }
    let a_col = a_col.ok_or(IoError::Malformed {
        line: 1,
        reason: "missing action column 'a'".into(),
    })?;
    let r_col = r_col.ok_or(IoError::Malformed {
        line: 1,
        reason: "missing reward column 'r'".into(),
    })?;

    let mut records = Vec::new();
    let mut cf_rows: Vec<Vec<f64>> = Vec::new();
    let mut complements: Vec<Option<usize>> = Vec::new();
    let mut max_action = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(IoError::Malformed {
                line: lineno + 1,
                reason: format!("expected {} fields, got {}", names.len(), fields.len()),
            });
        }
        let parse_f = |idx: usize| -> Result<f64, IoError> {
            fields[idx].parse().map_err(|_| IoError::Malformed {
                line: lineno + 1,
                reason: format!("bad number: {}", fields[idx]),
            })
        };
        let features: Result<Vec<f64>, IoError> = x_cols.iter().map(|&c| parse_f(c)).collect();
        let action: usize = fields[a_col].parse().map_err(|_| IoError::Malformed {
            line: lineno + 1,
            reason: format!("bad action: {}", fields[a_col]),
        })?;
        max_action = max_action.max(action);
        let reward = parse_f(r_col)?;
        let mut rec = BanditRecord::new(FeatureVector::new(features?)?, action, reward);
        if let Some(c) = h_col {
            if !fields[c].is_empty() {
                let h: usize = fields[c].parse().map_err(|_| IoError::Malformed {
                    line: lineno + 1,
                    reason: format!("bad human id: {}", fields[c]),
                })?;
                rec = rec.with_human(h);
            }
        }
        if let Some(c) = p_col {
            if !fields[c].is_empty() {
                rec = rec.with_propensity(parse_f(c)?);
            }
        }
        if !cf_cols.is_empty() {
            let row: Result<Vec<f64>, IoError> = cf_cols.iter().map(|&c| parse_f(c)).collect();
            cf_rows.push(row?);
        }
        if let Some(c) = mask_col {
            let flagged = fields[c] == "1";
            complements.push(if flagged { Some(1 - action) } else { None });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(IoError::Empty);
    }

    let k = if cf_cols.is_empty() {
        (max_action + 1).max(2)
    } else {
        cf_cols.len()
    };
    let num_humans = records
        .iter()
        .filter_map(|r| r.human)
        .max()
        .map_or(1, |h| h + 1);
    let dim = x_cols.len();
    let log = BanditLog::new(records, ActionSpace::new(k)?, dim, num_humans)?;
    let counterfactuals = if cf_rows.is_empty() {
        None
    } else {
        Some(CounterfactualTable::new(cf_rows, k)?)
    };
    let oracle_mask = if complements.is_empty() {
        None
    } else {
        Some(DeterministicSupportMask::from_complements(complements))
    };
    Ok(DatasetFile {
        log,
        counterfactuals,
        oracle_mask,
    })
}

pub fn write_file(
    path: &Path,
    log: &BanditLog,
    counterfactuals: Option<&CounterfactualTable>,
    oracle_mask: Option<&DeterministicSupportMask>,
) -> Result<(), IoError> {
    std::fs::write(path, to_text(log, counterfactuals, oracle_mask))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<DatasetFile, IoError> {
    from_text(&std::fs::read_to_string(path)?)
}
