//! CSV emission and parsing. Floats are written with shortest round-trip
//! formatting so every file parses back to the in-memory values.

use std::fmt::Write as _;

use super::metrics::{EntropyBin, GeneralizationReport, RunReport, ShiftMatrix, ShiftTable};
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        path: "<csv>".into(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

fn field_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: "<csv>".into(),
        line,
        message: message.into(),
    }
}

fn write_rows(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

fn read_rows(text: &str) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn num(line: usize, s: &str) -> Result<f64> {
    s.parse().map_err(|_| field_err(line, format!("`{s}` is not a number")))
}

fn opt_num(line: usize, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        num(line, s).map(Some)
    }
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One results-table row: per-domain errors in stream order, then Mean and Gain.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub errors: Vec<(String, f64)>,
    pub mean: f64,
    pub gain: Option<f64>,
}

impl From<&RunReport> for TableRow {
    fn from(r: &RunReport) -> Self {
        TableRow {
            method: r.method.clone(),
            errors: r.per_domain_error.iter().map(|d| (d.domain.clone(), d.error)).collect(),
            mean: r.mean_error,
            gain: r.gain_vs_baseline,
        }
    }
}

pub fn table_csv(rows: &[TableRow]) -> Result<String> {
    let Some(first) = rows.first() else {
        return Err(Error::config("table needs at least one row"));
    };
    let names: Vec<&String> = first.errors.iter().map(|(n, _)| n).collect();
    let mut out = vec![std::iter::once("method".to_string())
        .chain(names.iter().map(|n| n.to_string()))
        .chain(["Mean".into(), "Gain".into()])
        .collect::<Vec<_>>()];
    for r in rows {
        if r.errors.len() != names.len() || r.errors.iter().zip(&names).any(|((a, _), b)| a != *b) {
            return Err(Error::config(format!("row `{}` has a different domain list", r.method)));
        }
        let mut rec = vec![r.method.clone()];
        rec.extend(r.errors.iter().map(|(_, e)| e.to_string()));
        rec.push(r.mean.to_string());
        rec.push(opt_str(r.gain));
        out.push(rec);
    }
    Ok(write_rows(out))
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let (header, rows) = read_rows(text)?;
    if header.len() < 3 || header[0] != "method" || header[header.len() - 2] != "Mean" || header[header.len() - 1] != "Gain"
    {
        return Err(field_err(1, "header must be `method,<domains...>,Mean,Gain`"));
    }
    let names = &header[1..header.len() - 2];
    rows.into_iter()
        .map(|(line, rec)| {
            let errors = names
                .iter()
                .zip(&rec[1..rec.len() - 2])
                .map(|(n, v)| Ok((n.clone(), num(line, v)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(TableRow {
                method: rec[0].clone(),
                errors,
                mean: num(line, &rec[rec.len() - 2])?,
                gain: opt_num(line, &rec[rec.len() - 1])?,
            })
        })
        .collect()
}

const SHIFT_HEADER: [&str; 5] = [
    "domain",
    "correct_to_correct",
    "correct_to_incorrect",
    "incorrect_to_correct",
    "incorrect_to_incorrect",
];

pub const TOTAL_ROW: &str = "Total";

pub fn shifts_csv(t: &ShiftTable) -> String {
    let mut rows = vec![SHIFT_HEADER.map(String::from).to_vec()];
    let row = |name: &str, m: &ShiftMatrix| {
        vec![
            name.to_string(),
            m.correct_to_correct.to_string(),
            m.correct_to_incorrect.to_string(),
            m.incorrect_to_correct.to_string(),
            m.incorrect_to_incorrect.to_string(),
        ]
    };
    for (name, m) in &t.per_domain {
        rows.push(row(name, m));
    }
    rows.push(row(TOTAL_ROW, &t.total));
    write_rows(rows)
}

pub fn parse_shifts_csv(text: &str) -> Result<ShiftTable> {
    let (header, rows) = read_rows(text)?;
    if header != SHIFT_HEADER {
        return Err(field_err(1, "unexpected shift table header"));
    }
    let mut t = ShiftTable::default();
    let mut saw_total = false;
    for (line, rec) in rows {
        let n = |i: usize| -> Result<u64> {
            rec[i]
                .parse()
                .map_err(|_| field_err(line, format!("`{}` is not a count", rec[i])))
        };
        let m = ShiftMatrix {
            correct_to_correct: n(1)?,
            correct_to_incorrect: n(2)?,
            incorrect_to_correct: n(3)?,
            incorrect_to_incorrect: n(4)?,
        };
        if rec[0] == TOTAL_ROW {
            t.total = m;
            saw_total = true;
        } else {
            t.per_domain.push((rec[0].clone(), m));
        }
    }
    if !saw_total {
        return Err(field_err(0, "missing Total row"));
    }
    Ok(t)
}

const ENTROPY_HEADER: [&str; 5] = ["bin", "lo", "hi", "count", "error_rate"];

pub fn entropy_profile_csv(bins: &[EntropyBin]) -> String {
    let mut rows = vec![ENTROPY_HEADER.map(String::from).to_vec()];
    for (i, b) in bins.iter().enumerate() {
        rows.push(vec![
            i.to_string(),
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            opt_str(b.error_rate),
        ]);
    }
    write_rows(rows)
}

pub fn parse_entropy_profile_csv(text: &str) -> Result<Vec<EntropyBin>> {
    let (header, rows) = read_rows(text)?;
    if header != ENTROPY_HEADER {
        return Err(field_err(1, "unexpected entropy profile header"));
    }
    rows.into_iter()
        .map(|(line, rec)| {
            Ok(EntropyBin {
                lo: num(line, &rec[1])?,
                hi: num(line, &rec[2])?,
                count: rec[3]
                    .parse()
                    .map_err(|_| field_err(line, format!("`{}` is not a count", rec[3])))?,
                error_rate: opt_num(line, &rec[4])?,
            })
        })
        .collect()
}

/// `(grid, value, mean_error)` rows. `None` marks a cell that does not
/// apply to the suite (written as an empty field).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledError {
    pub group: String,
    pub label: String,
    pub mean_error: Option<f64>,
}

pub fn labeled_csv(first_col: &str, second_col: &str, rows: &[LabeledError]) -> String {
    let mut out = vec![vec![first_col.to_string(), second_col.to_string(), "mean_error".to_string()]];
    for r in rows {
        out.push(vec![r.group.clone(), r.label.clone(), opt_str(r.mean_error)]);
    }
    write_rows(out)
}

pub fn parse_labeled_csv(text: &str) -> Result<Vec<LabeledError>> {
    let (header, rows) = read_rows(text)?;
    if header.len() != 3 || header[2] != "mean_error" {
        return Err(field_err(1, "expected three columns ending in mean_error"));
    }
    rows.into_iter()
        .map(|(line, rec)| {
            Ok(LabeledError {
                group: rec[0].clone(),
                label: rec[1].clone(),
                mean_error: opt_num(line, &rec[2])?,
            })
        })
        .collect()
}

/// Unseen-domain errors followed by their mean.
pub fn generalization_csv(method: &str, r: &GeneralizationReport) -> Result<String> {
    table_csv(&[TableRow {
        method: method.to_string(),
        errors: r.unseen_error.iter().map(|d| (d.domain.clone(), d.error)).collect(),
        mean: r.unseen_mean,
        gain: None,
    }])
}

/// Fixed-width text table with values rounded to 0.1.
pub fn format_table(rows: &[TableRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "method");
    for (name, _) in &first.errors {
        let short: String = name.chars().take(8).collect();
        let _ = write!(out, " {short:>8}");
    }
    out.push_str("     Mean     Gain\n");
    for r in rows {
        let _ = write!(out, "{:<width$}", r.method);
        for (_, e) in &r.errors {
            let _ = write!(out, " {e:>8.1}");
        }
        let _ = write!(out, " {:>8.1}", r.mean);
        match r.gain {
            Some(g) => {
                let _ = writeln!(out, " {g:>+8.1}");
            }
            None => {
                let _ = writeln!(out, " {:>8}", "-");
            }
        }
    }
    out
}
