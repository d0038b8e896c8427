use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tables::LabeledError;
use crate::engine::{Method, RunConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridCell {
    Kn(usize, usize),
    LambdaKd(f64),
    LambdaMl(f64),
}

impl GridCell {
    pub fn group(&self) -> &'static str {
        match self {
            GridCell::Kn(..) => "kn",
            GridCell::LambdaKd(_) => "lambda_kd",
            GridCell::LambdaMl(_) => "lambda_ml",
        }
    }

    pub fn label(&self) -> String {
        match *self {
            GridCell::Kn(k, n) => format!("[{k},{n}]"),
            GridCell::LambdaKd(v) | GridCell::LambdaMl(v) => v.to_string(),
        }
    }

    /// `base` with this cell's hyperparameter substituted.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.method.method = Method::Aws;
        match *self {
            GridCell::Kn(k, n) => {
                cfg.method.k = k;
                cfg.method.n = n;
            }
            GridCell::LambdaKd(v) => cfg.method.weights.lambda_kd = v,
            GridCell::LambdaMl(v) => cfg.method.weights.lambda_ml = v,
        }
        cfg
    }
}

pub const KN_GRID: [(usize, usize); 5] = [(1, 2), (1, 3), (1, 5), (3, 10), (5, 20)];
pub const LAMBDA_KD_GRID: [f64; 5] = [0.0, 0.01, 0.02, 0.03, 0.04];
pub const LAMBDA_ML_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

/// Named grids: `kn`, `lkd`, `lml` or all three as `paper-all`.
pub fn grid_preset(name: &str) -> Result<Vec<GridCell>> {
    let kn = || KN_GRID.iter().map(|&(k, n)| GridCell::Kn(k, n));
    let kd = || LAMBDA_KD_GRID.iter().map(|&v| GridCell::LambdaKd(v));
    let ml = || LAMBDA_ML_GRID.iter().map(|&v| GridCell::LambdaMl(v));
    Ok(match name {
        "kn" => kn().collect(),
        "lkd" => kd().collect(),
        "lml" => ml().collect(),
        "paper-all" => kn().chain(kd()).chain(ml()).collect(),
        other => return Err(Error::config(format!("unknown grid `{other}` (kn, lkd, lml, paper-all)"))),
    })
}

/// Evaluates every cell from fresh state. Cells may run concurrently; rows
/// come back in grid order. A cell whose config is invalid for `classes`
/// (a `[k,n]` pair with `n > classes`) keeps its row with no value.
pub fn sweep<F>(cells: &[GridCell], base: &RunConfig, classes: usize, eval: F) -> Result<Vec<LabeledError>>
where
    F: Fn(&RunConfig) -> Result<f64> + Sync,
{
    if cells.is_empty() {
        return Err(Error::config("empty grid"));
    }
    cells
        .par_iter()
        .map(|cell| {
            let cfg = cell.apply(base);
            let mean_error = match cfg.validate(classes) {
                Ok(()) => Some(eval(&cfg)?),
                Err(_) => None,
            };
            Ok(LabeledError {
                group: cell.group().to_string(),
                label: cell.label(),
                mean_error,
            })
        })
        .collect()
}

/// Labels of cells that `sweep` would leave empty for `classes`.
pub fn inapplicable_cells(cells: &[GridCell], base: &RunConfig, classes: usize) -> Vec<String> {
    cells
        .iter()
        .filter(|c| c.apply(base).validate(classes).is_err())
        .map(GridCell::label)
        .collect()
}

/// `(label, cl, kd, ml)` for each component ablation row.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 7] = [
    ("baseline", false, false, false),
    ("CL", true, false, false),
    ("ML", false, false, true),
    ("KD+ML", false, true, true),
    ("CL+KD", true, true, false),
    ("CL+ML", true, false, true),
    ("CL+KD+ML", true, true, true),
];

pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    ABLATION_ROWS
        .iter()
        .map(|&(label, cl, kd, ml)| {
            let mut cfg = base.clone();
            cfg.method.method = Method::Aws;
            cfg.method.weights.enable_cl = cl;
            cfg.method.weights.enable_kd = kd;
            cfg.method.weights.enable_ml = ml;
            (label, cfg)
        })
        .collect()
}

/// Component ablation; the all-off row is equivalent to no adaptation.
pub fn ablation<F>(base: &RunConfig, eval: F) -> Result<Vec<LabeledError>>
where
    F: Fn(&RunConfig) -> Result<f64> + Sync,
{
    ablation_configs(base)
        .par_iter()
        .map(|(label, cfg)| {
            Ok(LabeledError {
                group: "ablation".to_string(),
                label: label.to_string(),
                mean_error: Some(eval(cfg)?),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_labels() {
        let labels: Vec<String> = grid_preset("paper-all").unwrap().iter().map(GridCell::label).collect();
        assert_eq!(
            labels,
            [
                "[1,2]", "[1,3]", "[1,5]", "[3,10]", "[5,20]", "0", "0.01", "0.02", "0.03", "0.04", "0", "0.1", "0.2",
                "0.3", "0.4"
            ]
        );
        assert!(grid_preset("bogus").is_err());
    }

    #[test]
    fn single_cell_and_order() {
        let base = RunConfig::default();
        let rows = sweep(&[GridCell::LambdaKd(0.02)], &base, 10, |c| Ok(c.method.weights.lambda_kd)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_error, Some(0.02));
        let cells = grid_preset("lml").unwrap();
        let rows = sweep(&cells, &base, 10, |c| Ok(c.method.weights.lambda_ml)).unwrap();
        assert_eq!(rows.iter().map(|r| r.mean_error.unwrap()).collect::<Vec<_>>(), LAMBDA_ML_GRID);
    }

    #[test]
    fn oversized_kn_cells_stay_empty() {
        let cells = grid_preset("kn").unwrap();
        let rows = sweep(&cells, &RunConfig::default(), 10, |c| Ok(c.method.n as f64)).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[4].mean_error, None);
        assert_eq!(rows[3].mean_error, Some(10.0));
        assert_eq!(inapplicable_cells(&cells, &RunConfig::default(), 10), ["[5,20]"]);
    }

    #[test]
    fn ablation_rows() {
        let cfgs = ablation_configs(&RunConfig::default());
        assert_eq!(cfgs.len(), 7);
        let w = &cfgs[0].1.method.weights;
        assert!(!w.uses_cl() && !w.uses_kd() && !w.uses_ml());
        let w = &cfgs[6].1.method.weights;
        assert!(w.uses_cl() && w.uses_kd() && w.uses_ml());
    }
}
