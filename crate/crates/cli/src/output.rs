//! Learning curves and the files a run leaves behind.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

/// One row per outer iteration, starting with the initial parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub iter: usize,
    pub j: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    /// Cumulative rollout steps drawn so far.
    pub steps: usize,
    /// Standard error of `j` when it is a batch estimate.
    pub j_stderr: Option<f64>,
}

/// Invariant: iterations strictly increase, and either every row carries a
/// standard error or none does.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    rows: Vec<CurveRow>,
}

impl LearningCurve {
    pub fn push(&mut self, row: CurveRow) -> Result<(), CliError> {
        if let Some(last) = self.rows.last() {
            if row.iter <= last.iter {
                return Err(CliError::Internal(format!("curve row {} after {}", row.iter, last.iter)));
            }
            if row.j_stderr.is_some() != last.j_stderr.is_some() {
                return Err(CliError::Internal("curve mixes exact and estimated objective values".into()));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[CurveRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&CurveRow> {
        self.rows.last()
    }

    pub fn is_estimated(&self) -> bool {
        self.rows.first().is_some_and(|r| r.j_stderr.is_some())
    }

    /// `iter,J,grad_norm,wall_ms,steps` plus `J_stderr` for estimated curves.
    pub fn to_csv(&self) -> String {
        let estimated = self.is_estimated();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["iter", "J", "grad_norm", "wall_ms", "steps"];
        if estimated {
            header.push("J_stderr");
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec =
                vec![r.iter.to_string(), r.j.to_string(), r.grad_norm.to_string(), r.wall_ms.to_string(), r.steps.to_string()];
            if let Some(se) = r.j_stderr {
                rec.push(se.to_string());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
    }
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iter: usize, j_stderr: Option<f64>) -> CurveRow {
        CurveRow { iter, j: 1.5, grad_norm: 0.25, wall_ms: 0, steps: 10 * iter, j_stderr }
    }

    #[test]
    fn iterations_must_increase() {
        let mut c = LearningCurve::default();
        c.push(row(0, None)).unwrap();
        c.push(row(1, None)).unwrap();
        assert!(c.push(row(1, None)).is_err());
    }

    #[test]
    fn estimated_curves_gain_a_stderr_column() {
        let mut c = LearningCurve::default();
        c.push(row(0, Some(0.1))).unwrap();
        assert!(c.push(row(1, None)).is_err());
        assert_eq!(c.to_csv(), "iter,J,grad_norm,wall_ms,steps,J_stderr\n0,1.5,0.25,0,0,0.1\n");
    }

    #[test]
    fn exact_curve_header() {
        let mut c = LearningCurve::default();
        c.push(row(0, None)).unwrap();
        assert!(c.to_csv().starts_with("iter,J,grad_norm,wall_ms,steps\n"));
    }
}
