//! Per-iteration run records and the plot-data table.
//!
//! RunLog CSV column order:
//!
//! ```text
//! iteration, method, window_start, prompts, edges, nfe, cumulative_nfe,
//! reward_mean.<r>, reward_max.<r>, reward_standardized_mean.<r>   (per reward r)
//! edge_advantage_mean, edge_advantage_std, mean_ess,
//! loss, clip_fraction, grad_norm, steps_skipped,
//! eval.<r>                                                         (per reward r)
//! sample_seconds, update_seconds, wall_seconds
//! ```
//!
//! Optional fields are written as empty cells.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUNLOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Also the epoch: one iteration is one prompt batch.
    pub iteration: usize,
    pub window_start: Option<usize>,
    pub prompts: usize,
    pub edges: usize,
    pub nfe: u64,
    pub cumulative_nfe: u64,
    pub reward_mean: Vec<f64>,
    pub reward_max: Vec<f64>,
    pub reward_standardized_mean: Vec<f64>,
    pub edge_advantage_mean: f64,
    pub edge_advantage_std: f64,
    pub mean_ess: Option<f64>,
    pub loss: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub steps_skipped: usize,
    pub eval: Option<Vec<f64>>,
    pub sample_seconds: f64,
    pub update_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub reward_names: Vec<String>,
    /// Evaluation of the starting checkpoint.
    pub reward_base: Vec<f64>,
    pub reward_max: Vec<f64>,
    pub records: Vec<IterationRecord>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl RunLog {
    pub fn new(
        method: &str,
        task: &str,
        seed: u64,
        reward_names: Vec<String>,
        reward_base: Vec<f64>,
        reward_max: Vec<f64>,
    ) -> Self {
        Self {
            schema_version: RUNLOG_SCHEMA_VERSION,
            method: method.into(),
            task: task.into(),
            seed,
            reward_names,
            reward_base,
            reward_max,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: IterationRecord) -> Result<()> {
        let n = self.reward_names.len();
        if record.reward_mean.len() != n || record.eval.as_ref().is_some_and(|e| e.len() != n) {
            return Err(Error::Schema(format!(
                "record does not carry {n} reward columns"
            )));
        }
        if let Some(last) = self.records.last() {
            if record.iteration <= last.iteration {
                return Err(Error::Schema(
                    "records must be appended in iteration order".into(),
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "iteration",
            "method",
            "window_start",
            "prompts",
            "edges",
            "nfe",
            "cumulative_nfe",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for prefix in ["reward_mean", "reward_max", "reward_standardized_mean"] {
            h.extend(self.reward_names.iter().map(|r| format!("{prefix}.{r}")));
        }
        h.extend(
            [
                "edge_advantage_mean",
                "edge_advantage_std",
                "mean_ess",
                "loss",
                "clip_fraction",
                "grad_norm",
                "steps_skipped",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        h.extend(self.reward_names.iter().map(|r| format!("eval.{r}")));
        h.extend(
            ["sample_seconds", "update_seconds", "wall_seconds"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    fn csv_row(&self, r: &IterationRecord) -> Vec<String> {
        let mut row = vec![
            r.iteration.to_string(),
            self.method.clone(),
            opt(&r.window_start),
            r.prompts.to_string(),
            r.edges.to_string(),
            r.nfe.to_string(),
            r.cumulative_nfe.to_string(),
        ];
        for col in [&r.reward_mean, &r.reward_max, &r.reward_standardized_mean] {
            row.extend(col.iter().map(f64::to_string));
        }
        row.extend([
            r.edge_advantage_mean.to_string(),
            r.edge_advantage_std.to_string(),
            opt(&r.mean_ess),
            r.loss.to_string(),
            r.clip_fraction.to_string(),
            r.grad_norm.to_string(),
            r.steps_skipped.to_string(),
        ]);
        match &r.eval {
            Some(e) => row.extend(e.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), self.reward_names.len())),
        }
        row.extend([
            r.sample_seconds.to_string(),
            r.update_seconds.to_string(),
            r.wall_seconds.to_string(),
        ]);
        row
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(self.csv_header())?;
        for r in &self.records {
            w.write_record(self.csv_row(r))?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let log: RunLog = serde_json::from_str(&text)?;
        Ok(log)
    }

    /// The last evaluation in the log, if any.
    pub fn final_eval(&self) -> Option<&[f64]> {
        self.records.iter().rev().find_map(|r| r.eval.as_deref())
    }

    pub fn cumulative_nfe(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cumulative_nfe)
    }
}

/// `(r − r_base) / (r_max − r_base)`.
pub fn normalized_reward(r: f64, base: f64, max: f64) -> Result<f64> {
    if max == base {
        return Err(Error::InvalidArgument(format!(
            "r_max equals r_base ({base}); normalization undefined"
        )));
    }
    Ok((r - base) / (max - base))
}

/// Write one tidy CSV with a row per iteration of every log:
///
/// ```text
/// method, seed, iteration, cumulative_nfe, wall_seconds,
/// reward_mean.<r>, normalized.<r>, eval.<r>, eval_normalized.<r>   (per reward r)
/// ```
pub fn emit_plot_data(logs: &[RunLog], path: impl AsRef<Path>) -> Result<usize> {
    let first = logs
        .first()
        .ok_or_else(|| Error::InvalidArgument("plot data needs at least one run log".into()))?;
    for log in logs {
        if log.schema_version != RUNLOG_SCHEMA_VERSION || log.schema_version != first.schema_version
        {
            return Err(Error::Schema(format!(
                "run log schema {} does not match {}",
                log.schema_version, RUNLOG_SCHEMA_VERSION
            )));
        }
        if log.reward_names != first.reward_names {
            return Err(Error::Schema(format!(
                "reward columns {:?} differ from {:?}",
                log.reward_names, first.reward_names
            )));
        }
    }
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = [
        "method",
        "seed",
        "iteration",
        "cumulative_nfe",
        "wall_seconds",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for r in &first.reward_names {
        header.extend([
            format!("reward_mean.{r}"),
            format!("normalized.{r}"),
            format!("eval.{r}"),
            format!("eval_normalized.{r}"),
        ]);
    }
    w.write_record(&header)?;
    let mut rows = 0;
    for log in logs {
        for rec in &log.records {
            let mut row = vec![
                log.method.clone(),
                log.seed.to_string(),
                rec.iteration.to_string(),
                rec.cumulative_nfe.to_string(),
                rec.wall_seconds.to_string(),
            ];
            for k in 0..log.reward_names.len() {
                let (base, max) = (log.reward_base[k], log.reward_max[k]);
                row.push(rec.reward_mean[k].to_string());
                row.push(normalized_reward(rec.reward_mean[k], base, max)?.to_string());
                match &rec.eval {
                    Some(e) => {
                        row.push(e[k].to_string());
                        row.push(normalized_reward(e[k], base, max)?.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(iteration: usize, reward: f64, eval: Option<f64>) -> IterationRecord {
        IterationRecord {
            iteration,
            window_start: Some(1),
            prompts: 8,
            edges: 312,
            nfe: 100,
            cumulative_nfe: 100 * (iteration as u64 + 1),
            reward_mean: vec![reward],
            reward_max: vec![reward + 1.0],
            reward_standardized_mean: vec![0.0],
            edge_advantage_mean: 0.0,
            edge_advantage_std: 1.0,
            mean_ess: None,
            loss: -1.0,
            clip_fraction: 0.0,
            grad_norm: 2.0,
            steps_skipped: 0,
            eval: eval.map(|e| vec![e]),
            sample_seconds: 0.1,
            update_seconds: 0.1,
            wall_seconds: 0.2,
        }
    }

    fn log() -> RunLog {
        let mut l = RunLog::new(
            "treegrpo",
            "two_mode",
            1,
            vec!["mode_proximity".into()],
            vec![-4.0],
            vec![0.0],
        );
        l.push(record(0, -4.0, None)).unwrap();
        l.push(record(1, -2.0, Some(0.0))).unwrap();
        l
    }

    #[test]
    fn normalization_identities() {
        assert_eq!(normalized_reward(-4.0, -4.0, 0.0).unwrap(), 0.0);
        assert_eq!(normalized_reward(0.0, -4.0, 0.0).unwrap(), 1.0);
        assert!(normalized_reward(1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn plot_data_has_a_row_per_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        assert_eq!(emit_plot_data(&[log()], &path).unwrap(), 2);
        let mut rd = csv::Reader::from_path(&path).unwrap();
        let header = rd.headers().unwrap().clone();
        let norm = header
            .iter()
            .position(|h| h == "normalized.mode_proximity")
            .unwrap();
        let eval_norm = header
            .iter()
            .position(|h| h == "eval_normalized.mode_proximity")
            .unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(&rows[0][norm], "0");
        assert_eq!(&rows[1][norm], "0.5");
        assert_eq!(&rows[0][eval_norm], "");
        assert_eq!(&rows[1][eval_norm], "1");
    }

    #[test]
    fn plot_data_rejects_mismatched_logs() {
        let dir = tempfile::tempdir().unwrap();
        let mut other = log();
        other.schema_version += 1;
        assert!(matches!(
            emit_plot_data(&[log(), other], dir.path().join("p.csv")),
            Err(Error::Schema(_))
        ));
        let mut other = log();
        other.reward_names = vec!["ring".into()];
        assert!(emit_plot_data(&[log(), other], dir.path().join("p.csv")).is_err());
        assert!(emit_plot_data(&[], dir.path().join("p.csv")).is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = log();
        l.write_csv(dir.path().join("log.csv")).unwrap();
        l.write_json(dir.path().join("log.json")).unwrap();
        assert_eq!(RunLog::read_json(dir.path().join("log.json")).unwrap(), l);
        let mut rd = csv::Reader::from_path(dir.path().join("log.csv")).unwrap();
        assert_eq!(rd.headers().unwrap().len(), l.csv_header().len());
        assert_eq!(rd.records().count(), 2);
    }

    #[test]
    fn append_only() {
        let mut l = log();
        assert!(l.push(record(1, 0.0, None)).is_err());
        assert!(l.push(record(5, 0.0, None)).is_ok());
    }
}
