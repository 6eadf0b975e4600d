//! Per-iteration attack records and their CSV forms.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensorimg::{metrics, ImageTensor, PerturbationMetrics};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cumulative_queries: u64,
    pub mse: f64,
    pub l2: f64,
    pub linf: f64,
    /// Boundary attacks: whether the candidate replaced the iterate.
    pub accepted: Option<bool>,
    /// NES: mean sampled loss around the iterate.
    pub loss: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub ratio: Option<f64>,
    pub success: bool,
}

impl TraceRow {
    pub fn new(iteration: usize, cumulative_queries: u64, m: PerturbationMetrics) -> Self {
        Self {
            iteration,
            cumulative_queries,
            mse: m.mse,
            l2: m.l2,
            linf: m.linf,
            accepted: None,
            loss: None,
            epsilon: None,
            delta: None,
            ratio: None,
            success: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub success: bool,
    pub queries_to_success: Option<u64>,
    pub total_queries: u64,
    pub iterations: usize,
    pub final_metrics: PerturbationMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub rows: Vec<TraceRow>,
    pub original: ImageTensor,
    pub final_image: ImageTensor,
}

impl AttackTrace {
    pub fn new(original: ImageTensor) -> Self {
        Self {
            rows: Vec::new(),
            final_image: original.clone(),
            original,
        }
    }

    pub fn push(&mut self, row: TraceRow) {
        debug_assert!(self.rows.last().is_none_or(|last| last.cumulative_queries <= row.cumulative_queries));
        self.rows.push(row);
    }

    pub fn total_queries(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.cumulative_queries)
    }

    /// First row flagged as a success.
    pub fn first_success(&self) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.success)
    }

    pub fn summary(&self) -> TraceSummary {
        let first = self.first_success();
        TraceSummary {
            success: first.is_some(),
            queries_to_success: first.map(|r| r.cumulative_queries),
            total_queries: self.total_queries(),
            iterations: self.rows.last().map_or(0, |r| r.iteration),
            final_metrics: metrics(&self.final_image, &self.original).unwrap_or_default(),
        }
    }

    /// Mean-squared error of the iterate after `queries` queries, i.e. the
    /// last row whose cumulative count does not exceed it.
    pub fn mse_at(&self, queries: u64) -> Option<f64> {
        self.rows
            .iter()
            .take_while(|r| r.cumulative_queries <= queries)
            .last()
            .map(|r| r.mse)
    }
}

/// `iteration,cumulative_queries,mse,l2,accepted,epsilon,delta,ratio`
pub fn write_boundary_csv<W: Write>(trace: &AttackTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "cumulative_queries", "mse", "l2", "accepted", "epsilon", "delta", "ratio"])
        .map_err(csv_err)?;
    for r in &trace.rows {
        w.write_record([
            r.iteration.to_string(),
            r.cumulative_queries.to_string(),
            r.mse.to_string(),
            r.l2.to_string(),
            opt(r.accepted.map(|a| a as u8)),
            opt(r.epsilon),
            opt(r.delta),
            opt(r.ratio),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration,cumulative_queries,loss,mse,linf,success_flag`
pub fn write_nes_csv<W: Write>(trace: &AttackTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "cumulative_queries", "loss", "mse", "linf", "success_flag"])
        .map_err(csv_err)?;
    for r in &trace.rows {
        w.write_record([
            r.iteration.to_string(),
            r.cumulative_queries.to_string(),
            opt(r.loss),
            r.mse.to_string(),
            r.linf.to_string(),
            (r.success as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
