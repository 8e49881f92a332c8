use std::fmt::Write as _;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// KKT / balance tolerances met.
    Kkt,
    /// Iterates stopped moving.
    Step,
    MaxIters,
}

impl StopReason {
    pub fn converged(self) -> bool {
        !matches!(self, StopReason::MaxIters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub kkt: f64,
    /// Dual value at this iterate, for price-based methods.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// Downsampled trajectory.
    pub iterates_logged: Vec<IterRecord>,
    pub final_objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

/// Logs every iterate for the first `dense` iterations, then every `stride`-th.
#[derive(Debug, Clone)]
pub(crate) struct TraceLog {
    records: Vec<IterRecord>,
    dense: usize,
    stride: usize,
}

impl TraceLog {
    pub(crate) fn new() -> Self {
        TraceLog {
            records: Vec::new(),
            dense: 200,
            stride: 25,
        }
    }

    pub(crate) fn wants(&self, iter: usize) -> bool {
        iter < self.dense || iter.is_multiple_of(self.stride)
    }

    pub(crate) fn push(&mut self, rec: IterRecord) {
        if self.records.last().is_some_and(|r| r.iter == rec.iter) {
            self.records.pop();
        }
        self.records.push(rec);
    }

    pub(crate) fn finish(mut self, last: IterRecord, stop_reason: StopReason) -> ConvergenceReport {
        let final_objective = last.objective;
        let kkt_residual = last.kkt.max(0.0);
        let iterations = last.iter;
        self.push(last);
        ConvergenceReport {
            iterates_logged: self.records,
            final_objective,
            kkt_residual,
            iterations,
            stop_reason,
        }
    }
}

impl ConvergenceReport {
    /// `iter,objective,kkt` table. Objective values use four decimals so the
    /// last row matches the CLI summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,objective,kkt\n");
        for r in &self.iterates_logged {
            let _ = writeln!(out, "{},{:.4},{:e}", r.iter, r.objective, r.kkt);
        }
        out
    }

    /// Largest violation of `dual >= primal - slack` over logged rounds, as a
    /// signed margin (negative means violated).
    pub fn min_duality_margin(&self, primal: f64) -> Option<f64> {
        self.iterates_logged
            .iter()
            .filter_map(|r| r.dual.map(|d| d - primal))
            .reduce(f64::min)
    }
}
