//! Per-round metrics CSV and run summaries.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::engine::RoundRecord;
use crate::diagnostics::Dissimilarity;
use crate::error::{invalid, Result};

pub const COLUMNS: [&str; 14] = [
    "round",
    "algorithm",
    "global_loss",
    "mean_test_acc",
    "per_client_acc",
    "grad_norm_f",
    "gamma_hat",
    "B_hat",
    "I_s_mean",
    "I_c_mean",
    "wall_ms",
    "grad_h_hat",
    "eps_s_hat",
    "eps_c_hat",
];

/// Columns that only observers write; everything else is the trajectory.
pub const DIAGNOSTIC_COLUMNS: [&str; 6] = ["grad_norm_f", "gamma_hat", "B_hat", "grad_h_hat", "eps_s_hat", "eps_c_hat"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row(r: &RoundRecord) -> Result<Vec<String>> {
    let b = match r.b_hat {
        Some(Dissimilarity::Value(v)) => v.to_string(),
        Some(Dissimilarity::Stationary) => "stationary".into(),
        None => String::new(),
    };
    Ok(vec![
        r.round.to_string(),
        r.algorithm.name().into(),
        r.global_loss.to_string(),
        r.mean_test_acc.to_string(),
        serde_json::to_string(&r.per_client_acc)?,
        opt(r.grad_norm_f),
        opt(r.gamma_hat),
        b,
        opt(r.i_s_mean),
        opt(r.i_c_mean),
        r.wall_ms.to_string(),
        opt(r.grad_h_hat),
        opt(r.eps_s_hat),
        opt(r.eps_c_hat),
    ])
}

/// Incremental writer; each record is flushed so partial runs stay readable.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(COLUMNS)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &RoundRecord) -> Result<()> {
        self.inner.write_record(row(r)?)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_metrics<W: Write>(w: W, records: &[RoundRecord]) -> Result<()> {
    let mut out = MetricsWriter::new(w)?;
    records.iter().try_for_each(|r| out.write(r))
}

/// The subset of a metrics CSV the plotter and summaries need.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub algorithm: String,
    pub global_loss: f64,
    pub mean_test_acc: f64,
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return invalid("metrics CSV has an unexpected header");
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| crate::Error::Invalid(format!("bad {} value `{}`", COLUMNS[i], &rec[i])))
        };
        out.push(MetricsRow {
            round: num(0)? as usize,
            algorithm: rec[1].to_string(),
            global_loss: num(2)?,
            mean_test_acc: num(3)?,
        });
    }
    Ok(out)
}

/// First 1-based round whose accuracy reaches `threshold`.
pub fn rounds_to_threshold(acc: &[f64], threshold: f64) -> Option<usize> {
    acc.iter().position(|&a| a >= threshold).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: String,
    pub algorithm: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_round: usize,
    pub final_loss: f64,
    /// `(threshold, first round reaching it)`.
    pub rounds_to_threshold: Vec<(f64, Option<usize>)>,
}

pub const THRESHOLDS: [f64; 4] = [0.5, 0.7, 0.8, 0.9];

impl RunSummary {
    pub fn from_records(arm: &str, seed: u64, records: &[RoundRecord]) -> Result<Self> {
        let Some(last) = records.last() else {
            return invalid("no rounds recorded");
        };
        let acc: Vec<f64> = records.iter().map(|r| r.mean_test_acc).collect();
        let (best_i, best) = acc
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &a)| if a > b.1 { (i, a) } else { b });
        Ok(Self {
            arm: arm.to_string(),
            algorithm: last.algorithm.name().to_string(),
            seed,
            rounds: records.len(),
            final_acc: last.mean_test_acc,
            best_acc: best,
            best_round: best_i + 1,
            final_loss: last.global_loss,
            rounds_to_threshold: THRESHOLDS.iter().map(|&t| (t, rounds_to_threshold(&acc, t))).collect(),
        })
    }
}
