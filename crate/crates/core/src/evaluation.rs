//! Accuracy and mean reciprocal rank over rankings, and comparison reports.
//!
//! A sample without a ranking (an abstention) counts as wrong and adds a
//! reciprocal rank of 0.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::scoring::Ranking;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sample {0} has no gold label")]
    MissingGold(usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("ranking for unknown sample {0}")]
    UnknownSample(usize),
}

/// 1-based rank of the gold candidate per sample, in dataset order; `None`
/// when the sample has no ranking or the gold is absent from it.
pub fn gold_ranks(dataset: &Dataset, rankings: &[Ranking]) -> Result<Vec<Option<usize>>, EvalError> {
    let index: HashMap<usize, usize> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id, i))
        .collect();
    let mut by_sample: Vec<Option<&Ranking>> = vec![None; dataset.len()];
    for r in rankings {
        let i = *index.get(&r.sample_id).ok_or(EvalError::UnknownSample(r.sample_id))?;
        by_sample[i] = Some(r);
    }
    dataset
        .samples
        .iter()
        .zip(by_sample)
        .map(|(s, r)| {
            let gold = s.gold.as_deref().ok_or(EvalError::MissingGold(s.sample_id))?;
            Ok(r.and_then(|r| r.rank_of(gold)))
        })
        .collect()
}

pub fn accuracy(ranks: &[Option<usize>]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = ranks.iter().filter(|r| **r == Some(1)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

pub fn mrr(ranks: &[Option<usize>]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = ranks.iter().map(|r| r.map_or(0.0, |k| 1.0 / k as f64)).sum();
    Ok(sum / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system_id: String,
    pub accuracy: f64,
    pub mrr: f64,
    pub n: usize,
    pub abstentions: usize,
    /// (sample id, gold rank) in dataset order.
    pub per_sample: Vec<(usize, Option<usize>)>,
}

pub fn evaluate(system_id: &str, dataset: &Dataset, rankings: &[Ranking]) -> Result<EvalReport, EvalError> {
    let ranks = gold_ranks(dataset, rankings)?;
    Ok(EvalReport {
        system_id: system_id.to_string(),
        accuracy: accuracy(&ranks)?,
        mrr: mrr(&ranks)?,
        n: ranks.len(),
        abstentions: ranks.iter().filter(|r| r.is_none()).count(),
        per_sample: dataset.samples.iter().map(|s| s.sample_id).zip(ranks).collect(),
    })
}

/// Percentage with two decimals.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Rows sorted by MRR, best first; equal MRR keeps input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<EvalReport>,
}

pub fn report(entries: Vec<EvalReport>) -> ReportTable {
    let mut rows = entries;
    rows.sort_by(|a, b| b.mrr.partial_cmp(&a.mrr).unwrap_or(std::cmp::Ordering::Equal));
    ReportTable { rows }
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.system_id.len())
            .chain(["system".len()])
            .max()
            .unwrap_or(6);
        let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>6}\n", "system", "accuracy", "mrr", "n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}  {:>6}",
                r.system_id,
                pct(r.accuracy),
                pct(r.mrr),
                r.n
            );
        }
        out
    }

    /// `system_id,accuracy,mrr,n` with percentage values.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system_id", "accuracy", "mrr", "n"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.system_id.clone(), pct(r.accuracy), pct(r.mrr), r.n.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// `system_id,sample_id,gold_rank`; an abstention leaves `gold_rank`
    /// empty.
    pub fn per_sample_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system_id", "sample_id", "gold_rank"]).expect("in-memory write");
        for r in &self.rows {
            for (sid, rank) in &r.per_sample {
                w.write_record([
                    r.system_id.clone(),
                    sid.to_string(),
                    rank.map(|k| k.to_string()).unwrap_or_default(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}
