//! Ranking metrics: precision@k and nDCG@k.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::predict::{parse_predictions, Prediction};
use crate::sparse;

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// `|gold ∩ top_k(ranked)| / k`; missing ranks count as misses.
pub fn precision_at_k(gold: &[u32], ranked: &[u32], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|l| gold.contains(l)).count();
    hits as f64 / k as f64
}

/// Discounted gain with `log2(rank + 1)`, normalized by the ideal ranking.
/// `None` for an empty gold set.
pub fn ndcg_at_k(gold: &[u32], ranked: &[u32], k: usize) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, l)| gold.contains(l))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (1..=k.min(gold.len()))
        .map(|i| 1.0 / ((i + 1) as f64).log2())
        .sum();
    Some(dcg / ideal)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub k: usize,
    pub p_at_k: f64,
    pub ndcg_at_k: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub evaluated: usize,
    pub skipped: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn p_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.p_at_k)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.ndcg_at_k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("report serializes")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>4}  {:>8}  {:>8}", "k", "P@k", "nDCG@k")?;
        for r in &self.rows {
            writeln!(f, "{:>4}  {:>8.4}  {:>8.4}", r.k, r.p_at_k, r.ndcg_at_k)?;
        }
        write!(
            f,
            "evaluated {} instances, skipped {} with no gold labels",
            self.evaluated, self.skipped
        )
    }
}

/// Means over instances with a nonempty gold set.
pub fn evaluate_rankings<G, R>(gold: &[G], ranked: &[R], ks: &[usize]) -> Result<MetricReport>
where
    G: AsRef<[u32]>,
    R: AsRef<[u32]>,
{
    if gold.len() != ranked.len() {
        return Err(Error::Dimension {
            expected: gold.len(),
            got: ranked.len(),
        });
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Config(format!("k must be >= 1, got {k}")));
    }
    let mut p = vec![0.0; ks.len()];
    let mut n = vec![0.0; ks.len()];
    let mut evaluated = 0;
    for (g, r) in gold.iter().zip(ranked) {
        let (g, r) = (g.as_ref(), r.as_ref());
        if g.is_empty() {
            continue;
        }
        evaluated += 1;
        for (j, &k) in ks.iter().enumerate() {
            p[j] += precision_at_k(g, r, k);
            n[j] += ndcg_at_k(g, r, k).expect("gold is nonempty");
        }
    }
    let skipped = gold.len() - evaluated;
    let mean = |s: f64| {
        if evaluated == 0 {
            0.0
        } else {
            s / evaluated as f64
        }
    };
    Ok(MetricReport {
        evaluated,
        skipped,
        rows: ks
            .iter()
            .enumerate()
            .map(|(j, &k)| MetricRow {
                k,
                p_at_k: mean(p[j]),
                ndcg_at_k: mean(n[j]),
                skipped,
            })
            .collect(),
    })
}

pub fn label_lists(preds: &[Prediction]) -> Vec<Vec<u32>> {
    preds
        .iter()
        .map(|p| p.iter().map(|s| s.label).collect())
        .collect()
}

/// Evaluates a predictions file against the label sets of a dataset file.
pub fn evaluate(gold: &Path, preds: &Path, ks: &[usize]) -> Result<MetricReport> {
    let has_header = sparse::sniff_header(gold)?;
    let ds = sparse::load_xmc(gold, has_header)?;
    let f = File::open(preds).map_err(|e| Error::io(preds, e))?;
    let ranked = label_lists(&parse_predictions(BufReader::new(f))?);
    if ranked.len() != ds.n_rows() {
        return Err(Error::Config(format!(
            "{} has {} rows but {} has {}",
            preds.display(),
            ranked.len(),
            gold.display(),
            ds.n_rows()
        )));
    }
    let gold: Vec<&[u32]> = ds.labels.rows().collect();
    evaluate_rankings(&gold, &ranked, ks)
}
