//! Post-hoc pruning sweeps and validation-based choice of `C`.

use std::fmt;
use std::path::Path;

use log::info;
use serde::Serialize;

use crate::engine::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_rankings, label_lists, MetricReport};
use crate::predict::Model;
use crate::sparse::{Dataset, LabelMatrix};
use crate::store::{ModelManifest, BLOCK_HEADER_LEN};

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub nnz: u64,
    pub bytes: u64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ks: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.metrics.rows.iter().map(|m| m.k).collect())
            .unwrap_or_default();
        write!(f, "{:>10}  {:>12}  {:>12}", "delta", "nnz", "bytes")?;
        for k in &ks {
            write!(f, "  {:>7}", format!("P@{k}"))?;
        }
        for r in &self.rows {
            write!(f, "\n{:>10}  {:>12}  {:>12}", r.delta, r.nnz, r.bytes)?;
            for m in &r.metrics.rows {
                write!(f, "  {:>7.4}", m.p_at_k)?;
            }
        }
        Ok(())
    }
}

/// Encoded size of all blocks, in bytes.
pub fn model_bytes(model: &Model) -> u64 {
    model.blocks().iter().map(|b| b.encoded_len() as u64).sum()
}

pub fn model_nnz(model: &Model) -> u64 {
    model.blocks().iter().map(|b| b.nnz() as u64).sum()
}

/// Re-prunes `base` at every `delta` and evaluates each pruned model on
/// `test`, scored against `gold`.
pub fn sweep_model(
    base: &Model,
    test: &Dataset,
    gold: &LabelMatrix,
    deltas: &[f64],
    ks: &[usize],
) -> Result<SweepTable> {
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::Config(format!("delta must be >= 0, got {d}")));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let gold: Vec<&[u32]> = gold.rows().collect();
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let m = base.repruned(delta);
        let preds = m
            .predict_rows(
                test.features.rows().collect::<Vec<_>>(),
                kmax,
                m.normalize(),
            )
            .predictions;
        let metrics = evaluate_rankings(&gold, &label_lists(&preds), ks)?;
        info!("delta {delta}: nnz {}", model_nnz(&m));
        rows.push(SweepRow {
            delta,
            nnz: model_nnz(&m),
            bytes: model_bytes(&m),
            metrics,
        });
    }
    Ok(SweepTable { rows })
}

/// Sweeps a model directory trained with `delta = 0`.
pub fn sweep_delta(
    model_dir: &Path,
    test: &Dataset,
    gold: &LabelMatrix,
    deltas: &[f64],
    ks: &[usize],
) -> Result<SweepTable> {
    let manifest = ModelManifest::load(model_dir)?;
    if manifest.delta != 0.0 {
        return Err(Error::Config(format!(
            "sweeps need a model trained with delta = 0, this one has {}",
            manifest.delta
        )));
    }
    let base = Model::load(model_dir)?;
    sweep_model(&base, test, gold, deltas, ks)
}

/// Header-only size of an empty model with `n_batches` blocks.
pub fn empty_model_bytes(n_batches: usize, n_labels: usize) -> u64 {
    (n_batches * BLOCK_HEADER_LEN + 4 * n_labels) as u64
}

pub const DEFAULT_C_GRID: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Clone, Debug, Serialize)]
pub struct CSelection {
    pub best_c: f64,
    /// `(C, P@1)` on the held-out rows.
    pub scores: Vec<(f64, f64)>,
}

/// Holds out every tenth row, trains on the rest for each `C` in `grid` and
/// returns the `C` with the best P@1 (smallest `C` on ties).
pub fn select_c(ds: &Dataset, cfg: &TrainConfig, grid: &[f64]) -> Result<CSelection> {
    if grid.is_empty() {
        return Err(Error::Config("empty C grid".into()));
    }
    let (fit_rows, held_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.n_rows()).partition(|i| i % 10 != 9);
    if held_rows.is_empty() {
        return Err(Error::Config("too few rows for a validation split".into()));
    }
    let fit = ds.select_rows(&fit_rows);
    let held = ds.select_rows(&held_rows);
    let gold: Vec<&[u32]> = held.labels.rows().collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &c in grid {
        let mut cfg = cfg.clone();
        cfg.solver.c = c;
        let trainer = Trainer::new(&fit, cfg.clone())?;
        let model = Model::from_blocks(
            trainer.train_all()?,
            fit.n_features(),
            cfg.normalize,
            cfg.bias,
        )?;
        let preds = model
            .predict_rows(held.features.rows().collect::<Vec<_>>(), 1, cfg.normalize)
            .predictions;
        let p1 = evaluate_rankings(&gold, &label_lists(&preds), &[1])?
            .p_at(1)
            .expect("k = 1 requested");
        info!("C = {c}: validation P@1 = {p1:.4}");
        scores.push((c, p1));
    }
    let mut best = scores[0];
    for &(c, p) in &scores[1..] {
        if p > best.1 || (p == best.1 && c < best.0) {
            best = (c, p);
        }
    }
    Ok(CSelection {
        best_c: best.0,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{generate_powerlaw, PowerLawSpec};
    use crate::tron::SolverConfig;

    fn data() -> Dataset {
        generate_powerlaw(&PowerLawSpec {
            n_labels: 30,
            head_size: 40,
            n_features: 300,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn base(ds: &Dataset) -> Model {
        let cfg = TrainConfig {
            delta: 0.0,
            batch_size: 8,
            workers_per_batch: 2,
            solver: SolverConfig::default(),
            ..Default::default()
        };
        let t = Trainer::new(ds, cfg).unwrap();
        Model::from_blocks(t.train_all().unwrap(), ds.n_features(), true, false).unwrap()
    }

    #[test]
    fn bytes_shrink_with_delta_and_zero_is_identity() {
        let ds = data();
        let m = base(&ds);
        let t = sweep_model(&m, &ds, &ds.labels, &[0.0, 0.01, 0.1, 1e9], &[1, 3]).unwrap();
        let bytes: Vec<u64> = t.rows.iter().map(|r| r.bytes).collect();
        assert!(bytes.windows(2).all(|w| w[0] >= w[1]), "{bytes:?}");
        assert_eq!(bytes[0], model_bytes(&m));
        assert_eq!(t.rows[0].nnz, model_nnz(&m));
        assert_eq!(bytes[3], empty_model_bytes(m.blocks().len(), m.n_labels()));
        assert!(t.to_string().contains("P@3"));
    }

    #[test]
    fn rejects_negative_delta() {
        let ds = data();
        assert!(sweep_model(&base(&ds), &ds, &ds.labels, &[-1.0], &[1]).is_err());
    }

    #[test]
    fn select_c_picks_from_grid() {
        let ds = data();
        let cfg = TrainConfig {
            workers_per_batch: 2,
            ..Default::default()
        };
        let s = select_c(&ds, &cfg, &DEFAULT_C_GRID).unwrap();
        assert_eq!(s.scores.len(), 3);
        assert!(DEFAULT_C_GRID.contains(&s.best_c));
        let best = s.scores.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        assert_eq!(s.scores.iter().find(|p| p.0 == s.best_c).unwrap().1, best);
    }
}
