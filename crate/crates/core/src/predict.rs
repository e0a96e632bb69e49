//! Top-k prediction against a block-partitioned model.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::{self, Row, SparseVector};
use crate::store::{self, ModelManifest, WeightBlock};

/// One ranked label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub label: u32,
    pub score: f64,
}

/// Ranked labels for one instance, best first.
pub type Prediction = Vec<Scored>;

/// Descending score, then ascending label id.
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or_else(|| b.score.total_cmp(&a.score))
        .then(a.label.cmp(&b.label))
}

fn top_k_in_place(mut v: Vec<Scored>, k: usize) -> Vec<Scored> {
    if k == 0 {
        return Vec::new();
    }
    if v.len() > k {
        v.select_nth_unstable_by(k - 1, rank_order);
        v.truncate(k);
    }
    v.sort_unstable_by(rank_order);
    v
}

/// Scores every label of `block` against `x` and keeps the `k` best.
///
/// `x` must already live in the weight space (normalized, bias appended).
pub fn score_block(x: &SparseVector, block: &WeightBlock, k: usize) -> Result<Vec<Scored>> {
    if x.dim() as u64 != block.dim {
        return Err(Error::Dimension {
            expected: block.dim as usize,
            got: x.dim(),
        });
    }
    let dense = x.to_dense();
    Ok(score_dense(&dense, block, k))
}

fn score_dense(x: &[f64], block: &WeightBlock, k: usize) -> Vec<Scored> {
    let scores = block
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| Scored {
            label: block.label_start + i as u32,
            score: w
                .iter()
                .fold(0.0, |acc, (j, v)| acc + f64::from(v) * x[j as usize]),
        })
        .collect();
    top_k_in_place(scores, k)
}

/// A complete model held in memory.
#[derive(Clone, Debug)]
pub struct Model {
    n_labels: usize,
    n_features: usize,
    normalize: bool,
    bias: bool,
    blocks: Vec<WeightBlock>,
}

impl Model {
    /// Loads and verifies every block listed in the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = ModelManifest::load(dir)?;
        let blocks = store::load_blocks(dir, &manifest)?;
        Ok(Self::from_manifest(&manifest, blocks))
    }

    pub fn from_manifest(m: &ModelManifest, blocks: Vec<WeightBlock>) -> Self {
        Self {
            n_labels: m.n_labels,
            n_features: m.n_features,
            normalize: m.normalize,
            bias: m.bias,
            blocks,
        }
    }

    pub fn from_blocks(
        blocks: Vec<WeightBlock>,
        n_features: usize,
        normalize: bool,
        bias: bool,
    ) -> Result<Self> {
        let dim = (n_features + usize::from(bias)) as u64;
        let mut next = 0usize;
        for b in &blocks {
            if b.dim != dim || b.label_start as usize != next {
                return Err(Error::Config(format!(
                    "block {} does not continue the label range or has dim {} != {dim}",
                    b.batch_id, b.dim
                )));
            }
            next += b.label_count();
        }
        Ok(Self {
            n_labels: next,
            n_features,
            normalize,
            bias,
            blocks,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn weight_dim(&self) -> usize {
        self.n_features + usize::from(self.bias)
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn bias(&self) -> bool {
        self.bias
    }

    pub fn blocks(&self) -> &[WeightBlock] {
        &self.blocks
    }

    /// Same model with every weight vector pruned again at `delta`.
    pub fn repruned(&self, delta: f64) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| WeightBlock {
                weights: b.weights.iter().map(|w| w.repruned(delta)).collect(),
                ..b.clone()
            })
            .collect();
        Self {
            blocks,
            ..self.clone()
        }
    }

    /// Maps a raw test row into weight space. Feature ids `>= D` are dropped
    /// and counted.
    pub fn prepare(&self, row: Row<'_>, normalize: bool) -> (SparseVector, usize) {
        let mut dropped = 0;
        let mut indices: Vec<u32> = Vec::with_capacity(row.nnz() + 1);
        let mut values: Vec<f64> = Vec::with_capacity(row.nnz() + 1);
        for (&i, &v) in row.indices.iter().zip(row.values) {
            if (i as usize) < self.n_features {
                indices.push(i);
                values.push(v);
            } else {
                dropped += 1;
            }
        }
        if normalize {
            let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                values.iter_mut().for_each(|v| *v /= n);
            }
        }
        if self.bias {
            indices.push(self.n_features as u32);
            values.push(1.0);
        }
        (
            SparseVector::from_parts_unchecked(self.weight_dim(), indices, values),
            dropped,
        )
    }

    /// Global top-k for `x` given in weight space; `k > L` clamps to `L`.
    pub fn predict_topk(&self, x: &SparseVector, k: usize) -> Result<Prediction> {
        if x.dim() != self.weight_dim() {
            return Err(Error::Dimension {
                expected: self.weight_dim(),
                got: x.dim(),
            });
        }
        Ok(self.topk_dense(&x.to_dense(), k))
    }

    fn topk_dense(&self, x: &[f64], k: usize) -> Prediction {
        let k = k.min(self.n_labels);
        // the global top-k is contained in the union of per-block top-k lists
        let candidates = self
            .blocks
            .iter()
            .flat_map(|b| score_dense(x, b, k))
            .collect();
        top_k_in_place(candidates, k)
    }

    /// Predicts every row of `rows`, in parallel across instances. Returns
    /// the predictions and the per-instance latency in seconds.
    pub fn predict_rows<'a, I>(&self, rows: I, k: usize, normalize: bool) -> PredictBatch
    where
        I: IntoParallelIterator<Item = Row<'a>>,
        I::Iter: IndexedParallelIterator,
    {
        let out: Vec<(Prediction, usize, f64)> = rows
            .into_par_iter()
            .map_init(
                || vec![0.0; self.weight_dim()],
                |buf, row| {
                    let t = Instant::now();
                    let (x, dropped) = self.prepare(row, normalize);
                    for (&i, &v) in x.indices().iter().zip(x.values()) {
                        buf[i as usize] = v;
                    }
                    let p = self.topk_dense(buf, k);
                    for &i in x.indices() {
                        buf[i as usize] = 0.0;
                    }
                    (p, dropped, t.elapsed().as_secs_f64())
                },
            )
            .collect();
        let mut batch = PredictBatch::default();
        for (p, d, s) in out {
            batch.predictions.push(p);
            batch.ignored_features += d;
            batch.latencies.push(s);
        }
        batch
    }
}

#[derive(Clone, Debug, Default)]
pub struct PredictBatch {
    pub predictions: Vec<Prediction>,
    pub ignored_features: usize,
    /// Seconds per instance.
    pub latencies: Vec<f64>,
}

/// Top-k labels for a raw feature vector using the model in `dir`.
pub fn predict_topk(x: &SparseVector, dir: &Path, k: usize) -> Result<Prediction> {
    let model = Model::load(dir)?;
    let (x, _) = model.prepare(x.as_row(), model.normalize);
    model.predict_topk(&x, k)
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub k: usize,
    /// Overrides the training-time normalization recorded in the manifest.
    pub normalize: Option<bool>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LatencyStats {
    pub instances: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    pub fn from_seconds(lat: &[f64]) -> Self {
        if lat.is_empty() {
            return Self {
                instances: 0,
                mean_ms: 0.0,
                p99_ms: 0.0,
            };
        }
        let mut sorted = lat.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Self {
            instances: lat.len(),
            mean_ms: 1e3 * lat.iter().sum::<f64>() / lat.len() as f64,
            p99_ms: 1e3 * sorted[rank - 1],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PredictReport {
    pub latency: LatencyStats,
    pub ignored_features: usize,
    pub normalize_mismatch: bool,
}

/// Predicts every row of the test file and writes one ranked line per row.
pub fn predict_file(
    data: &Path,
    model_dir: &Path,
    out: &Path,
    opts: &PredictOptions,
) -> Result<PredictReport> {
    if opts.k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let model = Model::load(model_dir)?;
    let has_header = sparse::sniff_header(data)?;
    let (ds, _) = sparse::load_xmc_with(
        data,
        &sparse::LoadOptions {
            has_header,
            ..Default::default()
        },
    )?;
    let normalize = opts.normalize.unwrap_or(model.normalize);
    let normalize_mismatch = normalize != model.normalize;
    if normalize_mismatch {
        warn!(
            "test-time normalization ({normalize}) differs from training ({})",
            model.normalize
        );
    }
    let batch = model.predict_rows(ds.features.rows().collect::<Vec<_>>(), opts.k, normalize);
    if batch.ignored_features > 0 {
        warn!(
            "ignored {} feature entries with id >= D = {}",
            batch.ignored_features, model.n_features
        );
    }
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(f);
    write_predictions(&mut w, &batch.predictions).map_err(|e| Error::io(out, e))?;
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(PredictReport {
        latency: LatencyStats::from_seconds(&batch.latencies),
        ignored_features: batch.ignored_features,
        normalize_mismatch,
    })
}

/// `%g` with six significant digits.
pub fn format_score(v: f64) -> String {
    const P: i32 = 6;
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, v);
        strip_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_predictions<W: Write>(w: &mut W, preds: &[Prediction]) -> std::io::Result<()> {
    for p in preds {
        let line: Vec<String> = p
            .iter()
            .map(|s| format!("{}:{}", s.label, format_score(s.score)))
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn parse_predictions<R: BufRead>(r: R) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
        let mut p = Vec::new();
        for tok in line.split_whitespace() {
            let (l, s) = tok.split_once(':').ok_or_else(|| {
                Error::parse(line_no, format!("expected label:score, got {tok:?}"))
            })?;
            p.push(Scored {
                label: l
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad label {l:?}")))?,
                score: s
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad score {s:?}")))?,
            });
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::SparseWeights;

    fn block(start: u32, dim: u64, ws: Vec<Vec<(u32, f32)>>) -> WeightBlock {
        WeightBlock {
            batch_id: 0,
            label_start: start,
            dim,
            weights: ws
                .into_iter()
                .map(|w| SparseWeights {
                    indices: w.iter().map(|p| p.0).collect(),
                    values: w.iter().map(|p| p.1).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_input_ranks_by_label_id() {
        let b = block(10, 2, vec![vec![(0, 1.0)], vec![], vec![(1, -3.0)], vec![]]);
        let x = SparseVector::empty(2);
        let top = score_block(&x, &b, 3).unwrap();
        assert_eq!(
            top.iter().map(|s| s.label).collect::<Vec<_>>(),
            [10, 11, 12]
        );
        assert!(top.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn one_d_dot() {
        let b = block(0, 1, vec![vec![(0, 0.5)]]);
        let x = SparseVector::new(1, vec![0], vec![1.0]).unwrap();
        assert_eq!(score_block(&x, &b, 1).unwrap()[0].score, 0.5);
        let bad = SparseVector::empty(2);
        assert!(score_block(&bad, &b, 1).is_err());
    }

    #[test]
    fn ties_prefer_lower_label_and_merge_across_blocks() {
        let m = Model::from_blocks(
            vec![
                block(0, 1, vec![vec![(0, 1.0)], vec![(0, 2.0)]]),
                block(2, 1, vec![vec![(0, 2.0)], vec![(0, 1.0)]]),
            ],
            1,
            false,
            false,
        )
        .unwrap();
        let x = SparseVector::new(1, vec![0], vec![1.0]).unwrap();
        let p = m.predict_topk(&x, 10).unwrap();
        assert_eq!(p.iter().map(|s| s.label).collect::<Vec<_>>(), [1, 2, 0, 3]);
        let p2 = m.predict_topk(&x, 2).unwrap();
        assert_eq!(p2, p[..2]);
    }

    #[test]
    fn prepare_drops_out_of_range_and_adds_bias() {
        let m = Model::from_blocks(vec![block(0, 3, vec![vec![]])], 2, true, true).unwrap();
        let x = SparseVector::new(5, vec![0, 1, 4], vec![3.0, 4.0, 9.0]).unwrap();
        let (p, dropped) = m.prepare(x.as_row(), true);
        assert_eq!(dropped, 1);
        assert_eq!(p.indices(), &[0, 1, 2]);
        assert_eq!(p.values(), &[0.6, 0.8, 1.0]);
    }

    #[test]
    fn score_formatting_matches_printf_g() {
        let cases = [
            (0.0, "0"),
            (0.5, "0.5"),
            (2.0 / 3.0, "0.666667"),
            (-1.25, "-1.25"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (999999.5, "1e+06"),
            (100.0, "100"),
        ];
        for (v, s) in cases {
            assert_eq!(format_score(v), s, "{v}");
        }
    }

    #[test]
    fn predictions_round_trip_through_text() {
        let preds = vec![
            vec![
                Scored {
                    label: 3,
                    score: 0.5,
                },
                Scored {
                    label: 0,
                    score: -2.0,
                },
            ],
            vec![],
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "3:0.5 0:-2\n\n");
        assert_eq!(parse_predictions(&buf[..]).unwrap(), preds);
        assert!(parse_predictions(&b"3-0.5\n"[..]).is_err());
    }

    #[test]
    fn latency_stats() {
        assert_eq!(LatencyStats::from_seconds(&[]).mean_ms, 0.0);
        let lat: Vec<f64> = (1..=100).map(|i| i as f64 / 1000.0).collect();
        let s = LatencyStats::from_seconds(&lat);
        assert!((s.mean_ms - 50.5).abs() < 1e-9);
        assert!((s.p99_ms - 99.0).abs() < 1e-9);
    }
}
