//! One-vs-rest training over label batches.
//!
//! A single copy of the (normalized) feature matrix and an inverted
//! label-to-rows index are shared by every binary problem; each label only
//! materializes its sign vector. Labels of a batch are trained by a thread
//! pool; batches are claimed by cooperating processes through the model
//! directory (see [`run_training`]).

mod coord;

pub use coord::{default_worker_id, run_training, RunOptions, RunOutcome};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, Dataset, LabelMatrix, SparseVector};
use crate::store::{SparseWeights, WeightBlock};
use crate::tron::{self, SignVector, SolverConfig, SolverResult};

pub const DEFAULT_BATCH_SIZE: usize = 1000;
pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Solver settings; `solver.c` is the loss weight `C`.
    pub solver: SolverConfig,
    /// Weights with `|w| < delta` are dropped.
    pub delta: f64,
    pub batch_size: usize,
    pub workers_per_batch: usize,
    pub normalize: bool,
    pub bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            delta: DEFAULT_DELTA,
            batch_size: DEFAULT_BATCH_SIZE,
            workers_per_batch: std::thread::available_parallelism().map_or(1, |n| n.get()),
            normalize: true,
            bias: false,
        }
    }
}

impl TrainConfig {
    pub fn c(&self) -> f64 {
        self.solver.c
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.workers_per_batch < 1 {
            return Err(Error::Config("need at least one worker".into()));
        }
        Ok(())
    }
}

/// `B = floor(L / batch_size) + 1`; when `batch_size` divides `L` the last
/// batch is empty.
pub fn n_batches(n_labels: usize, batch_size: usize) -> usize {
    n_labels / batch_size + 1
}

pub fn batch_labels(n_labels: usize, batch_size: usize, batch: usize) -> std::ops::Range<usize> {
    let start = (batch * batch_size).min(n_labels);
    let end = ((batch + 1) * batch_size).min(n_labels);
    start..end
}

/// Label -> positive rows, the transpose of `Y`.
#[derive(Clone, Debug)]
pub struct LabelIndex {
    n_rows: usize,
    offsets: Vec<usize>,
    rows: Vec<u32>,
}

impl LabelIndex {
    pub fn new(y: &LabelMatrix) -> Self {
        let counts = y.label_counts();
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let mut fill = offsets[..counts.len()].to_vec();
        let mut rows = vec![0u32; y.total_positives()];
        // rows are visited in order, so each label's list comes out sorted
        for (i, labels) in y.rows().enumerate() {
            for &l in labels {
                rows[fill[l as usize]] = i as u32;
                fill[l as usize] += 1;
            }
        }
        Self {
            n_rows: y.n_rows(),
            offsets,
            rows,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn positives(&self, label: usize) -> &[u32] {
        &self.rows[self.offsets[label]..self.offsets[label + 1]]
    }

    pub fn sign_vector(&self, label: usize) -> Result<SignVector> {
        if label >= self.n_labels() {
            return Err(Error::OutOfRange(format!(
                "label {label} (L = {})",
                self.n_labels()
            )));
        }
        Ok(SignVector::new(self.n_rows, self.positives(label).to_vec())
            .expect("index rows are sorted and in range"))
    }
}

/// Sign vector of `label` over the rows of `y`.
pub fn make_sign_view(y: &LabelMatrix, label: usize) -> Result<SignVector> {
    LabelIndex::new(y).sign_vector(label)
}

/// Keeps exactly the coordinates with `|w_d| >= delta`; zeros are never kept.
pub fn prune(w: &[f64], delta: f64) -> SparseVector {
    let (indices, values) = w
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0 && v.abs() >= delta)
        .map(|(i, &v)| (i as u32, v))
        .unzip();
    SparseVector::from_parts_unchecked(w.len(), indices, values)
}

/// One binary problem: the shared feature matrix and this label's signs.
#[derive(Debug)]
pub struct BinaryProblem<'a> {
    features: &'a CsrMatrix,
    signs: SignVector,
}

impl<'a> BinaryProblem<'a> {
    pub fn features(&self) -> &'a CsrMatrix {
        self.features
    }

    pub fn signs(&self) -> &SignVector {
        &self.signs
    }

    pub fn solve(&self, cfg: &SolverConfig) -> Result<SolverResult> {
        tron::solve(self.features, &self.signs, cfg, None)
    }
}

/// Training state shared by all labels of a run.
pub struct Trainer {
    x: CsrMatrix,
    index: LabelIndex,
    n_features: usize,
    cfg: TrainConfig,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(ds: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut x = if cfg.normalize {
            ds.features.row_normalize()
        } else {
            ds.features.clone()
        };
        if cfg.bias {
            x = x.with_bias_column();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers_per_batch)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            x,
            index: LabelIndex::new(&ds.labels),
            n_features: ds.n_features(),
            cfg,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn features(&self) -> &CsrMatrix {
        &self.x
    }

    pub fn n_labels(&self) -> usize {
        self.index.n_labels()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn weight_dim(&self) -> usize {
        self.x.n_cols()
    }

    pub fn n_batches(&self) -> usize {
        n_batches(self.n_labels(), self.cfg.batch_size)
    }

    pub fn problem(&self, label: usize) -> Result<BinaryProblem<'_>> {
        Ok(BinaryProblem {
            features: &self.x,
            signs: self.index.sign_vector(label)?,
        })
    }

    /// Unpruned solver output; `None` for labels without positives.
    pub fn solve_label(&self, label: usize) -> Result<Option<SolverResult>> {
        let p = self.problem(label)?;
        if p.signs.positives().is_empty() {
            return Ok(None);
        }
        p.solve(&self.cfg.solver).map(Some)
    }

    pub fn train_label(&self, label: usize) -> Result<SparseVector> {
        Ok(match self.solve_label(label)? {
            Some(r) => prune(&r.w, self.cfg.delta),
            None => SparseVector::empty(self.weight_dim()),
        })
    }

    pub fn train_batch(&self, batch: usize) -> Result<WeightBlock> {
        if batch >= self.n_batches() {
            return Err(Error::OutOfRange(format!(
                "batch {batch} (B = {})",
                self.n_batches()
            )));
        }
        let labels = batch_labels(self.n_labels(), self.cfg.batch_size, batch);
        let start = labels.start;
        let weights = self.pool.install(|| {
            labels
                .into_par_iter()
                .map(|l| {
                    self.train_label(l)
                        .map(|w| SparseWeights::from_pruned(&w, self.cfg.delta))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(WeightBlock {
            batch_id: batch as u32,
            label_start: start as u32,
            dim: self.weight_dim() as u64,
            weights,
        })
    }

    /// Trains every batch in this process, without touching the filesystem.
    pub fn train_all(&self) -> Result<Vec<WeightBlock>> {
        (0..self.n_batches()).map(|b| self.train_batch(b)).collect()
    }
}
