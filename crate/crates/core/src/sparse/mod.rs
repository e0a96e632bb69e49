//! Sparse feature and label containers, dataset ingestion and synthetic data.
//!
//! Feature ids and label ids are 0-based `u32`. All containers are immutable
//! once built and can be shared freely between training threads.

mod powerlaw;
mod xmc;

pub use powerlaw::{
    generate_powerlaw, label_frequency_stats, train_test_split, LabelFrequency, PowerLawFit,
    PowerLawSpec,
};
pub use xmc::{
    load_xmc, load_xmc_with, parse_xmc, sniff_header, write_xmc, LoadOptions, LoadReport,
};

use crate::error::{Error, Result};

/// A sparse vector with strictly increasing indices and no stored zeros.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::Dimension {
                expected: indices.len(),
                got: values.len(),
            });
        }
        check_sorted_in_range(&indices, dim)?;
        if values.iter().any(|&v| v == 0.0) {
            return Err(Error::Config(
                "sparse vector stores an explicit zero".into(),
            ));
        }
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps every nonzero coordinate of `dense`.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v))
            .unzip();
        Self {
            dim: dense.len(),
            indices,
            values,
        }
    }

    pub(crate) fn from_parts_unchecked(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert!(check_sorted_in_range(&indices, dim).is_ok());
        Self {
            dim,
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i as usize] = v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_row(&self) -> Row<'_> {
        Row {
            indices: &self.indices,
            values: &self.values,
        }
    }
}

fn check_sorted_in_range(indices: &[u32], dim: usize) -> Result<()> {
    for w in indices.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config(format!(
                "indices not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
    }
    if let Some(&last) = indices.last() {
        if last as usize >= dim {
            return Err(Error::OutOfRange(format!("index {last} (dim {dim})")));
        }
    }
    Ok(())
}

/// Borrowed view of one CSR row.
#[derive(Clone, Copy, Debug)]
pub struct Row<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

impl<'a> Row<'a> {
    #[inline]
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(self.values)
            .map(|(&i, &v)| v * dense[i as usize])
            .sum()
    }

    /// `out += scale * row`
    #[inline]
    pub fn axpy(&self, scale: f64, out: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(self.values) {
            out[i as usize] += scale * v;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Row-compressed feature matrix `X` (N x D).
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.first() != Some(&0) {
            return Err(Error::Config("row_offsets must start at 0".into()));
        }
        if *row_offsets.last().unwrap() != col_indices.len() || col_indices.len() != values.len() {
            return Err(Error::Config(
                "row_offsets do not match stored entries".into(),
            ));
        }
        for w in row_offsets.windows(2) {
            if w[0] > w[1] {
                return Err(Error::Config("row_offsets decrease".into()));
            }
            check_sorted_in_range(&col_indices[w[0]..w[1]], n_cols)?;
        }
        Ok(Self {
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds a matrix from sparse rows of a common dimensionality.
    pub fn from_rows(n_cols: usize, rows: &[SparseVector]) -> Result<Self> {
        let mut b = CsrBuilder::new(n_cols);
        for r in rows {
            if r.dim() > n_cols {
                return Err(Error::Dimension {
                    expected: n_cols,
                    got: r.dim(),
                });
            }
            b.push_row(r.indices(), r.values());
        }
        Ok(b.finish())
    }

    pub fn from_dense(rows: &[Vec<f64>], n_cols: usize) -> Self {
        let mut b = CsrBuilder::new(n_cols);
        for r in rows {
            let v = SparseVector::from_dense(r);
            b.push_row(v.indices(), v.values());
        }
        b.finish()
    }

    pub fn n_rows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    #[inline]
    pub fn row(&self, i: usize) -> Row<'_> {
        let (a, b) = (self.row_offsets[i], self.row_offsets[i + 1]);
        Row {
            indices: &self.col_indices[a..b],
            values: &self.values[a..b],
        }
    }

    pub fn row_vector(&self, i: usize) -> SparseVector {
        let r = self.row(i);
        SparseVector::from_parts_unchecked(self.n_cols, r.indices.to_vec(), r.values.to_vec())
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> + '_ {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    /// Scales every nonempty row to unit Euclidean norm.
    pub fn row_normalize(&self) -> CsrMatrix {
        let mut values = self.values.clone();
        for w in self.row_offsets.windows(2) {
            let row = &mut values[w[0]..w[1]];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        CsrMatrix {
            n_cols: self.n_cols,
            row_offsets: self.row_offsets.clone(),
            col_indices: self.col_indices.clone(),
            values,
        }
    }

    /// Appends a constant feature with value 1 at column `n_cols`.
    pub fn with_bias_column(&self) -> CsrMatrix {
        let bias = self.n_cols as u32;
        let mut b =
            CsrBuilder::with_capacity(self.n_cols + 1, self.n_rows(), self.nnz() + self.n_rows());
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for r in self.rows() {
            idx.clear();
            val.clear();
            idx.extend_from_slice(r.indices);
            val.extend_from_slice(r.values);
            idx.push(bias);
            val.push(1.0);
            b.push_row(&idx, &val);
        }
        b.finish()
    }

    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let mut b = CsrBuilder::new(self.n_cols);
        for &i in rows {
            let r = self.row(i);
            b.push_row(r.indices, r.values);
        }
        b.finish()
    }

    /// Drops entries in columns `>= n_cols`; returns the new matrix and the
    /// number of dropped entries.
    pub fn truncate_cols(&self, n_cols: usize) -> (CsrMatrix, usize) {
        let mut b = CsrBuilder::new(n_cols);
        let mut dropped = 0;
        for r in self.rows() {
            let keep = r.indices.partition_point(|&c| (c as usize) < n_cols);
            dropped += r.indices.len() - keep;
            b.push_row(&r.indices[..keep], &r.values[..keep]);
        }
        (b.finish(), dropped)
    }
}

/// Incremental CSR construction; rows must already be sorted.
#[derive(Debug)]
pub struct CsrBuilder {
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrBuilder {
    pub fn new(n_cols: usize) -> Self {
        Self::with_capacity(n_cols, 0, 0)
    }

    pub fn with_capacity(n_cols: usize, rows: usize, nnz: usize) -> Self {
        let mut row_offsets = Vec::with_capacity(rows + 1);
        row_offsets.push(0);
        Self {
            n_cols,
            row_offsets,
            col_indices: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        }
    }

    pub fn push_row(&mut self, indices: &[u32], values: &[f64]) {
        debug_assert!(check_sorted_in_range(indices, self.n_cols).is_ok());
        self.col_indices.extend_from_slice(indices);
        self.values.extend_from_slice(values);
        self.row_offsets.push(self.col_indices.len());
    }

    pub fn finish(self) -> CsrMatrix {
        CsrMatrix {
            n_cols: self.n_cols,
            row_offsets: self.row_offsets,
            col_indices: self.col_indices,
            values: self.values,
        }
    }
}

/// Per-instance positive label sets (rows of `Y`).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    n_labels: usize,
    offsets: Vec<usize>,
    labels: Vec<u32>,
}

impl LabelMatrix {
    pub fn new(n_labels: usize, rows: &[Vec<u32>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut labels = Vec::new();
        for r in rows {
            check_sorted_in_range(r, n_labels)?;
            labels.extend_from_slice(r);
            offsets.push(labels.len());
        }
        Ok(Self {
            n_labels,
            offsets,
            labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.labels[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn total_positives(&self) -> usize {
        self.labels.len()
    }

    /// Number of positive instances per label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_labels];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelMatrix {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut labels = Vec::new();
        for &i in rows {
            labels.extend_from_slice(self.row(i));
            offsets.push(labels.len());
        }
        LabelMatrix {
            n_labels: self.n_labels,
            offsets,
            labels,
        }
    }
}

/// Training or test data `T = {X, Y}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: CsrMatrix,
    pub labels: LabelMatrix,
}

impl Dataset {
    pub fn new(features: CsrMatrix, labels: LabelMatrix) -> Result<Self> {
        if features.n_rows() != labels.n_rows() {
            return Err(Error::Dimension {
                expected: features.n_rows(),
                got: labels.n_rows(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.features.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.n_cols()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.n_labels()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: self.labels.select_rows(rows),
        }
    }
}
