//! Power-law synthetic data and label-frequency diagnostics.
//!
//! Label sizes follow `N_r = N_1 * r^(-beta)` where `r` is the 1-based rank of
//! a label by number of positive instances. In generated data, label id
//! `r - 1` has rank `r`.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CsrBuilder, Dataset, LabelMatrix};
use crate::error::{Error, Result};

/// Maximum number of labels attached to one generated instance.
pub const MAX_LABELS_PER_INSTANCE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerLawSpec {
    pub n_labels: usize,
    /// Size of the rank-1 label, `N_1`.
    pub head_size: usize,
    pub beta: f64,
    pub n_features: usize,
    pub prototype_nnz: usize,
    pub noise_nnz: usize,
    /// Number of instances; defaults to half the total label count, but at
    /// least the head label size.
    pub n_instances: Option<usize>,
    pub seed: u64,
}

impl Default for PowerLawSpec {
    fn default() -> Self {
        Self {
            n_labels: 100,
            head_size: 100,
            beta: 1.0,
            n_features: 1000,
            prototype_nnz: 10,
            noise_nnz: 10,
            n_instances: None,
            seed: 0,
        }
    }
}

impl PowerLawSpec {
    /// `max(1, round(N_1 * r^(-beta)))` for 1-based rank `r`.
    pub fn label_size(&self, rank: usize) -> usize {
        let v = (self.head_size as f64 * (rank as f64).powf(-self.beta)).round();
        (v as usize).max(1)
    }

    pub fn label_sizes(&self) -> Vec<usize> {
        (1..=self.n_labels).map(|r| self.label_size(r)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.head_size < 1 {
            return Err(Error::Config("head size must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.n_labels == 0 {
            return Err(Error::Infeasible("n_labels must be >= 1".into()));
        }
        if self.prototype_nnz == 0 || self.prototype_nnz > self.n_features {
            return Err(Error::Infeasible(format!(
                "prototype_nnz {} must be in 1..={}",
                self.prototype_nnz, self.n_features
            )));
        }
        if self.noise_nnz > self.n_features {
            return Err(Error::Infeasible(format!(
                "noise_nnz {} exceeds n_features {}",
                self.noise_nnz, self.n_features
            )));
        }
        Ok(())
    }
}

/// Generates a dataset whose rank-size sequence is exactly `spec.label_sizes()`.
pub fn generate_powerlaw(spec: &PowerLawSpec) -> Result<Dataset> {
    spec.validate()?;
    let sizes = spec.label_sizes();
    let total: usize = sizes.iter().sum();
    if total < spec.n_labels {
        return Err(Error::Infeasible(format!(
            "total positives {total} < n_labels {}",
            spec.n_labels
        )));
    }
    let n = spec
        .n_instances
        .unwrap_or_else(|| total.div_ceil(2).max(sizes[0]));
    if n == 0 || total < n || total > MAX_LABELS_PER_INSTANCE * n {
        return Err(Error::Infeasible(format!(
            "{total} positives cannot be spread over {n} instances with 1..={MAX_LABELS_PER_INSTANCE} labels each"
        )));
    }
    if sizes[0] > n {
        return Err(Error::Infeasible(format!(
            "head label size {} exceeds instance count {n}",
            sizes[0]
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let label_rows = assign_labels(&sizes, n, &mut rng)?;

    let prototypes: Vec<Vec<(u32, f64)>> = (0..spec.n_labels)
        .map(|_| {
            let mut idx = index::sample(&mut rng, spec.n_features, spec.prototype_nnz).into_vec();
            idx.sort_unstable();
            let mut p: Vec<(u32, f64)> = idx
                .into_iter()
                .map(|i| {
                    let mag = rng.gen_range(0.5..1.0);
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    (i as u32, sign * mag)
                })
                .collect();
            let norm = p.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            p.iter_mut().for_each(|(_, v)| *v /= norm);
            p
        })
        .collect();

    let mut x = CsrBuilder::new(spec.n_features);
    let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
    for labels in &label_rows {
        acc.clear();
        for &l in labels {
            for &(i, v) in &prototypes[l as usize] {
                *acc.entry(i).or_insert(0.0) += v;
            }
        }
        for i in index::sample(&mut rng, spec.n_features, spec.noise_nnz).into_iter() {
            *acc.entry(i as u32).or_insert(0.0) += rng.gen_range(-0.5..0.5);
        }
        acc.retain(|_, v| *v != 0.0);
        let norm = acc.values().map(|v| v * v).sum::<f64>().sqrt();
        let (idx, val): (Vec<u32>, Vec<f64>) = acc.iter().map(|(&i, &v)| (i, v / norm)).unzip();
        x.push_row(&idx, &val);
    }

    let labels = LabelMatrix::new(spec.n_labels, &label_rows)?;
    Dataset::new(x.finish(), labels)
}

/// Spreads `sizes[l]` positives of each label over `n` instances so that every
/// instance receives between 1 and 3 distinct labels.
fn assign_labels(sizes: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<u32>>> {
    let total: usize = sizes.iter().sum();
    let extra = total - n;

    let mut capacity = vec![1usize; n];
    let mut slots: Vec<usize> = (0..n)
        .flat_map(|i| [i; MAX_LABELS_PER_INSTANCE - 1])
        .collect();
    let (chosen, _) = slots.partial_shuffle(rng, extra);
    for &i in chosen.iter() {
        capacity[i] += 1;
    }

    // With capacities <= 3 the Gale-Ryser condition reduces to
    // b1 <= n and b1 + b2 <= n + #{capacity >= 2}. Trade a (3, 1) pair for
    // (2, 2) until it holds.
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let need2 = (sorted[0] + sorted.get(1).copied().unwrap_or(0)).saturating_sub(n);
    let mut threes: Vec<usize> = (0..n).filter(|&i| capacity[i] == 3).collect();
    let mut ones: Vec<usize> = (0..n).filter(|&i| capacity[i] == 1).collect();
    let mut n2 = capacity.iter().filter(|&&c| c >= 2).count();
    while n2 < need2 {
        if threes.is_empty() || ones.is_empty() {
            return Err(Error::Infeasible(format!(
                "label sizes {} and {} cannot share {n} instances",
                sorted[0], sorted[1]
            )));
        }
        let a = threes.swap_remove(rng.gen_range(0..threes.len()));
        let b = ones.swap_remove(rng.gen_range(0..ones.len()));
        capacity[a] = 2;
        capacity[b] = 2;
        n2 += 1;
    }

    // buckets[c] holds the instances with c free slots
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); MAX_LABELS_PER_INSTANCE + 1];
    for (i, &c) in capacity.iter().enumerate() {
        buckets[c].push(i);
    }

    // Largest labels first, always drawing from the instances with the most
    // free slots (constructive Gale-Ryser).
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&l| (std::cmp::Reverse(sizes[l]), l));

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut picked: Vec<(usize, usize)> = Vec::new();
    for l in order {
        picked.clear();
        let mut need = sizes[l];
        for c in (1..=MAX_LABELS_PER_INSTANCE).rev() {
            while need > 0 && !buckets[c].is_empty() {
                let j = rng.gen_range(0..buckets[c].len());
                picked.push((buckets[c].swap_remove(j), c));
                need -= 1;
            }
        }
        if need > 0 {
            return Err(Error::Infeasible(format!(
                "could not place label {l}: {need} positives left without room"
            )));
        }
        for &(i, c) in &picked {
            rows[i].push(l as u32);
            if c > 1 {
                buckets[c - 1].push(i);
            }
        }
    }
    for r in rows.iter_mut() {
        r.sort_unstable();
    }
    Ok(rows)
}

/// Deterministic random split; rows keep their original relative order.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let n = ds.n_rows();
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, train) = perm.split_at_mut(n_test);
    test.sort_unstable();
    train.sort_unstable();
    (ds.select_rows(train), ds.select_rows(test))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankedLabel {
    pub rank: usize,
    pub label: u32,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub n1_hat: f64,
    pub beta_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelFrequency {
    pub ranked: Vec<RankedLabel>,
    /// `None` when fewer than two labels have a positive count.
    pub fit: Option<PowerLawFit>,
}

/// Ranks labels by positive count (ties by ascending id) and fits
/// `log(count) = log(N_1) - beta * log(rank)` by least squares.
pub fn label_frequency_stats(y: &LabelMatrix) -> LabelFrequency {
    let counts = y.label_counts();
    let mut order: Vec<u32> = (0..counts.len() as u32).collect();
    order.sort_by_key(|&l| (std::cmp::Reverse(counts[l as usize]), l));
    let ranked: Vec<RankedLabel> = order
        .iter()
        .enumerate()
        .map(|(i, &l)| RankedLabel {
            rank: i + 1,
            label: l,
            count: counts[l as usize],
        })
        .collect();

    let pts: Vec<(f64, f64)> = ranked
        .iter()
        .filter(|r| r.count >= 1)
        .map(|r| ((r.rank as f64).ln(), (r.count as f64).ln()))
        .collect();
    let fit = if pts.len() < 2 {
        None
    } else {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let slope = sxy / sxx;
        Some(PowerLawFit {
            n1_hat: (my - slope * mx).exp(),
            beta_hat: -slope,
        })
    };
    LabelFrequency { ranked, fit }
}
