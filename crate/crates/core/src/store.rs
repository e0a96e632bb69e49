//! On-disk model layout.
//!
//! ```text
//! <model_dir>/manifest.json
//! <model_dir>/blocks/block_<b>.dsmb
//! <model_dir>/claims/batch_<b>.claim
//! ```
//!
//! Block files are little-endian:
//!
//! ```text
//! "DSMB" | version u32 | batch id u32 | label_start u32 | label_count u32 | D u64
//! per label: nnz u32, then nnz x (index u32, weight f32)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sparse::SparseVector;

pub const BLOCK_MAGIC: &[u8; 4] = b"DSMB";
pub const BLOCK_VERSION: u32 = 1;
pub const BLOCK_HEADER_LEN: usize = 28;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Pruned weights of one label, stored in single precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseWeights {
    pub indices: Vec<u32>,
    pub values: Vec<f32>,
}

impl SparseWeights {
    /// Converts already-pruned weights to `f32`. A value whose rounded
    /// magnitude drops below `delta` (or to zero) is moved one ulp outward so
    /// every stored weight still satisfies `|w| >= delta`.
    pub fn from_pruned(v: &SparseVector, delta: f64) -> Self {
        let values = v
            .values()
            .iter()
            .map(|&x| {
                let y = x as f32;
                if y == 0.0 || (y.abs() as f64) < delta {
                    f32::from_bits(y.to_bits() + 1)
                } else {
                    y
                }
            })
            .collect();
        Self {
            indices: v.indices().to_vec(),
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    /// Keeps entries with `|w| >= delta`.
    pub fn repruned(&self, delta: f64) -> Self {
        let (indices, values) = self
            .iter()
            .filter(|&(_, w)| (w.abs() as f64) >= delta)
            .unzip();
        Self { indices, values }
    }
}

/// Weights for the contiguous label range `label_start..label_start + label_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBlock {
    pub batch_id: u32,
    pub label_start: u32,
    /// Weight dimensionality (feature count, plus one with a bias column).
    pub dim: u64,
    pub weights: Vec<SparseWeights>,
}

impl WeightBlock {
    pub fn label_count(&self) -> usize {
        self.weights.len()
    }

    pub fn nnz(&self) -> usize {
        self.weights.iter().map(SparseWeights::nnz).sum()
    }

    pub fn encoded_len(&self) -> usize {
        BLOCK_HEADER_LEN + self.weights.iter().map(|w| 4 + 8 * w.nnz()).sum::<usize>()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (j, w) in self.weights.iter().enumerate() {
            if w.indices.len() != w.values.len() {
                return Err(format!("label {j}: index/value length mismatch"));
            }
            if w.indices.windows(2).any(|p| p[0] >= p[1]) {
                return Err(format!("label {j}: indices not strictly increasing"));
            }
            if let Some(&last) = w.indices.last() {
                if last as u64 >= self.dim {
                    return Err(format!("label {j}: index {last} >= D = {}", self.dim));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(BLOCK_MAGIC);
        buf.extend_from_slice(&BLOCK_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.batch_id.to_le_bytes());
        buf.extend_from_slice(&self.label_start.to_le_bytes());
        buf.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.dim.to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&(w.nnz() as u32).to_le_bytes());
            for (i, v) in w.iter() {
                buf.extend_from_slice(&i.to_le_bytes());
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fail("truncated header".into()))?;
        if magic != BLOCK_MAGIC {
            return Err(fail(format!("bad magic {magic:?}")));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != BLOCK_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let (batch_id, label_start, label_count, dim) = match (r.u32(), r.u32(), r.u32(), r.u64()) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(fail("truncated header".into())),
        };
        let mut weights = Vec::with_capacity(label_count as usize);
        for j in 0..label_count {
            let nnz = r
                .u32()
                .ok_or_else(|| fail(format!("truncated at label {j}")))?
                as usize;
            if r.remaining() < nnz * 8 {
                return Err(fail(format!("truncated at label {j}")));
            }
            let mut w = SparseWeights {
                indices: Vec::with_capacity(nnz),
                values: Vec::with_capacity(nnz),
            };
            for _ in 0..nnz {
                w.indices.push(r.u32().unwrap());
                w.values.push(f32::from_bits(r.u32().unwrap()));
            }
            weights.push(w);
        }
        if r.remaining() != 0 {
            return Err(fail(format!("{} trailing bytes", r.remaining())));
        }
        let block = WeightBlock {
            batch_id,
            label_start,
            dim,
            weights,
        };
        block.validate().map_err(fail)?;
        Ok(block)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn blocks_dir(model_dir: &Path) -> PathBuf {
    model_dir.join("blocks")
}

pub fn block_path(model_dir: &Path, batch: usize) -> PathBuf {
    blocks_dir(model_dir).join(format!("block_{batch}.dsmb"))
}

pub fn manifest_path(model_dir: &Path) -> PathBuf {
    model_dir.join("manifest.json")
}

/// Writes `bytes` to a temporary sibling and renames it into place, so
/// readers never observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().unwrap().to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/blocks/block_<id>.dsmb` and returns the SHA-256 of its bytes.
pub fn write_block(block: &WeightBlock, dir: &Path) -> Result<String> {
    let path = block_path(dir, block.batch_id as usize);
    block.validate().map_err(|msg| Error::Format {
        path: path.clone(),
        msg,
    })?;
    let bytes = block.encode();
    write_atomic(&path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads a block file, checking its digest when one is given.
pub fn read_block(path: &Path, expected_digest: Option<&str>) -> Result<WeightBlock> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = expected_digest {
        let found = sha256_hex(&bytes);
        if found != expected {
            return Err(Error::Digest {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    WeightBlock::decode(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStatus {
    Pending,
    Claimed,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub id: usize,
    pub status: BlockStatus,
    pub worker: Option<String>,
    pub digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub run_id: String,
    #[serde(rename = "L")]
    pub n_labels: usize,
    #[serde(rename = "D")]
    pub n_features: usize,
    pub batch_size: usize,
    #[serde(rename = "B")]
    pub n_batches: usize,
    pub delta: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub normalize: bool,
    pub bias: bool,
    pub total_nnz: Option<u64>,
    pub blocks: Vec<BlockEntry>,
}

impl ModelManifest {
    pub fn load(model_dir: &Path) -> Result<Self> {
        let path = manifest_path(model_dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }

    pub fn save(&self, model_dir: &Path) -> Result<()> {
        let path = manifest_path(model_dir);
        let mut text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    /// Weight dimensionality of every block.
    pub fn weight_dim(&self) -> usize {
        self.n_features + usize::from(self.bias)
    }

    pub fn label_range(&self, batch: usize) -> std::ops::Range<usize> {
        let start = (batch * self.batch_size).min(self.n_labels);
        let end = ((batch + 1) * self.batch_size).min(self.n_labels);
        start..end
    }

    pub fn missing_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.status != BlockStatus::Done || b.digest.is_none())
            .map(|b| b.id)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.blocks.len() == self.n_batches && self.missing_blocks().is_empty()
    }
}

/// Loads every block of a complete model, verifying digests and label ranges.
pub fn load_blocks(model_dir: &Path, manifest: &ModelManifest) -> Result<Vec<WeightBlock>> {
    let mut missing = manifest.missing_blocks();
    for e in &manifest.blocks {
        if e.status == BlockStatus::Done && !block_path(model_dir, e.id).exists() {
            missing.push(e.id);
        }
    }
    if !missing.is_empty() || manifest.blocks.len() != manifest.n_batches {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Incomplete { missing });
    }
    let mut blocks = Vec::with_capacity(manifest.n_batches);
    for e in &manifest.blocks {
        let path = block_path(model_dir, e.id);
        let block = read_block(&path, e.digest.as_deref())?;
        let range = manifest.label_range(e.id);
        if block.batch_id as usize != e.id
            || block.label_start as usize != range.start
            || block.label_count() != range.len()
            || block.dim != manifest.weight_dim() as u64
        {
            return Err(Error::Format {
                path,
                msg: "block header disagrees with manifest".into(),
            });
        }
        blocks.push(block);
    }
    Ok(blocks)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
    /// Magnitude below which a weight counts as ambiguous.
    pub small_threshold: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            min: -1.0,
            max: 1.0,
            bins: 200,
            small_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(spec: &HistogramSpec) -> Self {
        Self {
            min: spec.min,
            max: spec.max,
            counts: vec![0; spec.bins],
            underflow: 0,
            overflow: 0,
        }
    }

    pub fn add(&mut self, v: f64) {
        if v < self.min {
            self.underflow += 1;
        } else if v > self.max {
            self.overflow += 1;
        } else {
            let width = (self.max - self.min) / self.counts.len() as f64;
            let bin = (((v - self.min) / width) as usize).min(self.counts.len() - 1);
            self.counts[bin] += 1;
        }
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.min + (self.max - self.min) * i as f64 / n as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelStats {
    pub total_nnz: u64,
    pub bytes: u64,
    pub per_block_nnz: Vec<u64>,
    pub histogram: Histogram,
    pub small_threshold: f64,
    /// Stored weights with `|w| < small_threshold`, over stored weights.
    pub small_fraction_stored: f64,
    /// Same, counting every absent coordinate of the `D x L` matrix as zero.
    pub small_fraction_dense: f64,
}

/// Weight statistics of a complete model.
pub fn model_stats(model_dir: &Path, spec: &HistogramSpec) -> Result<ModelStats> {
    let manifest = ModelManifest::load(model_dir)?;
    let blocks = load_blocks(model_dir, &manifest)?;
    Ok(stats_for_blocks(&blocks, manifest.weight_dim(), spec))
}

pub fn stats_for_blocks(blocks: &[WeightBlock], dim: usize, spec: &HistogramSpec) -> ModelStats {
    let mut histogram = Histogram::new(spec);
    let mut small = 0u64;
    let mut per_block_nnz = Vec::with_capacity(blocks.len());
    let mut bytes = 0u64;
    let mut labels = 0u64;
    for b in blocks {
        per_block_nnz.push(b.nnz() as u64);
        bytes += b.encoded_len() as u64;
        labels += b.label_count() as u64;
        for w in &b.weights {
            for &v in &w.values {
                let v = v as f64;
                histogram.add(v);
                if v.abs() < spec.small_threshold {
                    small += 1;
                }
            }
        }
    }
    let total_nnz: u64 = per_block_nnz.iter().sum();
    let dense = dim as u64 * labels;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ModelStats {
        total_nnz,
        bytes,
        per_block_nnz,
        histogram,
        small_threshold: spec.small_threshold,
        small_fraction_stored: ratio(small, total_nnz),
        small_fraction_dense: ratio(dense - total_nnz + small, dense),
    }
}
