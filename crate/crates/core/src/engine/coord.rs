//! Filesystem work queue for cooperating training processes.
//!
//! A batch is owned by whoever creates `claims/batch_<b>.claim` with
//! exclusive-create semantics. A claim older than the stale timeout whose
//! block has not appeared, or one left by a dead process on this host, is
//! taken over by renaming it aside (only one renamer can win) and claiming
//! again. A batch is done once its block file
//! exists; block files are written by rename, never in place.
//!
//! The manifest is a view of the directory state and is rewritten atomically
//! after every finished batch. Every process keeps working (or waiting on
//! other claimants) until all blocks exist, then finalizes.

use std::fs::{self, File};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{n_batches, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::sparse::Dataset;
use crate::store::{
    self, block_path, manifest_path, BlockEntry, BlockStatus, ModelManifest, BLOCK_HEADER_LEN,
    MANIFEST_FORMAT_VERSION,
};

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub worker_id: String,
    /// Claims older than this without a block are reclaimed.
    pub stale_after: Duration,
    pub poll_interval: Duration,
    /// Require an existing manifest to continue.
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            worker_id: default_worker_id(),
            stale_after: Duration::from_secs(30 * 60),
            poll_interval: Duration::from_millis(200),
            resume: false,
        }
    }
}

pub fn default_worker_id() -> String {
    let host = fs::read_to_string("/etc/hostname")
        .ok()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "localhost".into());
    format!("{host}:{}", std::process::id())
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: ModelManifest,
    /// Batches trained by this process, in order.
    pub trained: Vec<usize>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Claim {
    worker: String,
    timestamp: u64,
}

fn claims_dir(dir: &Path) -> PathBuf {
    dir.join("claims")
}

fn claim_path(dir: &Path, batch: usize) -> PathBuf {
    claims_dir(dir).join(format!("batch_{batch}.claim"))
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Identifies a run by its configuration and training data, so that every
/// cooperating process can check it is working on the same problem.
fn run_id(ds: &Dataset, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(MANIFEST_FORMAT_VERSION.to_le_bytes());
    for v in [ds.n_rows(), ds.n_features(), ds.n_labels(), cfg.batch_size] {
        h.update((v as u64).to_le_bytes());
    }
    for v in [cfg.delta, cfg.solver.c, cfg.solver.eps, cfg.solver.cg_rtol] {
        h.update(v.to_bits().to_le_bytes());
    }
    for v in [cfg.solver.max_outer_iter, cfg.solver.max_cg_iter] {
        h.update((v as u64).to_le_bytes());
    }
    h.update([cfg.normalize as u8, cfg.bias as u8]);
    for r in ds.features.rows() {
        h.update((r.nnz() as u64).to_le_bytes());
        for (&i, &v) in r.indices.iter().zip(r.values) {
            h.update(i.to_le_bytes());
            h.update(v.to_bits().to_le_bytes());
        }
    }
    for labels in ds.labels.rows() {
        h.update((labels.len() as u64).to_le_bytes());
        for l in labels {
            h.update(l.to_le_bytes());
        }
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn fresh_manifest(ds: &Dataset, cfg: &TrainConfig, run_id: String) -> ModelManifest {
    let b = n_batches(ds.n_labels(), cfg.batch_size);
    ModelManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        run_id,
        n_labels: ds.n_labels(),
        n_features: ds.n_features(),
        batch_size: cfg.batch_size,
        n_batches: b,
        delta: cfg.delta,
        c: cfg.solver.c,
        normalize: cfg.normalize,
        bias: cfg.bias,
        total_nnz: None,
        blocks: (0..b)
            .map(|id| BlockEntry {
                id,
                status: BlockStatus::Pending,
                worker: None,
                digest: None,
            })
            .collect(),
    }
}

/// Creates the manifest unless one exists; returns the manifest on disk.
fn init_manifest(dir: &Path, want: &ModelManifest, resume: bool) -> Result<ModelManifest> {
    let path = manifest_path(dir);
    if !path.exists() {
        if resume {
            return Err(Error::ManifestMismatch {
                dir: dir.to_path_buf(),
                msg: "nothing to resume: no manifest".into(),
            });
        }
        // write aside, then hard-link: link creation fails if another
        // process created the manifest first
        let tmp = dir.join(format!(".manifest.{}.tmp", std::process::id()));
        let text = serde_json::to_string_pretty(want).expect("manifest serializes") + "\n";
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let linked = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => return Ok(want.clone()),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
    }
    let existing = ModelManifest::load(dir)?;
    if existing.run_id != want.run_id {
        return Err(Error::ManifestMismatch {
            dir: dir.to_path_buf(),
            msg: format!(
                "run id {} on disk, {} for these inputs",
                existing.run_id, want.run_id
            ),
        });
    }
    Ok(existing)
}

fn read_claim(path: &Path) -> Option<Claim> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Publishes the claim with `hard_link`, so a claim file never exists
/// without its content even if the writer dies mid-way.
fn try_create_claim(path: &Path, worker: &str) -> Result<bool> {
    let claim = Claim {
        worker: worker.to_string(),
        timestamp: now_secs(),
    };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("claim");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let text = serde_json::to_string(&claim).expect("claim serializes");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    let linked = fs::hard_link(&tmp, path);
    let _ = fs::remove_file(&tmp);
    match linked {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == ErrorKind::AlreadyExists => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn claim_age(claim: Option<&Claim>, path: &Path) -> Option<Duration> {
    let ts = match claim {
        Some(c) => UNIX_EPOCH + Duration::from_secs(c.timestamp),
        // unreadable claim: fall back to mtime
        None => fs::metadata(path).and_then(|m| m.modified()).ok()?,
    };
    Some(SystemTime::now().duration_since(ts).unwrap_or_default())
}

/// True when the claim names a process on this host that no longer runs.
fn owner_is_dead(claim: &Claim, own_worker: &str) -> bool {
    let (Some((host, pid)), Some((own_host, _))) =
        (claim.worker.rsplit_once(':'), own_worker.rsplit_once(':'))
    else {
        return false;
    };
    if host != own_host || !Path::new("/proc/self").exists() {
        return false;
    }
    match pid.parse::<u32>() {
        Ok(pid) => !Path::new(&format!("/proc/{pid}")).exists(),
        Err(_) => false,
    }
}

/// Claims `batch` for `worker`, taking over a stale claim if needed.
fn claim_batch(dir: &Path, batch: usize, opts: &RunOptions) -> Result<bool> {
    let path = claim_path(dir, batch);
    if try_create_claim(&path, &opts.worker_id)? {
        return Ok(true);
    }
    let seen = read_claim(&path);
    let abandoned = seen
        .as_ref()
        .is_some_and(|c| owner_is_dead(c, &opts.worker_id));
    let stale = matches!(claim_age(seen.as_ref(), &path), Some(age) if age >= opts.stale_after);
    if !(abandoned || stale) || block_path(dir, batch).exists() {
        return Ok(false);
    }
    let aside = claims_dir(dir).join(format!(
        "batch_{batch}.claim.stale.{}.{}",
        opts.worker_id.replace(['/', ':'], "_"),
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos())
    ));
    match fs::rename(&path, &aside) {
        Ok(()) => {}
        // someone else moved it first
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(Error::io(&path, e)),
    }
    let moved = read_claim(&aside);
    if moved != seen {
        // another worker reclaimed in between and we moved its fresh claim;
        // put it back unless a newer one already exists
        let _ = fs::hard_link(&aside, &path);
        return Ok(false);
    }
    warn!(
        "batch {batch}: taking over claim of {}",
        seen.map_or_else(|| "unknown worker".into(), |c| c.worker)
    );
    try_create_claim(&path, &opts.worker_id)
}

/// Rebuilds the manifest from the directory. Block entries become `done`
/// once their file exists; `total_nnz` is filled in when all are done.
fn scan_manifest(dir: &Path, base: &ModelManifest) -> Result<ModelManifest> {
    let mut m = base.clone();
    let mut total_nnz = 0u64;
    for entry in m.blocks.iter_mut() {
        let bpath = block_path(dir, entry.id);
        let cpath = claim_path(dir, entry.id);
        entry.worker = read_claim(&cpath).map(|c| c.worker);
        match fs::read(&bpath) {
            Ok(bytes) => {
                entry.status = BlockStatus::Done;
                entry.digest = Some(store::sha256_hex(&bytes));
                let labels = base.label_range(entry.id).len();
                total_nnz +=
                    ((bytes.len() - BLOCK_HEADER_LEN).saturating_sub(4 * labels) / 8) as u64;
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {
                entry.digest = None;
                entry.status = if cpath.exists() {
                    BlockStatus::Claimed
                } else {
                    BlockStatus::Pending
                };
            }
            Err(e) => return Err(Error::io(&bpath, e)),
        }
    }
    m.total_nnz = m.is_complete().then_some(total_nnz);
    Ok(m)
}

/// Trains every batch of `ds` into `dir`, cooperating with any other process
/// running the same command against the same directory. Returns once the
/// model is complete.
pub fn run_training(
    ds: &Dataset,
    cfg: &TrainConfig,
    dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    for d in [dir.to_path_buf(), store::blocks_dir(dir), claims_dir(dir)] {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let want = fresh_manifest(ds, cfg, run_id(ds, cfg));
    let base = init_manifest(dir, &want, opts.resume)?;
    let n_batches = base.n_batches;

    let mut trainer: Option<Trainer> = None;
    let mut trained = Vec::new();
    loop {
        let mut outstanding = 0;
        for b in 0..n_batches {
            if block_path(dir, b).exists() {
                continue;
            }
            if !claim_batch(dir, b, opts)? {
                outstanding += 1;
                continue;
            }
            if block_path(dir, b).exists() {
                // finished by the previous owner after we reclaimed it
                continue;
            }
            let t = match &trainer {
                Some(t) => t,
                None => trainer.insert(Trainer::new(ds, cfg.clone())?),
            };
            let block = t.train_batch(b)?;
            let digest = store::write_block(&block, dir)?;
            info!(
                "trained batch {b} ({} labels, nnz {}) worker {} digest {}",
                block.label_count(),
                block.nnz(),
                opts.worker_id,
                &digest[..12]
            );
            trained.push(b);
            scan_manifest(dir, &base)?.save(dir)?;
        }
        if outstanding == 0 {
            break;
        }
        debug!("{outstanding} batches claimed by other workers; waiting");
        thread::sleep(opts.poll_interval);
    }

    let manifest = scan_manifest(dir, &base)?;
    if !manifest.is_complete() {
        return Err(Error::Incomplete {
            missing: manifest.missing_blocks(),
        });
    }
    manifest.save(dir)?;
    Ok(RunOutcome { manifest, trained })
}
