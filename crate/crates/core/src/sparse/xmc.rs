//! Reader and writer for the Extreme Classification Repository text format:
//!
//! ```text
//! N D L
//! l1,l2,...,lk idx1:val1 idx2:val2 ...
//! ```
//!
//! The header is optional. An empty label list is written as a leading space.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;

use super::{CsrBuilder, CsrMatrix, Dataset, LabelMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    pub has_header: bool,
    /// Feature ids in the file start at 1 (LibSVM style); shifted down on ingest.
    pub one_based_features: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicate_labels: usize,
    pub explicit_zeros: usize,
    /// Dimensions from the header, when one was present.
    pub declared: Option<(usize, usize, usize)>,
}

pub fn load_xmc(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let opts = LoadOptions {
        has_header,
        ..LoadOptions::default()
    };
    load_xmc_with(path, &opts).map(|(d, _)| d)
}

pub fn load_xmc_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let (ds, report) = parse_xmc(BufReader::new(f), opts)?;
    if report.duplicate_labels > 0 {
        warn!(
            "{}: removed {} duplicate label ids",
            path.display(),
            report.duplicate_labels
        );
    }
    Ok((ds, report))
}

/// Returns true when the first line looks like an `N D L` header.
pub fn sniff_header(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    let toks: Vec<&str> = first.split_ascii_whitespace().collect();
    Ok(!first.starts_with(' ')
        && toks.len() == 3
        && toks.iter().all(|t| t.parse::<usize>().is_ok()))
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let toks: Vec<&str> = line.split_ascii_whitespace().collect();
    if toks.len() != 3 {
        return Err(Error::parse(
            1,
            format!("malformed header {line:?}, expected \"N D L\""),
        ));
    }
    let mut dims = [0usize; 3];
    for (d, t) in dims.iter_mut().zip(&toks) {
        *d = t
            .parse()
            .map_err(|_| Error::parse(1, format!("non-numeric header token {t:?}")))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

pub fn parse_xmc<R: BufRead>(reader: R, opts: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let mut lines = reader.lines().enumerate();

    if opts.has_header {
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::parse(1, e.to_string()))?,
            None => return Err(Error::parse(1, "missing header")),
        };
        report.declared = Some(parse_header(&header)?);
    }
    let (max_feat, max_label) = match report.declared {
        Some((_, d, l)) => (d, l),
        None => (u32::MAX as usize, u32::MAX as usize),
    };

    let mut x = CsrBuilder::new(max_feat);
    let mut label_rows: Vec<Vec<u32>> = Vec::new();
    let mut feats: Vec<(u32, f64)> = Vec::new();
    let mut seen_feat = 0usize;
    let mut seen_label = 0usize;

    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);

        let (label_part, feat_part) = if line.starts_with(' ') {
            ("", line)
        } else {
            match line.split_once(' ') {
                Some((l, f)) if !l.contains(':') => (l, f),
                Some(_) => ("", line),
                None if line.contains(':') => ("", line),
                None => (line, ""),
            }
        };

        let mut labels: Vec<u32> = Vec::new();
        if !label_part.is_empty() {
            for tok in label_part.split(',') {
                let l: u32 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno, format!("non-numeric label {tok:?}")))?;
                if l as usize >= max_label {
                    return Err(Error::parse(
                        lineno,
                        format!("label id {l} out of range (L = {max_label})"),
                    ));
                }
                labels.push(l);
            }
        }
        let before = labels.len();
        labels.sort_unstable();
        labels.dedup();
        report.duplicate_labels += before - labels.len();
        if let Some(&l) = labels.last() {
            seen_label = seen_label.max(l as usize + 1);
        }

        feats.clear();
        for tok in feat_part.split_ascii_whitespace() {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(lineno, format!("expected idx:val, got {tok:?}")))?;
            let mut idx: u64 = idx
                .parse()
                .map_err(|_| Error::parse(lineno, format!("non-numeric feature id {idx:?}")))?;
            if opts.one_based_features {
                if idx == 0 {
                    return Err(Error::parse(lineno, "feature id 0 in a 1-based file"));
                }
                idx -= 1;
            }
            let val: f64 = val
                .parse()
                .map_err(|_| Error::parse(lineno, format!("cannot parse value {val:?}")))?;
            if !val.is_finite() {
                return Err(Error::parse(lineno, format!("non-finite value {val}")));
            }
            if idx >= max_feat as u64 {
                return Err(Error::parse(
                    lineno,
                    format!("feature id {idx} out of range (D = {max_feat})"),
                ));
            }
            feats.push((idx as u32, val));
        }
        feats.sort_unstable_by_key(|&(i, _)| i);
        if let Some(w) = feats.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::parse(
                lineno,
                format!("duplicate feature id {}", w[0].0),
            ));
        }
        let before = feats.len();
        feats.retain(|&(_, v)| v != 0.0);
        report.explicit_zeros += before - feats.len();
        if let Some(&(f, _)) = feats.last() {
            seen_feat = seen_feat.max(f as usize + 1);
        }

        let (idx, val): (Vec<u32>, Vec<f64>) = feats.iter().copied().unzip();
        x.push_row(&idx, &val);
        label_rows.push(labels);
    }

    let (n_feat, n_labels) = match report.declared {
        Some((n, d, l)) => {
            if label_rows.len() != n {
                return Err(Error::parse(
                    label_rows.len() + 1,
                    format!("header declares {n} rows, file has {}", label_rows.len()),
                ));
            }
            (d, l)
        }
        None => (seen_feat, seen_label),
    };

    let built = x.finish();
    let features = CsrMatrix::new(n_feat, built.row_offsets, built.col_indices, built.values)?;
    let labels = LabelMatrix::new(n_labels, &label_rows)?;
    Ok((Dataset::new(features, labels)?, report))
}

/// Writes `ds` with an `N D L` header. Values use the shortest decimal form
/// that parses back to the same `f64`.
pub fn write_xmc<W: Write>(ds: &Dataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{} {} {}", ds.n_rows(), ds.n_features(), ds.n_labels())?;
    for i in 0..ds.n_rows() {
        let labels = ds.labels.row(i);
        for (j, l) in labels.iter().enumerate() {
            if j > 0 {
                out.write_all(b",")?;
            }
            write!(out, "{l}")?;
        }
        // an empty label list comes out as a leading space
        let row = ds.features.row(i);
        for (&f, &v) in row.indices.iter().zip(row.values) {
            write!(out, " {f}:{v}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}
