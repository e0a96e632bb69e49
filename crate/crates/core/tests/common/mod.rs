//! Independent reference implementations used by the integration and
//! acceptance tests. Everything here works on dense data and shares no code
//! with the library beyond its input types.

#![allow(dead_code)]

use std::cmp::Ordering;

use dismec::sparse::CsrMatrix;
use dismec::tron::SignVector;
use rand::Rng;

/// A small dense binary problem.
#[derive(Clone, Debug)]
pub struct DenseProblem {
    pub x: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub c: f64,
}

impl DenseProblem {
    pub fn random<R: Rng>(rng: &mut R, max_n: usize, max_d: usize, c: f64) -> Self {
        let n = rng.gen_range(1..=max_n);
        let d = rng.gen_range(1..=max_d);
        let x = (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..d)
                    .map(|_| {
                        if rng.gen_bool(0.5) {
                            rng.gen_range(-1.0..1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                row
            })
            .collect();
        let s = (0..n)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { -1.0 })
            .collect();
        Self { x, s, c }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn csr(&self) -> CsrMatrix {
        CsrMatrix::from_dense(&self.x, self.d())
    }

    pub fn signs(&self) -> SignVector {
        SignVector::from_dense(&self.s)
    }

    pub fn margins(&self, w: &[f64]) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.s)
            .map(|(x, s)| 1.0 - s * dot(x, w))
            .collect()
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let loss: f64 = self
            .margins(w)
            .iter()
            .map(|&m| if m > 0.0 { m * m } else { 0.0 })
            .sum();
        0.5 * dot(w, w) + self.c * loss
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = w.to_vec();
        for ((x, s), m) in self.x.iter().zip(&self.s).zip(self.margins(w)) {
            if m > 0.0 {
                // d/dw (1 - s w.x)^2 = -2 s (1 - s w.x) x
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj -= 2.0 * self.c * s * m * xj;
                }
            }
        }
        g
    }

    /// Largest squared singular value of X, by power iteration on XᵀX.
    pub fn sigma_max_sq(&self) -> f64 {
        let d = self.d();
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let xv: Vec<f64> = self.x.iter().map(|r| dot(r, &v)).collect();
            let mut u = vec![0.0; d];
            for (r, a) in self.x.iter().zip(&xv) {
                for (uj, rj) in u.iter_mut().zip(r) {
                    *uj += a * rj;
                }
            }
            lambda = norm(&u);
            if lambda == 0.0 {
                return 0.0;
            }
            v = u.iter().map(|x| x / lambda).collect();
        }
        lambda
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Backtracking gradient descent to `||g|| <= tol`. The step never drops
/// below `1 / L` with `L = 1 + 2 C sigma_max^2`, a Lipschitz bound of the
/// gradient. Returns the final iterate and its objective.
pub fn gd_oracle(p: &DenseProblem, tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let lip = 1.0 + 2.0 * p.c * p.sigma_max_sq() * 1.01;
    let floor = 1.0 / lip;
    let mut w = vec![0.0; p.d()];
    let mut f = p.objective(&w);
    let mut step = floor;
    for _ in 0..max_iter {
        let g = p.gradient(&w);
        let gn2 = dot(&g, &g);
        if gn2.sqrt() <= tol {
            break;
        }
        step *= 2.0;
        loop {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let ft = p.objective(&trial);
            if ft <= f - 0.5 * step * gn2 || step <= floor {
                w = trial;
                f = ft;
                break;
            }
            step = (step * 0.5).max(floor);
        }
    }
    (w, f)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Dense `W x` followed by a full sort with the tie-break rule.
pub fn dense_ranking(w: &[Vec<f64>], x: &[f64]) -> Vec<(u32, f64)> {
    let mut scored: Vec<(u32, f64)> = w
        .iter()
        .enumerate()
        .map(|(l, wl)| {
            let mut s = 0.0;
            for (a, b) in wl.iter().zip(x) {
                if *a != 0.0 {
                    s += a * b;
                }
            }
            (l as u32, s)
        })
        .collect();
    scored.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    scored
}

/// Precision@k straight from the definition.
pub fn brute_precision(gold: &[u32], ranked: &[u32], k: usize) -> f64 {
    let mut hits = 0usize;
    for i in 0..k {
        if i < ranked.len() && gold.iter().any(|g| *g == ranked[i]) {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

/// nDCG@k straight from the definition, base-2 logarithm.
pub fn brute_ndcg(gold: &[u32], ranked: &[u32], k: usize) -> f64 {
    let mut dcg = 0.0;
    for l in 1..=k {
        if l <= ranked.len() && gold.contains(&ranked[l - 1]) {
            dcg += 1.0 / ((l + 1) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for l in 1..=k.min(gold.len()) {
        ideal += 1.0 / ((l + 1) as f64).log2();
    }
    dcg / ideal
}

pub mod proc {
    use std::collections::BTreeMap;
    use std::fs;
    use std::path::{Path, PathBuf};
    use std::process::{Command, Output};

    /// The `dismec` binary. Tests outside the `dismec` package find it next
    /// to their own `deps/` directory.
    pub fn dismec_path() -> PathBuf {
        match option_env!("CARGO_BIN_EXE_dismec") {
            Some(p) => p.into(),
            None => {
                let exe = std::env::current_exe().unwrap();
                let p = exe.parent().unwrap().parent().unwrap().join("dismec");
                assert!(p.exists(), "build the dismec binary first: {}", p.display());
                p
            }
        }
    }

    pub fn dismec() -> Command {
        let mut c = Command::new(dismec_path());
        c.env_remove("DISMEC_THREADS").env("RUST_LOG", "info");
        c
    }

    pub fn run_ok(cmd: &mut Command) -> Output {
        let out = cmd.output().expect("spawn dismec");
        assert!(
            out.status.success(),
            "{cmd:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stderr),
            String::from_utf8_lossy(&out.stdout)
        );
        out
    }

    /// Generates `<prefix>.train.txt` / `<prefix>.test.txt` in `dir`.
    pub fn gen(dir: &Path, prefix: &str, args: &[&str]) {
        let p = dir.join(prefix);
        run_ok(dismec().arg("gen").args(args).arg("--out-prefix").arg(&p));
    }

    /// Every file under `<model>/blocks`, by name.
    pub fn block_files(model: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for e in fs::read_dir(model.join("blocks")).unwrap() {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') {
                out.insert(name, fs::read(e.path()).unwrap());
            }
        }
        out
    }

    /// Batch ids from "trained batch <b>" log lines.
    pub fn trained_batches(stderr: &[u8]) -> Vec<usize> {
        String::from_utf8_lossy(stderr)
            .lines()
            .filter_map(|l| l.split("trained batch ").nth(1))
            .filter_map(|rest| rest.split_whitespace().next()?.parse().ok())
            .collect()
    }

    /// Manifest with the per-block worker fields cleared.
    pub fn manifest_sans_workers(model: &Path) -> serde_json::Value {
        let text = fs::read_to_string(model.join("manifest.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for b in v["blocks"].as_array_mut().unwrap() {
            b["worker"] = serde_json::Value::Null;
        }
        v
    }
}
