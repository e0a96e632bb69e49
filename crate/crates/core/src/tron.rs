//! Primal trust-region Newton solver for one binary subproblem
//!
//! ```text
//! min_w  0.5 * w'w + C * sum_i max(0, 1 - s_i w'x_i)^2
//! ```
//!
//! The loss is once differentiable; the generalized Hessian
//! `I + 2C X_I' X_I` over the active set `I = {i : 1 - s_i w'x_i > 0}` drives
//! the Newton steps. Each step minimizes the quadratic model inside a trust
//! region by truncated conjugate gradient.

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

// Step acceptance thresholds on actual / predicted reduction.
const ETA0: f64 = 1e-4;
const ETA1: f64 = 0.25;
const ETA2: f64 = 0.75;
// Radius update factors.
const SIGMA1: f64 = 0.25;
const SIGMA2: f64 = 0.5;
const SIGMA3: f64 = 4.0;

/// Per-label signs `s_i`, stored as the sorted ids of the positive rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignVector {
    positives: Vec<u32>,
    n_rows: usize,
}

impl SignVector {
    pub fn new(n_rows: usize, positives: Vec<u32>) -> Result<Self> {
        if positives.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "positive rows must be strictly increasing".into(),
            ));
        }
        if let Some(&p) = positives.last() {
            if p as usize >= n_rows {
                return Err(Error::OutOfRange(format!("row {p} (n_rows {n_rows})")));
            }
        }
        Ok(Self { positives, n_rows })
    }

    pub fn from_dense(signs: &[f64]) -> Self {
        let positives = signs
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(i, _)| i as u32)
            .collect();
        Self {
            positives,
            n_rows: signs.len(),
        }
    }

    pub fn positives(&self) -> &[u32] {
        &self.positives
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut s = vec![-1.0; self.n_rows];
        for &p in &self.positives {
            s[p as usize] = 1.0;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub c: f64,
    /// Stop once `||g(w)|| <= eps * ||g(0)||`.
    pub eps: f64,
    pub max_outer_iter: usize,
    pub max_cg_iter: usize,
    /// Inner CG stops at `||r|| <= cg_rtol * ||g||`.
    pub cg_rtol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            eps: 0.01,
            max_outer_iter: 100,
            max_cg_iter: 200,
            cg_rtol: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be > 0, got {}", self.c)));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!(
                "eps must be in (0, 1), got {}",
                self.eps
            )));
        }
        if self.max_outer_iter < 1 || self.max_cg_iter < 1 {
            return Err(Error::Config("iteration caps must be >= 1".into()));
        }
        if !(self.cg_rtol > 0.0 && self.cg_rtol < 1.0) {
            return Err(Error::Config(format!(
                "cg_rtol must be in (0, 1), got {}",
                self.cg_rtol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult {
    pub w: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    /// Number of accepted trust-region steps.
    pub outer_iters: usize,
    pub converged: bool,
    /// Objective at the start point and after every accepted step.
    pub history: Vec<f64>,
}

fn check_dims(w: &[f64], x: &CsrMatrix, s: &SignVector) -> Result<()> {
    if w.len() != x.n_cols() {
        return Err(Error::Dimension {
            expected: x.n_cols(),
            got: w.len(),
        });
    }
    if s.n_rows() != x.n_rows() {
        return Err(Error::Dimension {
            expected: x.n_rows(),
            got: s.n_rows(),
        });
    }
    Ok(())
}

/// `0.5 * ||w||^2 + C * sum_i max(0, 1 - s_i w'x_i)^2`
pub fn objective(w: &[f64], x: &CsrMatrix, s: &SignVector, c: f64) -> Result<f64> {
    check_dims(w, x, s)?;
    let mut p = SquaredHinge::new(x, s, c);
    Ok(p.evaluate(w))
}

/// `w + 2C X_I'(X_I w - s_I)`
pub fn gradient(w: &[f64], x: &CsrMatrix, s: &SignVector, c: f64) -> Result<Vec<f64>> {
    check_dims(w, x, s)?;
    let mut p = SquaredHinge::new(x, s, c);
    p.evaluate(w);
    let mut g = vec![0.0; w.len()];
    p.gradient(w, &mut g);
    Ok(g)
}

/// `v + 2C X_I'(X_I v)` with the active set taken at `w`.
pub fn hessian_vec(
    w: &[f64],
    v: &[f64],
    x: &CsrMatrix,
    s: &SignVector,
    c: f64,
) -> Result<Vec<f64>> {
    check_dims(w, x, s)?;
    if v.len() != w.len() {
        return Err(Error::Dimension {
            expected: w.len(),
            got: v.len(),
        });
    }
    let mut p = SquaredHinge::new(x, s, c);
    p.evaluate(w);
    let mut out = vec![0.0; w.len()];
    p.hessian_vec(v, &mut out);
    Ok(out)
}

/// Loss state for one label. Caches `z = Xw` and the active set of the last
/// evaluated point.
struct SquaredHinge<'a> {
    x: &'a CsrMatrix,
    signs: Vec<f64>,
    c: f64,
    z: Vec<f64>,
    active: Vec<usize>,
}

impl<'a> SquaredHinge<'a> {
    fn new(x: &'a CsrMatrix, s: &SignVector, c: f64) -> Self {
        Self {
            x,
            signs: s.to_dense(),
            c,
            z: vec![0.0; x.n_rows()],
            active: Vec::with_capacity(x.n_rows()),
        }
    }

    fn evaluate(&mut self, w: &[f64]) -> f64 {
        self.active.clear();
        let mut loss = 0.0;
        for i in 0..self.x.n_rows() {
            let zi = self.x.row(i).dot(w);
            self.z[i] = zi;
            let margin = 1.0 - self.signs[i] * zi;
            if margin > 0.0 {
                self.active.push(i);
                loss += margin * margin;
            }
        }
        0.5 * dot(w, w) + self.c * loss
    }

    fn gradient(&self, w: &[f64], g: &mut [f64]) {
        g.copy_from_slice(w);
        for &i in &self.active {
            let coef = 2.0 * self.c * (self.z[i] - self.signs[i]);
            self.x.row(i).axpy(coef, g);
        }
    }

    fn hessian_vec(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
        for &i in &self.active {
            let row = self.x.row(i);
            let t = row.dot(v);
            if t != 0.0 {
                row.axpy(2.0 * self.c * t, out);
            }
        }
    }

    /// `||g(0)|| = ||2C X's||`; every instance is active at the origin.
    fn grad_norm_at_origin(&self) -> f64 {
        let mut g = vec![0.0; self.x.n_cols()];
        for i in 0..self.x.n_rows() {
            self.x.row(i).axpy(-2.0 * self.c * self.signs[i], &mut g);
        }
        norm(&g)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Minimizes the squared-hinge objective for `(x, s)` from `w0` (zero when
/// absent). Non-convergence is reported in the result, not as an error.
pub fn solve(
    x: &CsrMatrix,
    s: &SignVector,
    cfg: &SolverConfig,
    w0: Option<&[f64]>,
) -> Result<SolverResult> {
    cfg.validate()?;
    let d = x.n_cols();
    let mut w = match w0 {
        Some(w0) => w0.to_vec(),
        None => vec![0.0; d],
    };
    check_dims(&w, x, s)?;

    let mut prob = SquaredHinge::new(x, s, cfg.c);
    let mut f = prob.evaluate(&w);
    let mut g = vec![0.0; d];
    prob.gradient(&w, &mut g);
    let mut gnorm = norm(&g);
    let tol = cfg.eps * prob.grad_norm_at_origin();

    let mut history = vec![f];
    let mut radius = gnorm;
    let mut accepted = 0;

    let mut step = vec![0.0; d];
    let mut resid = vec![0.0; d];
    let mut w_new = vec![0.0; d];
    let mut cg = CgScratch::new(d);

    // Rejected steps shrink the radius; bound them so a stalled solve ends.
    let max_trials = cfg.max_outer_iter * 10;
    let mut trials = 0;

    while gnorm > tol && accepted < cfg.max_outer_iter && trials < max_trials {
        trials += 1;
        truncated_cg(&prob, &g, radius, cfg, &mut step, &mut resid, &mut cg);

        w_new.copy_from_slice(&w);
        axpy(1.0, &step, &mut w_new);

        let gs = dot(&g, &step);
        let prered = -0.5 * (gs - dot(&step, &resid));
        let f_new = prob.evaluate(&w_new);
        let actred = f - f_new;
        let snorm = norm(&step);

        if accepted == 0 && trials == 1 {
            radius = radius.min(snorm);
        }

        let alpha = if f_new - f - gs <= 0.0 {
            SIGMA3
        } else {
            SIGMA1.max(-0.5 * (gs / (f_new - f - gs)))
        };

        if actred < ETA0 * prered {
            radius = (alpha.max(SIGMA1) * snorm).min(SIGMA2 * radius);
        } else if actred < ETA1 * prered {
            radius = (SIGMA1 * radius).max((alpha * snorm).min(SIGMA2 * radius));
        } else if actred < ETA2 * prered {
            radius = (SIGMA1 * radius).max((alpha * snorm).min(SIGMA3 * radius));
        } else {
            radius = radius.max((alpha * snorm).min(SIGMA3 * radius));
        }

        if actred > ETA0 * prered {
            std::mem::swap(&mut w, &mut w_new);
            f = f_new;
            prob.gradient(&w, &mut g);
            gnorm = norm(&g);
            accepted += 1;
            history.push(f);
        } else {
            // restore the cached active set for the kept iterate
            prob.evaluate(&w);
        }

        if actred <= 0.0 && prered <= 0.0 {
            break;
        }
        if actred.abs() <= 1e-12 * f.abs() && prered.abs() <= 1e-12 * f.abs() {
            break;
        }
    }

    Ok(SolverResult {
        w,
        objective: f,
        grad_norm: gnorm,
        outer_iters: accepted,
        converged: gnorm <= tol,
        history,
    })
}

struct CgScratch {
    d: Vec<f64>,
    hd: Vec<f64>,
}

impl CgScratch {
    fn new(n: usize) -> Self {
        Self {
            d: vec![0.0; n],
            hd: vec![0.0; n],
        }
    }
}

/// Approximately solves `H s = -g` subject to `||s|| <= radius`. On return
/// `resid = -g - H s`.
fn truncated_cg(
    prob: &SquaredHinge<'_>,
    g: &[f64],
    radius: f64,
    cfg: &SolverConfig,
    s: &mut [f64],
    r: &mut [f64],
    scratch: &mut CgScratch,
) {
    let CgScratch { d, hd } = scratch;
    s.iter_mut().for_each(|v| *v = 0.0);
    for ((ri, di), gi) in r.iter_mut().zip(d.iter_mut()).zip(g) {
        *ri = -gi;
        *di = -gi;
    }
    let cg_tol = cfg.cg_rtol * norm(g);
    let mut rtr = dot(r, r);

    for _ in 0..cfg.max_cg_iter {
        if rtr.sqrt() <= cg_tol {
            break;
        }
        prob.hessian_vec(d, hd);
        let alpha = rtr / dot(d, hd);
        axpy(alpha, d, s);
        if norm(s) > radius {
            // back up and move to the boundary along d
            axpy(-alpha, d, s);
            let std = dot(s, d);
            let sts = dot(s, s);
            let dtd = dot(d, d);
            let dsq = radius * radius;
            let rad = (std * std + dtd * (dsq - sts)).sqrt();
            let alpha = if std >= 0.0 {
                (dsq - sts) / (std + rad)
            } else {
                (rad - std) / dtd
            };
            axpy(alpha, d, s);
            axpy(-alpha, hd, r);
            break;
        }
        axpy(-alpha, hd, r);
        let rnew = dot(r, r);
        let beta = rnew / rtr;
        for (di, ri) in d.iter_mut().zip(r.iter()) {
            *di = beta * *di + ri;
        }
        rtr = rnew;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(vals: &[f64]) -> CsrMatrix {
        let rows: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
        CsrMatrix::from_dense(&rows, 1)
    }

    #[test]
    fn objective_at_zero_is_c_times_n() {
        let x = CsrMatrix::from_dense(
            &[
                vec![1.0, 2.0],
                vec![0.0, 3.0],
                vec![1.0, 0.0],
                vec![0.5, 0.5],
            ],
            2,
        );
        let s = SignVector::new(4, vec![0, 2]).unwrap();
        assert_eq!(objective(&[0.0, 0.0], &x, &s, 1.0).unwrap(), 4.0);
        assert_eq!(objective(&[0.0, 0.0], &x, &s, 0.5).unwrap(), 2.0);
    }

    #[test]
    fn one_d_hand_values() {
        let x = one_d(&[1.0]);
        let s = SignVector::new(1, vec![0]).unwrap();
        assert!((objective(&[0.5], &x, &s, 1.0).unwrap() - 0.375).abs() < 1e-15);
        assert!((gradient(&[0.5], &x, &s, 1.0).unwrap()[0] + 0.5).abs() < 1e-15);
        assert_eq!(hessian_vec(&[0.0], &[1.0], &x, &s, 1.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn gradient_at_zero_is_minus_two_c_xts() {
        let x = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![0.0, 3.0]], 2);
        let s = SignVector::new(2, vec![0]).unwrap();
        let g = gradient(&[0.0, 0.0], &x, &s, 0.5).unwrap();
        // X's = [1, 2 - 3] = [1, -1]
        assert_eq!(g, vec![-1.0, 1.0]);
    }

    #[test]
    fn satisfied_margins_give_identity() {
        let x = one_d(&[1.0, -1.0]);
        let s = SignVector::new(2, vec![0]).unwrap();
        let w = [2.0];
        assert_eq!(gradient(&w, &x, &s, 3.0).unwrap(), vec![2.0]);
        assert_eq!(hessian_vec(&w, &[0.7], &x, &s, 3.0).unwrap(), vec![0.7]);
        assert_eq!(hessian_vec(&w, &[0.0], &x, &s, 3.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn margin_exactly_one_is_inactive() {
        // 1 - s w'x = 0 is not in the active set
        let x = one_d(&[1.0]);
        let s = SignVector::new(1, vec![0]).unwrap();
        assert_eq!(gradient(&[1.0], &x, &s, 1.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let x = one_d(&[1.0]);
        let s = SignVector::new(1, vec![0]).unwrap();
        assert!(matches!(
            objective(&[0.0, 1.0], &x, &s, 1.0),
            Err(Error::Dimension { .. })
        ));
        assert!(hessian_vec(&[0.0], &[1.0, 2.0], &x, &s, 1.0).is_err());
        let s2 = SignVector::new(2, vec![0]).unwrap();
        assert!(gradient(&[0.0], &x, &s2, 1.0).is_err());
    }

    #[test]
    fn solve_closed_form_cases() {
        let cfg = SolverConfig {
            eps: 1e-10,
            ..Default::default()
        };
        let x = one_d(&[1.0]);
        let s = SignVector::new(1, vec![0]).unwrap();
        // 0.5 w^2 + (1 - w)^2 is minimized at w = 2C / (1 + 2C)
        let r = solve(&x, &s, &cfg, None).unwrap();
        assert!(r.converged);
        assert!((r.w[0] - 2.0 / 3.0).abs() < 1e-8, "{r:?}");

        let x = one_d(&[1.0, -1.0]);
        let s = SignVector::new(2, vec![0]).unwrap();
        let r = solve(&x, &s, &cfg, None).unwrap();
        assert!((r.w[0] - 0.8).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn zero_features_give_zero_weights() {
        let x = CsrMatrix::from_dense(&[vec![0.0, 0.0], vec![0.0, 0.0]], 2);
        let s = SignVector::new(2, vec![0, 1]).unwrap();
        let r = solve(&x, &s, &SolverConfig::default(), None).unwrap();
        assert_eq!(r.w, vec![0.0, 0.0]);
        assert!(r.converged);
        assert_eq!(r.outer_iters, 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let x = one_d(&[1.0]);
        let s = SignVector::new(1, vec![0]).unwrap();
        for cfg in [
            SolverConfig {
                c: 0.0,
                ..Default::default()
            },
            SolverConfig {
                eps: 1.0,
                ..Default::default()
            },
            SolverConfig {
                max_outer_iter: 0,
                ..Default::default()
            },
            SolverConfig {
                max_cg_iter: 0,
                ..Default::default()
            },
        ] {
            assert!(solve(&x, &s, &cfg, None).is_err());
        }
    }

    #[test]
    fn sign_vector_validation() {
        assert!(SignVector::new(2, vec![1, 0]).is_err());
        assert!(SignVector::new(2, vec![2]).is_err());
        assert_eq!(
            SignVector::new(3, vec![1]).unwrap().to_dense(),
            vec![-1.0, 1.0, -1.0]
        );
    }
}
