//! Low-rank decompositions of a layer's weight matrix.
//!
//! * [`truncated_svd`]: best rank-`r` approximation via one-sided Jacobi.
//! * [`sspca`]: sparse factorization `W ~ M V^T` with unit-norm columns in `M`
//!   and an l1 penalty on `V`, solved by block-coordinate descent.
//! * [`weighted_lowrank_em`]: Hadamard-weighted low-rank approximation solved
//!   by EM imputation with a truncated SVD in each M-step.
//!
//! All solvers work in `f64`; callers convert to `f32` when packaging.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 200;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Row-major `f64` matrix used inside the solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("non-degenerate shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Mat64 {
        let mut out = Mat64::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Mat64) -> Mat64 {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let o = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                for (x, &b) in o.iter_mut().zip(&rhs.data[p * m..(p + 1) * m]) {
                    *x += a * b;
                }
            }
        }
        Mat64::from_vec(n, m, out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// First `r` columns.
    pub fn leading_cols(&self, r: usize) -> Mat64 {
        let mut out = Mat64::zeros(self.rows, r);
        for i in 0..self.rows {
            out.data[i * r..(i + 1) * r]
                .copy_from_slice(&self.data[i * self.cols..i * self.cols + r]);
        }
        out
    }
}

/// `U' diag(S') V'^T` together with the objective value of the solver that
/// produced it.
#[derive(Clone, Debug)]
pub struct Factorization {
    /// `N x r`.
    pub left: Mat64,
    /// Length `r`, non-negative.
    pub singular: Vec<f64>,
    /// `P x r`.
    pub right: Mat64,
    pub objective: f64,
    /// Objective after initialization and after every solver iteration.
    pub trace: Vec<f64>,
}

impl Factorization {
    pub fn rank(&self) -> usize {
        self.singular.len()
    }

    /// `U' diag(S')`, the `N x r` mixer.
    pub fn mixer(&self) -> Mat64 {
        let mut m = self.left.clone();
        for i in 0..m.rows {
            for (j, s) in self.singular.iter().enumerate() {
                m.data[i * m.cols + j] *= s;
            }
        }
        m
    }

    pub fn reconstruct(&self) -> Mat64 {
        self.mixer().matmul(&self.right.transpose())
    }
}

/// Full thin SVD `W = U diag(s) V^T` with `s` sorted non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat64,
    pub s: Vec<f64>,
    pub v: Mat64,
}

impl Svd {
    pub fn compute(w: &Mat64) -> Result<Svd> {
        Self::compute_warm(w, None)
    }

    /// Like [`Svd::compute`], seeding the Jacobi rotations with a previous
    /// orthogonal basis for the short side (speeds up repeated solves on
    /// slowly changing matrices).
    pub fn compute_warm(w: &Mat64, warm: Option<&Mat64>) -> Result<Svd> {
        if w.rows >= w.cols {
            let (u, s, v) = one_sided_jacobi(w, warm)?;
            Ok(Svd { u, s, v })
        } else {
            let (u, s, v) = one_sided_jacobi(&w.transpose(), warm)?;
            Ok(Svd { u: v, s, v: u })
        }
    }

    /// Orthogonal basis of the short side, reusable as a warm start.
    pub fn short_side_basis(&self) -> &Mat64 {
        if self.u.rows >= self.v.rows {
            &self.v
        } else {
            &self.u
        }
    }

    pub fn truncate(&self, r: usize) -> Factorization {
        let objective = self.s[r..].iter().map(|s| s * s).sum();
        Factorization {
            left: self.u.leading_cols(r),
            singular: self.s[..r].to_vec(),
            right: self.v.leading_cols(r),
            objective,
            trace: vec![objective],
        }
    }
}

/// Hestenes one-sided Jacobi on an `m x n` matrix with `m >= n`. Returns
/// `(U m x n, s, V n x n)`.
fn one_sided_jacobi(a: &Mat64, warm: Option<&Mat64>) -> Result<(Mat64, Vec<f64>, Mat64)> {
    let (m, n) = (a.rows, a.cols);
    debug_assert!(m >= n);
    // Columns stored contiguously.
    let (mut cols, mut vcols): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match warm {
        Some(v0) if v0.rows == n && v0.cols == n => {
            let av = a.matmul(v0);
            (
                (0..n).map(|j| av.column(j)).collect(),
                (0..n).map(|j| v0.column(j)).collect(),
            )
        }
        _ => (
            (0..n).map(|j| a.column(j)).collect(),
            (0..n)
                .map(|j| {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    e
                })
                .collect(),
        ),
    };
    let eps = 1e-15;
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = pair_mut(&mut cols, p, q);
                rotate(cp, cq, c, s);
                let (vp, vq) = pair_mut(&mut vcols, p, q);
                rotate(vp, vq, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Solver(format!(
            "Jacobi SVD of {m}x{n} matrix did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]).then(i.cmp(&j)));

    let scale = sig.iter().copied().fold(0.0, f64::max);
    let tiny = scale * 1e-13;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vsorted = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if sig[j] > tiny && sig[j] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sig[j]).collect());
            s.push(sig[j]);
        } else {
            ucols.push(vec![0.0; m]);
            s.push(0.0);
            missing.push(k);
        }
        vsorted.push(vcols[j].clone());
    }
    complete_orthonormal(&mut ucols, &missing, m);

    let mut u = Mat64::zeros(m, n);
    let mut v = Mat64::zeros(n, n);
    for (j, (ucol, vcol)) in ucols.iter().zip(&vsorted).enumerate() {
        for (i, &x) in ucol.iter().enumerate() {
            u.set(i, j, x);
        }
        for (i, &x) in vcol.iter().enumerate() {
            v.set(i, j, x);
        }
    }
    Ok((u, s, v))
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &k in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for (j, c) in cols.iter().enumerate() {
                if j == k || (missing.contains(&j) && c.iter().all(|&x| x == 0.0)) {
                    continue;
                }
                let d = dot(&e, c);
                for (x, y) in e.iter_mut().zip(c) {
                    *x -= d * y;
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                cols[k] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn pair_mut<T>(v: &mut [T], p: usize, q: usize) -> (&mut T, &mut T) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

fn check_rank(w: &Mat64, r: usize) -> Result<()> {
    let max = w.rows.min(w.cols);
    if r == 0 || r > max {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside [1, {max}] for a {}x{} matrix",
            w.rows, w.cols
        )));
    }
    Ok(())
}

/// Best rank-`r` approximation in Frobenius norm. The objective is the sum of
/// the discarded squared singular values.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<Factorization> {
    let w = Mat64::from_matrix(w);
    check_rank(&w, r)?;
    Ok(Svd::compute(&w)?.truncate(r))
}

/// Sparse factorization minimizing `||W - M V^T||_F^2 + lambda * ||V||_1`
/// subject to every column of `M` having unit 2-norm.
///
/// Initialized from the truncated SVD (`M = U`, `V = V diag(S)`), then cycles
/// through exact block updates: each mixer column is the unit vector best
/// aligned with its partial residual, and each column of `V` is the
/// soft-thresholded projection of the residual onto its mixer column.
/// The returned factorization has `left = M`, `singular = 1`, `right = V`.
pub fn sspca(
    w: &Matrix,
    r: usize,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Factorization> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let w = Mat64::from_matrix(w);
    check_rank(&w, r)?;
    let init = Svd::compute(&w)?.truncate(r);
    let (n, p) = (w.rows, w.cols);
    let mut mixer = init.left;
    let mut v = init.right;
    for i in 0..p {
        for j in 0..r {
            v.data[i * r + j] *= init.singular[j];
        }
    }

    // Both passes only need W V, M^T W and the two small Gram matrices, so
    // the residual is never formed inside the loop.
    let w_sq = w.frobenius_sq();
    let threshold = lambda / 2.0;
    let l1 = |v: &Mat64| v.data.iter().map(|x| x.abs()).sum::<f64>();
    let mut current = residual_sq(&w, &mixer, &v) + lambda * l1(&v);
    let mut trace = vec![current];

    for _ in 0..max_iters {
        let wv = w.matmul(&v);
        let vtv = v.transpose().matmul(&v);
        for m in 0..r {
            if vtv.get(m, m) == 0.0 {
                continue;
            }
            let z: Vec<f64> = (0..n)
                .map(|i| {
                    let row = &mixer.data[i * r..(i + 1) * r];
                    let cross: f64 = (0..r)
                        .filter(|&k| k != m)
                        .map(|k| row[k] * vtv.get(k, m))
                        .sum();
                    wv.get(i, m) - cross
                })
                .collect();
            let znorm = dot(&z, &z).sqrt();
            if znorm > 0.0 {
                for (i, zi) in z.iter().enumerate() {
                    mixer.data[i * r + m] = zi / znorm;
                }
            }
        }

        let mtw = mixer.transpose().matmul(&w);
        let mtm = mixer.transpose().matmul(&mixer);
        for m in 0..r {
            for j in 0..p {
                let row = &v.data[j * r..(j + 1) * r];
                let cross: f64 = (0..r)
                    .filter(|&k| k != m)
                    .map(|k| row[k] * mtm.get(k, m))
                    .sum();
                v.data[j * r + m] = soft_threshold(mtw.get(m, j) - cross, threshold);
            }
        }

        // ||W - M V^T||^2 expanded through the products above
        let vtv = v.transpose().matmul(&v);
        let mut fit = w_sq;
        for m in 0..r {
            fit -= 2.0 * (0..p).map(|j| mtw.get(m, j) * v.get(j, m)).sum::<f64>();
            for k in 0..r {
                fit += mtm.get(k, m) * vtv.get(k, m);
            }
        }
        let next = fit.max(0.0) + lambda * l1(&v);
        trace.push(next);
        let change = (current - next).abs() / current.abs().max(f64::MIN_POSITIVE);
        current = next;
        if change < tol {
            break;
        }
    }

    Ok(Factorization {
        objective: residual_sq(&w, &mixer, &v) + lambda * l1(&v),
        left: mixer,
        singular: vec![1.0; r],
        right: v,
        trace,
    })
}

/// `||w - mixer v^T||_F^2` computed directly.
fn residual_sq(w: &Mat64, mixer: &Mat64, v: &Mat64) -> f64 {
    let recon = mixer.matmul(&v.transpose());
    w.data
        .iter()
        .zip(&recon.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Weighted objective `||I (.) (W - X)||_F^2`.
pub fn weighted_objective(w: &Mat64, weights: &Mat64, x: &Mat64) -> f64 {
    w.data
        .iter()
        .zip(&weights.data)
        .zip(&x.data)
        .map(|((a, i), b)| {
            let d = i * (a - b);
            d * d
        })
        .sum()
}

/// Rank-`r` minimizer of `||I (.) (W - U S V^T)||_F^2` by EM.
///
/// Weights are rescaled to a maximum of 1 (the minimizer is unchanged). Each
/// E-step imputes `X = I^2 (.) W + (1 - I^2) (.) R` from the current
/// reconstruction `R`; each M-step sets `R` to the truncated SVD of `X`.
/// Starts from the unweighted truncated SVD. The reported objective uses the
/// caller's (unscaled) weights.
/// Rank-`r` truncated SVD of `x` read off the eigenvectors of its short-side
/// Gram matrix. Far cheaper than a full Jacobi SVD when one side is long, and
/// accurate for the leading subspace, which is all the EM step keeps. `warm`
/// is the previous eigenbasis; the new one is returned alongside.
fn gram_truncated_svd(x: &Mat64, r: usize, warm: Option<&Mat64>) -> Result<(Factorization, Mat64)> {
    let wide = x.rows <= x.cols;
    let short = if wide { x.clone() } else { x.transpose() };
    let (n, p) = (short.rows, short.cols);
    let mut gram = Mat64::zeros(n, n);
    for i in 0..n {
        let ri = &short.data[i * p..(i + 1) * p];
        for j in i..n {
            let g = dot(ri, &short.data[j * p..(j + 1) * p]);
            gram.data[i * n + j] = g;
            gram.data[j * n + i] = g;
        }
    }
    let eig = Svd::compute_warm(&gram, warm)?;
    let basis = eig.v.leading_cols(r);
    // rows of basis^T * short are orthogonal with norms equal to the singular values
    let proj = basis.transpose().matmul(&short);
    let mut singular = Vec::with_capacity(r);
    let mut far = Mat64::zeros(p, r);
    for j in 0..r {
        let row = &proj.data[j * p..(j + 1) * p];
        let norm = dot(row, row).sqrt();
        singular.push(norm);
        if norm > 0.0 {
            for (c, v) in row.iter().enumerate() {
                far.data[c * r + j] = v / norm;
            }
        }
    }
    let (left, right) = if wide { (basis, far) } else { (far, basis) };
    let fact = Factorization {
        left,
        singular,
        right,
        objective: 0.0,
        trace: Vec::new(),
    };
    Ok((fact, eig.v))
}

pub fn weighted_lowrank_em(
    w: &Matrix,
    importance: &Matrix,
    r: usize,
    tol: f64,
    max_iters: usize,
) -> Result<Factorization> {
    if w.shape() != importance.shape() {
        return Err(Error::Shape(format!(
            "weights {:?} and importance {:?} differ",
            w.shape(),
            importance.shape()
        )));
    }
    if importance.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidArgument(
            "importance entries must be finite and >= 0".into(),
        ));
    }
    let max = importance.data().iter().copied().fold(0.0f32, f32::max);
    if max == 0.0 {
        return Err(Error::InvalidArgument(
            "importance matrix is all zero".into(),
        ));
    }
    let w = Mat64::from_matrix(w);
    check_rank(&w, r)?;
    let raw_weights = Mat64::from_matrix(importance);
    let w2: Vec<f64> = raw_weights
        .data
        .iter()
        .map(|&i| {
            let s = i / max as f64;
            s * s
        })
        .collect();

    let mut fact = Svd::compute(&w)?.truncate(r);
    let mut eig = None;
    let mut recon = fact.reconstruct();
    let mut current = weighted_objective(&w, &raw_weights, &recon);
    let mut trace = vec![current];

    for _ in 0..max_iters {
        let filled: Vec<f64> = w
            .data
            .iter()
            .zip(&recon.data)
            .zip(&w2)
            .map(|((a, b), q)| q * a + (1.0 - q) * b)
            .collect();
        let filled = Mat64::from_vec(w.rows, w.cols, filled);
        let (next_fact, next_eig) = gram_truncated_svd(&filled, r, eig.as_ref())?;
        eig = Some(next_eig);
        let next_recon = next_fact.reconstruct();
        let next = weighted_objective(&w, &raw_weights, &next_recon);
        if next > current {
            // Round-off only; keep the better iterate.
            trace.push(current);
            break;
        }
        trace.push(next);
        let change = (current - next) / current.max(f64::MIN_POSITIVE);
        fact = next_fact;
        recon = next_recon;
        current = next;
        if change < tol {
            break;
        }
    }

    fact.objective = current;
    fact.trace = trace;
    Ok(fact)
}
