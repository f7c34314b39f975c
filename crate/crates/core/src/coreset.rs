//! Coreset layers: a weight matrix `W` (`N x P+1`) stored as `M * B` with a
//! mixer `M` (`N x Ñ`) and a basis `B` (`Ñ x P+1`) of coreset filters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decomp::{self, Factorization, Mat64, Svd};
use crate::error::{Error, Result};
use crate::inference::ActivationStats;
use crate::tensor::Matrix;

/// Entries below this magnitude count as structural zeros after a solve.
pub const ZERO_THRESHOLD: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Truncated SVD.
    K,
    /// Structured sparse factorization.
    S,
    /// Activation-weighted low-rank factorization.
    A,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::K => "k",
            Method::S => "s",
            Method::A => "a",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(Method::K),
            "s" => Ok(Method::S),
            "a" => Ok(Method::A),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: decomp::DEFAULT_TOL,
            max_iters: decomp::DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoresetLayer {
    layer_id: String,
    method: Method,
    mixer: Matrix,
    basis: Matrix,
    dropped_rows: Vec<usize>,
    dropped_cols: Vec<usize>,
}

impl CoresetLayer {
    /// Packages a factor pair. Near-zero mixer rows and basis columns are
    /// zeroed exactly and recorded as dropped; components whose mixer column
    /// or basis row vanishes entirely are removed from the rank.
    pub fn new(
        layer_id: impl Into<String>,
        method: Method,
        mixer: Matrix,
        basis: Matrix,
    ) -> Result<Self> {
        if mixer.cols() != basis.rows() {
            return Err(Error::Shape(format!(
                "mixer {:?} and basis {:?} do not chain",
                mixer.shape(),
                basis.shape()
            )));
        }
        let mut mixer = mixer;
        let mut basis = basis;
        for v in mixer
            .data_mut()
            .iter_mut()
            .chain(basis.data_mut().iter_mut())
        {
            if v.abs() < ZERO_THRESHOLD {
                *v = 0.0;
            }
        }
        let live: Vec<usize> = (0..mixer.cols())
            .filter(|&m| {
                (0..mixer.rows()).any(|i| mixer.get(i, m) != 0.0)
                    && basis.row(m).iter().any(|&v| v != 0.0)
            })
            .collect();
        if live.is_empty() {
            return Err(Error::Solver("factorization collapsed to rank 0".into()));
        }
        if live.len() < mixer.cols() {
            mixer = mixer.select_cols(&live);
            basis = basis.select_rows(&live);
        }
        let dropped_rows = (0..mixer.rows())
            .filter(|&i| mixer.row(i).iter().all(|&v| v == 0.0))
            .collect();
        let dropped_cols = (0..basis.cols())
            .filter(|&j| (0..basis.rows()).all(|m| basis.get(m, j) == 0.0))
            .collect();
        Ok(Self {
            layer_id: layer_id.into(),
            method,
            mixer,
            basis,
            dropped_rows,
            dropped_cols,
        })
    }

    /// Rebuilds a layer from stored compact factors: `mixer` without its
    /// dropped rows, `basis` without its dropped columns.
    pub fn from_compact(
        layer_id: impl Into<String>,
        method: Method,
        shape: (usize, usize),
        compact_mixer: &Matrix,
        compact_basis: &Matrix,
        dropped_rows: Vec<usize>,
        dropped_cols: Vec<usize>,
    ) -> Result<Self> {
        let (n, p) = shape;
        let rank = compact_mixer.cols();
        let sorted_unique = |v: &[usize], bound: usize| {
            v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&i| i < bound)
        };
        if !sorted_unique(&dropped_rows, n) || !sorted_unique(&dropped_cols, p) {
            return Err(Error::Format(
                "dropped index sets must be sorted and in range".into(),
            ));
        }
        if compact_mixer.rows() + dropped_rows.len() != n
            || compact_basis.cols() + dropped_cols.len() != p
            || compact_basis.rows() != rank
        {
            return Err(Error::Format(format!(
                "compact factors {:?}/{:?} do not fit a {n}x{p} layer",
                compact_mixer.shape(),
                compact_basis.shape()
            )));
        }
        let mut mixer = Matrix::zeros(n, rank);
        let kept_rows = complement(&dropped_rows, n);
        for (ci, &i) in kept_rows.iter().enumerate() {
            for m in 0..rank {
                mixer.set(i, m, compact_mixer.get(ci, m));
            }
        }
        let mut basis = Matrix::zeros(rank, p);
        let kept_cols = complement(&dropped_cols, p);
        for m in 0..rank {
            for (cj, &j) in kept_cols.iter().enumerate() {
                basis.set(m, j, compact_basis.get(m, cj));
            }
        }
        Ok(Self {
            layer_id: layer_id.into(),
            method,
            mixer,
            basis,
            dropped_rows,
            dropped_cols,
        })
    }

    pub fn from_factorization(
        layer_id: impl Into<String>,
        method: Method,
        f: &Factorization,
    ) -> Result<Self> {
        Self::new(
            layer_id,
            method,
            f.mixer().to_matrix(),
            f.right.transpose().to_matrix(),
        )
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn mixer(&self) -> &Matrix {
        &self.mixer
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Number of coreset filters `Ñ`.
    pub fn rank(&self) -> usize {
        self.basis.rows()
    }

    /// Shape of the dense layer this approximates.
    pub fn shape(&self) -> (usize, usize) {
        (self.mixer.rows(), self.basis.cols())
    }

    pub fn dropped_rows(&self) -> &[usize] {
        &self.dropped_rows
    }

    pub fn dropped_cols(&self) -> &[usize] {
        &self.dropped_cols
    }

    pub fn kept_rows(&self) -> Vec<usize> {
        complement(&self.dropped_rows, self.mixer.rows())
    }

    pub fn kept_cols(&self) -> Vec<usize> {
        complement(&self.dropped_cols, self.basis.cols())
    }

    /// Mixer without its dropped (zero) rows.
    pub fn compact_mixer(&self) -> Matrix {
        self.mixer.select_rows(&self.kept_rows())
    }

    /// Basis without its dropped (zero) columns.
    pub fn compact_basis(&self) -> Matrix {
        self.basis.select_cols(&self.kept_cols())
    }

    pub fn densify(&self) -> Matrix {
        self.mixer
            .matmul(&self.basis)
            .expect("factors chain by construction")
    }

    /// `Ñ (P+1) + N Ñ` minus structurally dropped entries.
    pub fn param_count(&self) -> usize {
        let (n, p) = self.shape();
        let r = self.rank();
        r * (p - self.dropped_cols.len()) + r * (n - self.dropped_rows.len())
    }

    /// Bytes of the unquantized `f32` payload.
    pub fn byte_size(&self) -> usize {
        4 * self.param_count()
    }
}

fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// Dense parameter count of a coreset with rank `rank` for an `n x p` layer,
/// before any structural zeros: `rank * p + n * rank`.
pub fn coreset_size(n: usize, p: usize, rank: usize) -> usize {
    rank * p + n * rank
}

/// Row-constant weighting `I` with row `f` equal to filter `f`'s importance.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    matrix: Matrix,
}

impl ImportanceMatrix {
    pub fn new(importance: &[f64], cols: usize) -> Result<Self> {
        if importance.is_empty() || cols == 0 {
            return Err(Error::Empty("importance vector"));
        }
        let total: f64 = importance.iter().sum();
        if importance.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "importance must be non-negative and sum to 1 (sum {total})"
            )));
        }
        let data = importance
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v as f32, cols))
            .collect();
        Ok(Self {
            matrix: Matrix::new(importance.len(), cols, data)?,
        })
    }

    pub fn from_stats(stats: &ActivationStats, cols: usize) -> Result<Self> {
        Self::new(&stats.importance()?, cols)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }
}

/// Hyper-parameters of one coreset solve.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Svd,
    Sparse { lambda: f64 },
    Weighted { importance: &'a ImportanceMatrix },
}

impl Objective<'_> {
    pub fn method(&self) -> Method {
        match self {
            Objective::Svd => Method::K,
            Objective::Sparse { .. } => Method::S,
            Objective::Weighted { .. } => Method::A,
        }
    }
}

/// Runs the solver for `objective` at rank `r`.
pub fn factorize(
    w: &Matrix,
    r: usize,
    objective: Objective<'_>,
    opts: SolverOptions,
) -> Result<Factorization> {
    match objective {
        Objective::Svd => decomp::truncated_svd(w, r),
        Objective::Sparse { lambda } => decomp::sspca(w, r, lambda, opts.tol, opts.max_iters),
        Objective::Weighted { importance } => {
            decomp::weighted_lowrank_em(w, importance.matrix(), r, opts.tol, opts.max_iters)
        }
    }
}

/// Builds the coreset of layer `layer_id` with weights `w` at rank `r`.
/// Method `S` needs `lambda`; method `A` needs activation statistics.
pub fn build_coreset(
    layer_id: &str,
    w: &Matrix,
    method: Method,
    r: usize,
    lambda: Option<f64>,
    stats: Option<&ActivationStats>,
    opts: SolverOptions,
) -> Result<CoresetLayer> {
    let n = w.rows();
    if r == 0 || r >= n {
        return Err(Error::InvalidArgument(format!(
            "coreset rank {r} must lie in [1, {}) for layer `{layer_id}`",
            n
        )));
    }
    let importance;
    let objective = match method {
        Method::K => Objective::Svd,
        Method::S => Objective::Sparse {
            lambda: lambda.ok_or_else(|| Error::InvalidArgument("method S needs lambda".into()))?,
        },
        Method::A => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidArgument("method A needs activation statistics".into())
            })?;
            if stats.filter_count() != n {
                return Err(Error::Shape(format!(
                    "statistics cover {} filters, layer has {n}",
                    stats.filter_count()
                )));
            }
            importance = ImportanceMatrix::from_stats(stats, w.cols())?;
            Objective::Weighted {
                importance: &importance,
            }
        }
    };
    let f = factorize(w, r, objective, opts)?;
    CoresetLayer::from_factorization(layer_id, method, &f)
}

/// Method-`K` coresets at every rank from one SVD.
pub struct SvdLadder {
    svd: Svd,
}

impl SvdLadder {
    pub fn new(w: &Matrix) -> Result<Self> {
        Ok(Self {
            svd: Svd::compute(&Mat64::from_matrix(w))?,
        })
    }

    pub fn coreset(&self, layer_id: &str, r: usize) -> Result<CoresetLayer> {
        if r == 0 || r > self.svd.s.len() {
            return Err(Error::InvalidArgument(format!(
                "rank {r} outside [1, {}]",
                self.svd.s.len()
            )));
        }
        CoresetLayer::from_factorization(layer_id, Method::K, &self.svd.truncate(r))
    }
}
