//! Dense row-major `f32` arrays and the handful of kernels used by the
//! evaluator: matrix product, im2col lowering, pooling and activations.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor".into()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `(C, H, W)`; a rank-1 tensor is `(C, 1, 1)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [c] => Ok((c, 1, 1)),
            _ => Err(Error::Shape(format!(
                "expected a (C, H, W) tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("degenerate matrix {rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(keep.len() * self.cols);
        for &r in keep {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: keep.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(keep.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(keep.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: keep.len(),
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f32 {
        frobenius_norm(self)
    }

    /// Matrix-vector product with an implicit trailing `1` appended to `x`
    /// when `x` is one shorter than the column count.
    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        let with_bias = x.len() + 1 == self.cols;
        if !with_bias && x.len() != self.cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let dot: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                if with_bias {
                    dot + row[self.cols - 1]
                } else {
                    dot
                }
            })
            .collect())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Spatial size after a sliding window, or `None` if the window does not fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lowers a `(C, H, W)` input into a `(C*kh*kw + 1) x (H_out*W_out)` patch
/// matrix. Row order is channel-major then kernel row then kernel column; the
/// last row is all ones so a bias column in the weight matrix applies.
pub fn im2col(input: &Tensor, kernel: (usize, usize), stride: usize, pad: usize) -> Result<Matrix> {
    let (c, h, w) = input.chw()?;
    let (kh, kw) = kernel;
    let (oh, ow) = match (
        conv_output_dim(h, kh, stride, pad),
        conv_output_dim(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"
            )))
        }
    };
    let cols = oh * ow;
    let rows = c * kh * kw + 1;
    let mut data = vec![0.0f32; rows * cols];
    let x = input.data();
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut data[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    data[(rows - 1) * cols..].fill(1.0);
    Ok(Matrix { rows, cols, data })
}

fn pool2d(
    input: &Tensor,
    window: usize,
    stride: usize,
    init: f32,
    fold: impl Fn(f32, f32) -> f32,
    finish: impl Fn(f32) -> f32,
) -> Result<Tensor> {
    if input.is_empty() {
        return Err(Error::Empty("pooling input"));
    }
    let (c, h, w) = input.chw()?;
    let (oh, ow) = match (
        conv_output_dim(h, window, stride, 0),
        conv_output_dim(w, window, stride, 0),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Shape(format!(
                "pool window {window} stride {stride} does not fit {h}x{w}"
            )))
        }
    };
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = init;
                for dy in 0..window {
                    let row = (ch * h + oy * stride + dy) * w + ox * stride;
                    for v in &x[row..row + window] {
                        acc = fold(acc, *v);
                    }
                }
                out.push(finish(acc));
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, oh, ow], out))
}

pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    pool2d(input, window, stride, f32::NEG_INFINITY, f32::max, |v| v)
}

pub fn avgpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let area = (window * window) as f32;
    pool2d(input, window, stride, 0.0, |a, b| a + b, |v| v / area)
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor::from_raw(
        t.shape.clone(),
        t.data.iter().map(|&v| v.max(0.0)).collect(),
    )
}

pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| ((x - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| (e / sum) as f32).collect())
}

pub fn frobenius_norm(m: &Matrix) -> f32 {
    m.data
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(v: &[f32]) -> Result<usize> {
    if v.is_empty() {
        return Err(Error::Empty("argmax input"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for p in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, p) as f64 * b.get(p, j) as f64;
                }
            }
        }
        out
    }

    /// Direct sliding-window convolution, independent of the im2col path.
    fn direct_conv(
        x: &Tensor,
        weights: &[f32],
        filters: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f32> {
        let (c, h, w) = x.chw().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let per_filter = c * k * k + 1;
        let mut out = vec![0.0; filters * oh * ow];
        for f in 0..filters {
            let wf = &weights[f * per_filter..(f + 1) * per_filter];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = wf[per_filter - 1] as f64;
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = x.data()[(ch * h + iy as usize) * w + ix as usize];
                                acc += (wf[(ch * k + ki) * k + kj] * v) as f64;
                            }
                        }
                    }
                    out[(f * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - e).abs() <= 1e-5);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&Matrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn im2col_single_patch() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let cols = im2col(&x, (3, 3), 1, 0).unwrap();
        assert_eq!(cols.shape(), (10, 1));
        let mut expected: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        expected.push(1.0);
        assert_eq!(cols.data(), expected.as_slice());
    }

    #[test]
    fn im2col_disjoint_tiling() {
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let cols = im2col(&x, (2, 2), 2, 0).unwrap();
        assert_eq!(cols.shape(), (5, 4));
        let t = cols.transpose();
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0, 1.0]);
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0, 1.0]);
        assert_eq!(t.row(2), &[8.0, 9.0, 12.0, 13.0, 1.0]);
        assert_eq!(t.row(3), &[10.0, 11.0, 14.0, 15.0, 1.0]);
    }

    #[test]
    fn im2col_degenerate_output() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(im2col(&x, (3, 3), 1, 0).is_err());
    }

    #[test]
    fn im2col_conv_matches_direct_conv_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::new(
            vec![3, 8, 8],
            (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        for k in [1, 3] {
            for stride in [1, 2, 3] {
                for pad in [0, 1, 2] {
                    let filters = 4;
                    let w = random_matrix(&mut rng, filters, 3 * k * k + 1);
                    let cols = im2col(&x, (k, k), stride, pad).unwrap();
                    let got = w.matmul(&cols).unwrap();
                    let expected = direct_conv(&x, w.data(), filters, k, stride, pad);
                    assert_eq!(got.len(), expected.len());
                    for (g, e) in got.data().iter().zip(&expected) {
                        assert!((g - e).abs() <= 1e-5, "k={k} s={stride} p={pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn elementwise_kernels() {
        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
        let p = Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap();
        let pooled = maxpool2d(&p, 2, 2).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 1]);
        assert_eq!(pooled.data(), &[5.0]);
        assert_eq!(avgpool2d(&p, 2, 2).unwrap().data(), &[2.75]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]).unwrap(), 1);
        assert!(argmax(&[]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            grid in proptest::collection::vec(-1280i32..1280, 1..16),
            shift in -50i32..50,
        ) {
            // Dyadic grid so that adding the shift is exact in f32.
            let logits: Vec<f32> = grid.iter().map(|&g| g as f32 / 64.0).collect();
            let shift = shift as f32;
            let p = softmax(&logits).unwrap();
            let total: f64 = p.iter().map(|&v| v as f64).sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-6);
            let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                proptest::prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, k, m, p) = (
                rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..8),
            );
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, m);
            let c = random_matrix(&mut rng, m, p);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            for (x, y) in left.data().iter().zip(right.data()) {
                proptest::prop_assert!((x - y).abs() / scale <= 1e-4);
            }
        }
    }
}
