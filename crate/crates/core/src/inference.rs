//! Forward evaluation, activation statistics and top-1 accuracy.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{EvalSet, LayerKind, NetworkSpec};
use crate::tensor::{argmax, avgpool2d, im2col, maxpool2d, relu, softmax, Matrix, Tensor};

/// Runs the network and returns the final layer's output (class scores).
pub fn forward(net: &NetworkSpec, input: &Tensor) -> Result<Vec<f32>> {
    let (scores, _) = forward_taps(net, input, &[])?;
    Ok(scores)
}

/// Runs the network, additionally returning the outputs of the `taps` layers
/// (by index, in the order requested).
pub fn forward_taps(
    net: &NetworkSpec,
    input: &Tensor,
    taps: &[usize],
) -> Result<(Vec<f32>, Vec<Tensor>)> {
    if input.shape() != net.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "input shape {:?}, network expects {:?}",
            input.shape(),
            net.input_shape
        )));
    }
    let mut outputs: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    // Last index at which each layer's output is still needed.
    let mut last_use: Vec<usize> = (0..net.layers.len()).collect();
    for (j, _) in net.layers.iter().enumerate() {
        for p in net.inputs_of(j)?.into_iter().flatten() {
            last_use[p] = last_use[p].max(j);
        }
    }
    for &t in taps {
        last_use[t] = usize::MAX;
    }
    let last = net.layers.len() - 1;
    last_use[last] = usize::MAX;

    for (idx, layer) in net.layers.iter().enumerate() {
        let preds = net.inputs_of(idx)?;
        let fetch = |p: Option<usize>| -> Result<&Tensor> {
            match p {
                None => Ok(input),
                Some(j) => outputs[j]
                    .as_ref()
                    .ok_or_else(|| Error::Shape(format!("output of layer {j} unavailable"))),
            }
        };
        let x = fetch(preds[0])?;
        let mid_graph = |e: Error| match e {
            Error::Shape(msg) => Error::Shape(format!("at layer `{}`: {msg}", layer.id)),
            other => other,
        };
        let out = match &layer.kind {
            LayerKind::Conv(g) => {
                let cols =
                    im2col(x, (g.kernel_h, g.kernel_w), g.stride, g.pad).map_err(mid_graph)?;
                let (_, h, w) = x.chw()?;
                let oh = (h + 2 * g.pad - g.kernel_h) / g.stride + 1;
                let ow = (w + 2 * g.pad - g.kernel_w) / g.stride + 1;
                let y = net
                    .params_of(&layer.id)?
                    .apply_cols(&cols)
                    .map_err(mid_graph)?;
                Tensor::from_raw(vec![y.rows(), oh, ow], y.into_data())
            }
            LayerKind::Fc(_) => {
                let mut col = x.data().to_vec();
                col.push(1.0);
                let n = col.len();
                let col = Matrix::new(n, 1, col)?;
                let y = net
                    .params_of(&layer.id)?
                    .apply_cols(&col)
                    .map_err(mid_graph)?;
                Tensor::from_raw(vec![y.rows()], y.into_data())
            }
            LayerKind::Relu => relu(x),
            LayerKind::Maxpool(p) => maxpool2d(x, p.window, p.stride).map_err(mid_graph)?,
            LayerKind::Avgpool(p) => avgpool2d(x, p.window, p.stride).map_err(mid_graph)?,
            LayerKind::Flatten => Tensor::from_raw(vec![x.len()], x.data().to_vec()),
            LayerKind::Softmax => Tensor::from_raw(x.shape().to_vec(), softmax(x.data())?),
            LayerKind::ResidualAdd => {
                let y = fetch(preds[1])?;
                if x.shape() != y.shape() {
                    return Err(Error::Shape(format!(
                        "at layer `{}`: residual inputs {:?} and {:?}",
                        layer.id,
                        x.shape(),
                        y.shape()
                    )));
                }
                Tensor::from_raw(
                    x.shape().to_vec(),
                    x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect(),
                )
            }
        };
        outputs[idx] = Some(out);
        for p in preds.into_iter().flatten() {
            if last_use[p] == idx {
                outputs[p] = None;
            }
        }
    }
    let tapped = taps
        .iter()
        .map(|&t| outputs[t].clone().expect("tapped output retained"))
        .collect();
    let scores = outputs[last].take().expect("final output").into_data();
    Ok((scores, tapped))
}

/// Top-1 predicted class for every sample, in sample order.
pub fn predictions(net: &NetworkSpec, eval: &EvalSet, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .par_iter()
        .map(|&i| argmax(&forward(net, &eval.samples[i].0)?))
        .collect()
}

/// Sample indices of a seeded subset of `ceil(s * len)` samples drawn
/// without replacement, returned in ascending order.
pub fn subset_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if len == 0 {
        return Err(Error::EmptyEvalSet);
    }
    let count = ((fraction * len as f64).ceil() as usize).clamp(1, len);
    if count == len {
        return Ok((0..len).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Fraction of the listed samples classified correctly.
pub fn accuracy_on(net: &NetworkSpec, eval: &EvalSet, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("accuracy subset"));
    }
    let preds = predictions(net, eval, indices)?;
    let correct = preds
        .iter()
        .zip(indices)
        .filter(|(p, &i)| **p == eval.samples[i].1)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Top-1 accuracy over a seeded random `fraction` of the evaluation set.
pub fn accuracy(net: &NetworkSpec, eval: &EvalSet, fraction: f64, seed: u64) -> Result<f64> {
    let idx = subset_indices(eval.len(), fraction, seed)?;
    accuracy_on(net, eval, &idx)
}

/// How a filter's response on one sample is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Statistic {
    /// Maximum over spatial positions (the raw value for fc layers).
    #[default]
    MaxPooled,
    /// Frobenius norm of the whole feature map.
    FeatureMapNorm,
}

/// Per-sample, per-filter activation scalars of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub layer_id: String,
    /// `S x N_k`; entry `(j, f)` is filter `f`'s scalar response to sample `j`.
    pub samples: Matrix,
}

impl ActivationStats {
    pub fn new(layer_id: impl Into<String>, samples: Matrix) -> Self {
        Self {
            layer_id: layer_id.into(),
            samples,
        }
    }

    pub fn filter_count(&self) -> usize {
        self.samples.cols()
    }

    /// Mean magnitude per filter, `(1/T) sum_j |a_fj|`.
    pub fn mean_norms(&self) -> Vec<f64> {
        column_means(&self.samples, |v| v.abs())
    }

    /// Mean squared magnitude per filter; the pruning ranking statistic.
    pub fn mean_squared_norms(&self) -> Vec<f64> {
        column_means(&self.samples, |v| v * v)
    }

    /// Mean norms normalized to sum to one.
    pub fn importance(&self) -> Result<Vec<f64>> {
        let means = self.mean_norms();
        let total: f64 = means.iter().sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::Validation(format!(
                "layer `{}` has no non-zero activations; importance undefined",
                self.layer_id
            )));
        }
        Ok(means.into_iter().map(|m| m / total).collect())
    }
}

fn column_means(m: &Matrix, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut sums = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (s, &v) in sums.iter_mut().zip(m.row(r)) {
            *s += f(v as f64);
        }
    }
    let t = m.rows() as f64;
    sums.into_iter().map(|s| s / t).collect()
}

/// Records per-filter scalars for a conv/fc layer over the whole set. The tap
/// point is the following ReLU when one directly consumes the layer.
pub fn record_stats(
    net: &NetworkSpec,
    eval: &EvalSet,
    layer_id: &str,
    statistic: Statistic,
) -> Result<ActivationStats> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let idx = net
        .layer_index(layer_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{layer_id}`")))?;
    if !net.layers[idx].kind.is_parametric() {
        return Err(Error::InvalidArgument(format!(
            "layer `{layer_id}` has no filters"
        )));
    }
    let tap = net.stats_tap(idx);
    let rows: Vec<Vec<f32>> = eval
        .samples
        .par_iter()
        .map(|(x, _)| {
            let (_, mut tapped) = forward_taps(net, x, &[tap])?;
            Ok(filter_scalars(&tapped.remove(0), statistic))
        })
        .collect::<Result<_>>()?;
    Ok(ActivationStats::new(layer_id, Matrix::from_rows(&rows)?))
}

fn filter_scalars(t: &Tensor, statistic: Statistic) -> Vec<f32> {
    let c = t.shape()[0];
    let per: usize = t.len() / c;
    t.data()
        .chunks(per)
        .map(|map| match statistic {
            Statistic::MaxPooled => map.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            Statistic::FeatureMapNorm => map
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt() as f32,
        })
        .collect()
}
