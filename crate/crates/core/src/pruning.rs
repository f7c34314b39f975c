//! Activation-based filter pruning with cascading removal of the matching
//! input channels in downstream layers.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{accuracy_on, record_stats, subset_indices, ActivationStats, Statistic};
use crate::model::{EvalSet, LayerKind, LayerParams, NetworkSpec};

/// Slack for comparing accuracies that are ratios of sample counts.
pub(crate) const ACCURACY_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer_id: String,
    /// Filter count of the layer the mask was built for.
    pub filter_count: usize,
    /// Sorted indices of retained filters.
    pub keep: Vec<usize>,
}

impl PruneMask {
    pub fn new(
        layer_id: impl Into<String>,
        filter_count: usize,
        mut keep: Vec<usize>,
    ) -> Result<Self> {
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(Error::InvalidArgument("prune mask keeps no filters".into()));
        }
        if keep.last().is_some_and(|&k| k >= filter_count) {
            return Err(Error::InvalidArgument(format!(
                "prune mask index {} out of range for {filter_count} filters",
                keep.last().unwrap()
            )));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            filter_count,
            keep,
        })
    }

    pub fn keep_all(layer_id: impl Into<String>, filter_count: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            filter_count,
            keep: (0..filter_count).collect(),
        }
    }

    /// Keeps the first `count` filters of `order`.
    pub fn top(layer_id: impl Into<String>, order: &[usize], count: usize) -> Result<Self> {
        Self::new(
            layer_id,
            order.len(),
            order[..count.min(order.len())].to_vec(),
        )
    }

    pub fn retained(&self) -> usize {
        self.keep.len()
    }

    pub fn is_identity(&self) -> bool {
        self.keep.len() == self.filter_count
    }
}

/// Filter indices by descending mean squared activation; ties keep the lower
/// index first.
pub fn rank_filters(stats: &ActivationStats) -> Vec<usize> {
    let scores = stats.mean_squared_norms();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Removes the filters outside `mask.keep` from their layer and the matching
/// input columns from every downstream conv/fc layer. The bias column is
/// never touched.
pub fn apply_prune(net: &NetworkSpec, mask: &PruneMask) -> Result<NetworkSpec> {
    let idx = net
        .layer_index(&mask.layer_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{}`", mask.layer_id)))?;
    let (filters, _) = net.layers[idx].kind.weight_shape().ok_or_else(|| {
        Error::InvalidArgument(format!("layer `{}` has no filters", mask.layer_id))
    })?;
    if mask.keep.is_empty() {
        return Err(Error::InvalidArgument("prune mask keeps no filters".into()));
    }
    if mask.filter_count != filters || mask.keep.iter().any(|&k| k >= filters) {
        return Err(Error::Validation(format!(
            "mask for {} filters does not fit layer `{}` with {filters}",
            mask.filter_count, mask.layer_id
        )));
    }
    let consumers = net.channel_consumers(idx)?;

    let mut out = net.clone();
    let dense = |id: &str| -> Result<_> {
        match net.params_of(id)? {
            LayerParams::Dense(w) => Ok(w),
            LayerParams::Factored(_) => Err(Error::Validation(format!(
                "layer `{id}` is already factored; prune before compressing"
            ))),
        }
    };

    let w = dense(&mask.layer_id)?;
    out.params.insert(
        mask.layer_id.clone(),
        LayerParams::Dense(w.select_rows(&mask.keep)),
    );
    match &mut out.layers[idx].kind {
        LayerKind::Conv(g) => g.filters = mask.keep.len(),
        LayerKind::Fc(g) => g.outputs = mask.keep.len(),
        _ => unreachable!("checked parametric"),
    }

    for c in consumers {
        let id = net.layers[c.layer].id.clone();
        let w = dense(&id)?;
        let mut cols: Vec<usize> = mask
            .keep
            .iter()
            .flat_map(|&ch| ch * c.block..(ch + 1) * c.block)
            .collect();
        cols.push(w.cols() - 1);
        out.params
            .insert(id, LayerParams::Dense(w.select_cols(&cols)));
        match &mut out.layers[c.layer].kind {
            LayerKind::Conv(g) => g.channels = mask.keep.len(),
            LayerKind::Fc(g) => g.inputs = mask.keep.len() * c.block,
            _ => unreachable!("consumers are parametric"),
        }
    }
    out.validate()?;
    Ok(out)
}

/// Outcome of one layer's search.
#[derive(Clone, Debug)]
pub struct PruneSearch {
    pub mask: PruneMask,
    /// Accuracy of the pruned network on the search subset.
    pub accuracy: f64,
    pub evaluations: usize,
}

/// Smallest number of top-ranked filters whose pruned network keeps subset
/// accuracy within `budget` of `reference` (measured on `net` itself when
/// `None`). Binary search assumes the predicate is monotone in the count; the
/// result is re-verified and, if it fails, grown linearly until it passes.
#[allow(clippy::too_many_arguments)]
pub fn search_prune_count(
    net: &NetworkSpec,
    layer_id: &str,
    budget: f64,
    eval: &EvalSet,
    fraction: f64,
    seed: u64,
    reference: Option<f64>,
    statistic: Statistic,
) -> Result<PruneSearch> {
    if budget.is_nan() || budget < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "budget must be >= 0, got {budget}"
        )));
    }
    let indices = subset_indices(eval.len(), fraction, seed)?;
    let reference = match reference {
        Some(r) => r,
        None => accuracy_on(net, eval, &indices)?,
    };
    let stats = record_stats(net, eval, layer_id, statistic)?;
    let order = rank_filters(&stats);
    let n = order.len();

    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut evaluate = |count: usize| -> Result<f64> {
        if let Some(&acc) = cache.get(&count) {
            return Ok(acc);
        }
        let pruned = apply_prune(net, &PruneMask::top(layer_id, &order, count)?)?;
        let acc = accuracy_on(&pruned, eval, &indices)?;
        cache.insert(count, acc);
        Ok(acc)
    };
    let passes = |acc: f64| acc + ACCURACY_EPS >= reference - budget;

    let (mut lo, mut hi) = (1usize, n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if passes(evaluate(mid)?) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut count = lo;
    loop {
        let acc = evaluate(count)?;
        if passes(acc) {
            debug!("{layer_id}: keep {count}/{n} filters, accuracy {acc:.4} (reference {reference:.4})");
            return Ok(PruneSearch {
                mask: PruneMask::top(layer_id, &order, count)?,
                accuracy: acc,
                evaluations: cache.len(),
            });
        }
        if count == n {
            return Err(Error::Budget(format!(
                "layer `{layer_id}` misses the reference {reference:.4} even unpruned ({acc:.4}); stale reference"
            )));
        }
        count += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::forward;
    use crate::model::testnets::*;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranking_examples() {
        // squared means follow the plain means here
        let stats = ActivationStats::new("l", Matrix::from_rows(&[vec![5.0, 0.1, 3.0]]).unwrap());
        assert_eq!(rank_filters(&stats), vec![0, 2, 1]);
        let flat = ActivationStats::new(
            "l",
            Matrix::from_rows(&[vec![1.0; 4], vec![1.0; 4]]).unwrap(),
        );
        assert_eq!(rank_filters(&flat), vec![0, 1, 2, 3]);
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if n < k {
            return vec![];
        }
        let mut with: Vec<Vec<usize>> = combinations(n - 1, k - 1)
            .into_iter()
            .map(|mut c| {
                c.push(n - 1);
                c
            })
            .collect();
        with.extend(combinations(n - 1, k));
        with
    }

    #[test]
    fn top_columns_minimize_masked_residual() {
        // ||A - A (.) T||^2 over column-selection masks T with N* columns kept
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            let n = rng.gen_range(2..=6);
            let s = rng.gen_range(1..=8);
            let a =
                Matrix::new(s, n, (0..s * n).map(|_| rng.gen_range(-2.0..3.0)).collect()).unwrap();
            let order = rank_filters(&ActivationStats::new("l", a.clone()));
            let residual = |keep: &[usize]| -> f64 {
                (0..n)
                    .filter(|c| !keep.contains(c))
                    .map(|c| (0..s).map(|r| (a.get(r, c) as f64).powi(2)).sum::<f64>())
                    .sum()
            };
            for keep_n in 1..n {
                let ours = residual(&order[..keep_n]);
                let best = combinations(n, keep_n)
                    .iter()
                    .map(|c| residual(c))
                    .fold(f64::INFINITY, f64::min);
                assert!(ours <= best + 1e-9, "trial {trial}: {ours} > {best}");
            }
        }
    }

    #[test]
    fn keep_all_is_identity() {
        let net = tiny_cnn(1);
        let pruned = apply_prune(&net, &PruneMask::keep_all("conv1", 4)).unwrap();
        assert_eq!(pruned, net);
        let eval = random_evalset(3, &[1, 4, 4], 3, 10);
        for (x, _) in &eval.samples {
            assert_eq!(forward(&net, x).unwrap(), forward(&pruned, x).unwrap());
        }
    }

    #[test]
    fn cascade_shapes() {
        let net = tiny_cnn(1);
        let pruned = apply_prune(&net, &PruneMask::new("conv1", 4, vec![0, 3]).unwrap()).unwrap();
        assert_eq!(pruned.params["conv1"].shape(), (2, 10));
        // fc1 reads 4 channels x 2x2 pooled map; two channels removed
        assert_eq!(pruned.params["fc1"].shape(), (6, 17 - 2 * 4));
        assert_eq!(pruned.param_count(), net.param_count() - 2 * 10 - 6 * 8);
    }

    #[test]
    fn pruning_equals_zeroing() {
        let net = tiny_cnn(7);
        let eval = random_evalset(8, &[1, 4, 4], 3, 25);
        let mask = PruneMask::new("fc1", 6, vec![1, 2, 5]).unwrap();
        let pruned = apply_prune(&net, &mask).unwrap();
        let mut zeroed = net.clone();
        if let Some(LayerParams::Dense(w)) = zeroed.params.get_mut("fc1") {
            for r in [0, 3, 4] {
                for c in 0..w.cols() {
                    w.set(r, c, 0.0);
                }
            }
        }
        if let Some(LayerParams::Dense(w)) = zeroed.params.get_mut("fc2") {
            for r in 0..w.rows() {
                for c in [0, 3, 4] {
                    w.set(r, c, 0.0);
                }
            }
        }
        for (x, _) in &eval.samples {
            let a = forward(&pruned, x).unwrap();
            let b = forward(&zeroed, x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn zero_outgoing_filter_removal_keeps_scores() {
        let mut net = tiny_cnn(11);
        if let Some(LayerParams::Dense(w)) = net.params.get_mut("fc2") {
            for r in 0..3 {
                w.set(r, 4, 0.0);
            }
        }
        let pruned = apply_prune(
            &net,
            &PruneMask::new("fc1", 6, vec![0, 1, 2, 3, 5]).unwrap(),
        )
        .unwrap();
        let eval = random_evalset(12, &[1, 4, 4], 3, 20);
        for (x, _) in &eval.samples {
            for (u, v) in forward(&net, x)
                .unwrap()
                .iter()
                .zip(forward(&pruned, x).unwrap())
            {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn invalid_masks() {
        let net = tiny_cnn(1);
        assert!(PruneMask::new("conv1", 4, vec![]).is_err());
        assert!(PruneMask::new("conv1", 4, vec![4]).is_err());
        let mask = PruneMask::new("conv1", 4, vec![1, 2]).unwrap();
        let once = apply_prune(&net, &mask).unwrap();
        assert!(matches!(
            apply_prune(&once, &mask),
            Err(Error::Validation(_))
        ));
        // final classifier feeds the output
        assert!(apply_prune(&net, &PruneMask::new("fc2", 3, vec![0]).unwrap()).is_err());
    }

    #[test]
    fn search_degenerate_budgets() {
        let net = tiny_cnn(21);
        let eval = random_evalset(22, &[1, 4, 4], 3, 40);
        let all = search_prune_count(&net, "fc1", 1.0, &eval, 1.0, 0, None, Statistic::MaxPooled)
            .unwrap();
        assert_eq!(all.mask.retained(), 1);
        assert!(
            search_prune_count(&net, "fc1", -0.1, &eval, 1.0, 0, None, Statistic::MaxPooled)
                .is_err()
        );
        // an unreachable reference is a stale-reference error
        assert!(matches!(
            search_prune_count(
                &net,
                "fc1",
                0.0,
                &eval,
                1.0,
                0,
                Some(1.5),
                Statistic::MaxPooled
            ),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn search_matches_linear_scan() {
        let net = tiny_cnn(31);
        let eval = random_evalset(32, &[1, 4, 4], 3, 60);
        for budget in [0.0, 0.02, 0.05, 0.1] {
            let found = search_prune_count(
                &net,
                "fc1",
                budget,
                &eval,
                1.0,
                0,
                None,
                Statistic::MaxPooled,
            )
            .unwrap();
            let reference = accuracy_on(&net, &eval, &(0..60).collect::<Vec<_>>()).unwrap();
            let order =
                rank_filters(&record_stats(&net, &eval, "fc1", Statistic::MaxPooled).unwrap());
            let linear = (1..=6)
                .find(|&k| {
                    let p = apply_prune(&net, &PruneMask::top("fc1", &order, k).unwrap()).unwrap();
                    accuracy_on(&p, &eval, &(0..60).collect::<Vec<_>>()).unwrap() + ACCURACY_EPS
                        >= reference - budget
                })
                .unwrap();
            // binary search may land above the first passing count only if the
            // predicate is non-monotone; it is never below it
            assert!(found.mask.retained() >= linear);
            let p = apply_prune(&net, &found.mask).unwrap();
            let acc = accuracy_on(&p, &eval, &(0..60).collect::<Vec<_>>()).unwrap();
            assert!(acc + ACCURACY_EPS >= reference - budget);
        }
    }
}
