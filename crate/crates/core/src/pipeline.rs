//! Two-stage compression: activation-based pruning of every prunable layer,
//! then coreset factorization of every layer, each stage under its own
//! accuracy budget, optionally followed by weight quantization.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info, warn};

use crate::codec::quantize_container;
use crate::container::{CompressedContainer, Payload};
use crate::coreset::{build_coreset, coreset_size, CoresetLayer, Method, SolverOptions, SvdLadder};
use crate::error::{Error, Result};
use crate::inference::{accuracy, accuracy_on, record_stats, subset_indices, Statistic};
use crate::model::{EvalSet, LayerParams, NetworkSpec};
use crate::pruning::{apply_prune, search_prune_count, PruneMask, ACCURACY_EPS};
use crate::report::{CompressionReport, LayerReport};

pub const DEFAULT_BUDGET: f64 = 0.005;
pub const DEFAULT_LAMBDA_GRID: [f64; 3] = [1.0, 1.25, 1.5];
pub const DEFAULT_QUANTIZE_SLACK: f64 = 0.005;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub prune: bool,
    pub prune_budget: f64,
    pub coreset_budget: f64,
    /// Sparsity weights tried per layer by method `S`.
    pub lambda_grid: Vec<f64>,
    /// Use one sparsity weight for every layer instead of choosing per layer.
    pub global_lambda: Option<f64>,
    /// Fraction of the evaluation set used inside the searches.
    pub subset_fraction: f64,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Bits per weight for the optional quantization stage.
    pub quantize_bits: Option<u32>,
    pub quantize_slack: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::S,
            prune: true,
            prune_budget: DEFAULT_BUDGET,
            coreset_budget: DEFAULT_BUDGET,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            global_lambda: None,
            subset_fraction: 1.0,
            seed: 0,
            solver: SolverOptions::default(),
            quantize_bits: None,
            quantize_slack: DEFAULT_QUANTIZE_SLACK,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, b) in [
            ("prune", self.prune_budget),
            ("coreset", self.coreset_budget),
            ("quantize", self.quantize_slack),
        ] {
            if b.is_nan() || b < 0.0 {
                return bad(format!("{name} budget must be >= 0, got {b}"));
            }
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!(
                "subset fraction must lie in (0, 1], got {}",
                self.subset_fraction
            ));
        }
        let grid = self.lambdas();
        if self.method == Method::S && grid.is_empty() {
            return bad("method s needs a non-empty lambda grid".into());
        }
        if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("lambda values must be finite and >= 0".into());
        }
        if let Some(bits) = self.quantize_bits {
            if !(1..=8).contains(&bits) && bits != crate::codec::BYPASS_BITS {
                return bad(format!("quantize bits must be in 1..=8 or 32, got {bits}"));
            }
        }
        Ok(())
    }

    fn lambdas(&self) -> Vec<f64> {
        match self.global_lambda {
            Some(l) => vec![l],
            None => self.lambda_grid.clone(),
        }
    }
}

/// Result of the pruning stage.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub network: NetworkSpec,
    /// One mask per parametric layer, in topological order.
    pub masks: Vec<PruneMask>,
    /// Full-set accuracy of the input network.
    pub original_accuracy: f64,
    /// Full-set accuracy of the returned network.
    pub accuracy: f64,
    pub warnings: Vec<String>,
}

fn keep_all_masks(net: &NetworkSpec) -> Vec<PruneMask> {
    net.parametric_layers()
        .into_iter()
        .map(|i| {
            let (n, _) = net.layers[i].kind.weight_shape().expect("parametric");
            PruneMask::keep_all(net.layers[i].id.clone(), n)
        })
        .collect()
}

/// Prunes layers from the largest to the smallest, each search charged
/// against the original accuracy with the whole prune budget. The result is
/// checked on the full set; if it misses the budget the input network is
/// returned unchanged with a warning.
pub fn run_prune_stage(
    net: &NetworkSpec,
    cfg: &PipelineConfig,
    eval: &EvalSet,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let original_accuracy = accuracy(net, eval, 1.0, cfg.seed)?;
    let unchanged = |warnings| PruneOutcome {
        network: net.clone(),
        masks: keep_all_masks(net),
        original_accuracy,
        accuracy: original_accuracy,
        warnings,
    };
    if !cfg.prune {
        return Ok(unchanged(Vec::new()));
    }

    let mut order: Vec<usize> = net
        .parametric_layers()
        .into_iter()
        .filter(|&i| net.is_prunable(i))
        .collect();
    let size = |i: usize| {
        let (r, c) = net.layers[i].kind.weight_shape().expect("parametric");
        r * c
    };
    order.sort_by_key(|&i| (std::cmp::Reverse(size(i)), i));

    let indices = subset_indices(eval.len(), cfg.subset_fraction, cfg.seed)?;
    let reference = accuracy_on(net, eval, &indices)?;
    let mut current = net.clone();
    let mut chosen: BTreeMap<String, PruneMask> = BTreeMap::new();
    for idx in order {
        let id = net.layers[idx].id.clone();
        let found = search_prune_count(
            &current,
            &id,
            cfg.prune_budget,
            eval,
            cfg.subset_fraction,
            cfg.seed,
            Some(reference),
            Statistic::MaxPooled,
        );
        match found {
            Ok(s) => {
                info!(
                    "prune `{id}`: keep {}/{} filters",
                    s.mask.retained(),
                    s.mask.filter_count
                );
                if !s.mask.is_identity() {
                    current = apply_prune(&current, &s.mask)?;
                }
                chosen.insert(id, s.mask);
            }
            Err(Error::Budget(msg)) => warn!("prune `{id}` skipped: {msg}"),
            Err(e) => return Err(e),
        }
    }

    let acc = accuracy(&current, eval, 1.0, cfg.seed)?;
    if acc + ACCURACY_EPS < original_accuracy - cfg.prune_budget {
        let msg = format!(
            "pruned network scores {acc:.6} on the full set, more than {} below {original_accuracy:.6}; pruning discarded",
            cfg.prune_budget
        );
        warn!("{msg}");
        return Ok(unchanged(vec![msg]));
    }
    let masks = keep_all_masks(net)
        .into_iter()
        .map(|m| chosen.remove(&m.layer_id).unwrap_or(m))
        .collect();
    Ok(PruneOutcome {
        network: current,
        masks,
        original_accuracy,
        accuracy: acc,
        warnings: Vec::new(),
    })
}

/// Result of the coreset stage.
#[derive(Clone, Debug)]
pub struct CoresetOutcome {
    /// Network with factored layers in place.
    pub network: NetworkSpec,
    /// Sparsity weight chosen per factored layer (method `S` only).
    pub lambdas: BTreeMap<String, f64>,
    /// Full-set accuracy of the input network.
    pub reference_accuracy: f64,
    /// Full-set accuracy of the returned network.
    pub accuracy: f64,
    pub warnings: Vec<String>,
}

/// Largest rank whose coreset is strictly smaller than the dense layer.
pub fn max_useful_rank(n: usize, p: usize) -> usize {
    (1..n)
        .take_while(|&r| coreset_size(n, p, r) < n * p)
        .last()
        .unwrap_or(0)
}

struct RankSearch<'a> {
    net: &'a NetworkSpec,
    eval: &'a EvalSet,
    indices: &'a [usize],
    layer_id: &'a str,
    threshold: f64,
    evaluations: usize,
}

impl RankSearch<'_> {
    fn passes(&mut self, core: &CoresetLayer) -> Result<bool> {
        let mut trial = self.net.clone();
        trial.params.insert(
            self.layer_id.to_string(),
            LayerParams::Factored(core.clone()),
        );
        self.evaluations += 1;
        Ok(accuracy_on(&trial, self.eval, self.indices)? + ACCURACY_EPS >= self.threshold)
    }

    /// Smallest rank in `1..=max_rank` that passes, assuming monotonicity,
    /// with the chosen candidate re-checked and grown linearly on failure.
    fn smallest(
        &mut self,
        max_rank: usize,
        mut build: impl FnMut(usize) -> Result<CoresetLayer>,
    ) -> Result<Option<CoresetLayer>> {
        let mut cache: BTreeMap<usize, (CoresetLayer, bool)> = BTreeMap::new();
        let mut eval_rank = |s: &mut Self, r: usize| -> Result<bool> {
            if let Some((_, ok)) = cache.get(&r) {
                return Ok(*ok);
            }
            // A factorization that collapses entirely cannot represent the
            // layer at this rank; count it as a failing candidate.
            let core = match build(r) {
                Err(Error::Solver(msg)) => {
                    debug!("`{}` rank {r}: {msg}", s.layer_id);
                    return Ok(false);
                }
                other => other?,
            };
            let ok = s.passes(&core)?;
            cache.insert(r, (core, ok));
            Ok(ok)
        };
        if max_rank == 0 || !eval_rank(self, max_rank)? {
            return Ok(None);
        }
        let (mut lo, mut hi) = (1, max_rank);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if eval_rank(self, mid)? {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let mut r = lo;
        while !eval_rank(self, r)? {
            r += 1;
        }
        debug_assert!(r <= max_rank);
        Ok(cache.remove(&r).map(|(c, _)| c))
    }
}

/// Factors every layer from the shallowest to the deepest, choosing the
/// smallest rank whose network stays within the coreset budget of the
/// input network's accuracy (later layers still dense during each search).
/// If the full-set check fails, factored layers are reverted from the
/// deepest until it passes.
pub fn run_coreset_stage(
    net: &NetworkSpec,
    cfg: &PipelineConfig,
    eval: &EvalSet,
) -> Result<CoresetOutcome> {
    cfg.validate()?;
    let reference_accuracy = accuracy(net, eval, 1.0, cfg.seed)?;
    let indices = subset_indices(eval.len(), cfg.subset_fraction, cfg.seed)?;
    let threshold = accuracy_on(net, eval, &indices)? - cfg.coreset_budget;
    let mut current = net.clone();
    let mut lambdas = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut factored: Vec<String> = Vec::new();

    for idx in net.parametric_layers() {
        let id = net.layers[idx].id.clone();
        let w = current.params_of(&id)?.dense();
        let (n, p) = w.shape();
        let max_rank = max_useful_rank(n, p);
        let mut search = RankSearch {
            net: &current,
            eval,
            indices: &indices,
            layer_id: &id,
            threshold,
            evaluations: 0,
        };
        let found: Result<Option<(CoresetLayer, Option<f64>)>> = (|| match cfg.method {
            Method::K => {
                let ladder = SvdLadder::new(&w)?;
                Ok(search
                    .smallest(max_rank, |r| ladder.coreset(&id, r))?
                    .map(|c| (c, None)))
            }
            Method::S => {
                let mut best: Option<(CoresetLayer, Option<f64>)> = None;
                for lambda in cfg.lambdas() {
                    let cand = search.smallest(max_rank, |r| {
                        build_coreset(&id, &w, Method::S, r, Some(lambda), None, cfg.solver)
                    })?;
                    if let Some(c) = cand {
                        if best
                            .as_ref()
                            .is_none_or(|(b, _)| c.param_count() < b.param_count())
                        {
                            best = Some((c, Some(lambda)));
                        }
                    }
                }
                Ok(best)
            }
            Method::A => {
                let stats = record_stats(&current, eval, &id, Statistic::MaxPooled)?;
                Ok(search
                    .smallest(max_rank, |r| {
                        build_coreset(&id, &w, Method::A, r, None, Some(&stats), cfg.solver)
                    })?
                    .map(|c| (c, None)))
            }
        })();
        let evaluations = search.evaluations;
        match found {
            Ok(Some((core, lambda))) => {
                info!(
                    "coreset `{id}`: rank {} of {n}, {} params (dense {}), {evaluations} evaluations",
                    core.rank(),
                    core.param_count(),
                    n * p
                );
                if let Some(l) = lambda {
                    lambdas.insert(id.clone(), l);
                }
                current
                    .params
                    .insert(id.clone(), LayerParams::Factored(core));
                factored.push(id);
            }
            Ok(None) => info!("coreset `{id}`: no rank below {n} fits the budget; kept dense"),
            Err(e) => {
                let msg = format!("coreset `{id}` kept dense after solver failure: {e}");
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let mut acc = accuracy(&current, eval, 1.0, cfg.seed)?;
    while acc + ACCURACY_EPS < reference_accuracy - cfg.coreset_budget {
        let Some(id) = factored.pop() else { break };
        let msg = format!(
            "coreset `{id}` reverted to dense: full-set accuracy {acc:.6} missed the budget"
        );
        warn!("{msg}");
        warnings.push(msg);
        current
            .params
            .insert(id.clone(), net.params_of(&id)?.clone());
        lambdas.remove(&id);
        acc = accuracy(&current, eval, 1.0, cfg.seed)?;
    }
    Ok(CoresetOutcome {
        network: current,
        lambdas,
        reference_accuracy,
        accuracy: acc,
        warnings,
    })
}

/// Runs pruning, coreset factorization and optional quantization, and
/// assembles the container with its report.
pub fn compress(
    net: &NetworkSpec,
    cfg: &PipelineConfig,
    eval: &EvalSet,
) -> Result<CompressedContainer> {
    cfg.validate()?;
    if eval.input_shape != net.input_shape {
        return Err(Error::Shape(format!(
            "evaluation inputs are {:?}, network expects {:?}",
            eval.input_shape, net.input_shape
        )));
    }
    if eval.class_count != net.class_count()? {
        return Err(Error::Validation(format!(
            "evaluation set has {} classes, network outputs {}",
            eval.class_count,
            net.class_count()?
        )));
    }

    let t = Instant::now();
    let pruned = run_prune_stage(net, cfg, eval)?;
    let prune_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let cored = run_coreset_stage(&pruned.network, cfg, eval)?;
    let coreset_secs = t.elapsed().as_secs_f64();

    let final_net = &cored.network;
    let mut payloads = BTreeMap::new();
    let mut rows = Vec::new();
    for idx in net.parametric_layers() {
        let id = net.layers[idx].id.clone();
        let payload = match final_net.params_of(&id)? {
            LayerParams::Dense(w) => Payload::Dense(w.clone()),
            LayerParams::Factored(c) => Payload::Coreset(c.clone()),
        };
        let (n0, p0) = net.layers[idx].kind.weight_shape().expect("parametric");
        let (n1, p1) = final_net.layers[idx]
            .kind
            .weight_shape()
            .expect("parametric");
        rows.push(LayerReport {
            layer_id: id.clone(),
            kind: net.layers[idx].kind.name().into(),
            original_filters: n0,
            retained_filters: n1,
            coreset_rank: payload.rank(),
            lambda: cored.lambdas.get(&id).copied(),
            dense_params: n0 * p0,
            pruned_params: n1 * p1,
            compressed_params: payload.param_count(),
            bytes: payload.byte_size(),
        });
        payloads.insert(id, payload);
    }
    let mut report = CompressionReport::new(rows);
    report.method = Some(cfg.method);
    report.pruned = cfg.prune;
    report.seed = cfg.seed;
    report.accuracy.original = Some(pruned.original_accuracy);
    report.accuracy.post_prune = Some(pruned.accuracy);
    report.accuracy.post_coreset = Some(cored.accuracy);
    report.warnings = pruned.warnings.into_iter().chain(cored.warnings).collect();
    report.timings.prune_secs = prune_secs;
    report.timings.coreset_secs = coreset_secs;

    let container = CompressedContainer::new(final_net, payloads, pruned.masks, report)?;
    match cfg.quantize_bits {
        Some(bits) => {
            let t = Instant::now();
            let mut q = quantize_container(&container, bits, eval, cfg.quantize_slack, cfg.seed)?;
            q.report.timings.quantize_secs = t.elapsed().as_secs_f64();
            Ok(q)
        }
        None => Ok(container),
    }
}
