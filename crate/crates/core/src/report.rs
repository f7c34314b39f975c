//! Compression statistics per layer and in total, rendered as JSON, as
//! line-oriented `key=value` pairs and as a human-readable table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coreset::Method;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub kind: String,
    /// Filters before pruning.
    pub original_filters: usize,
    /// Filters after pruning.
    pub retained_filters: usize,
    /// Coreset filters, or `None` when the layer stayed dense.
    pub coreset_rank: Option<usize>,
    pub lambda: Option<f64>,
    /// Parameters of the original dense layer.
    pub dense_params: usize,
    /// Parameters of the dense layer after pruning.
    pub pruned_params: usize,
    pub compressed_params: usize,
    /// Serialized payload bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageAccuracy {
    pub original: Option<f64>,
    pub post_prune: Option<f64>,
    pub post_coreset: Option<f64>,
    pub post_quantization: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub prune_secs: f64,
    pub coreset_secs: f64,
    pub quantize_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub method: Option<Method>,
    pub pruned: bool,
    pub seed: u64,
    pub quantize_bits: Option<u32>,
    pub layers: Vec<LayerReport>,
    pub dense_params: usize,
    pub pruned_params: usize,
    pub compressed_params: usize,
    pub bytes: usize,
    /// Bytes the same parameters take as plain `f32`.
    pub unquantized_bytes: usize,
    /// Dense parameters divided by compressed parameters.
    pub ratio: f64,
    /// Unquantized bytes divided by stored bytes.
    pub quantization_shrink: f64,
    pub accuracy: StageAccuracy,
    pub warnings: Vec<String>,
    /// Wall-clock time; excluded from serialized output so that reruns are
    /// byte-identical.
    #[serde(skip)]
    pub timings: StageTimings,
}

impl CompressionReport {
    /// Builds a report from per-layer rows, deriving every total.
    pub fn new(layers: Vec<LayerReport>) -> Self {
        let mut r = Self {
            method: None,
            pruned: false,
            seed: 0,
            quantize_bits: None,
            layers,
            dense_params: 0,
            pruned_params: 0,
            compressed_params: 0,
            bytes: 0,
            unquantized_bytes: 0,
            ratio: 1.0,
            quantization_shrink: 1.0,
            accuracy: StageAccuracy::default(),
            warnings: Vec::new(),
            timings: StageTimings::default(),
        };
        r.recompute_totals();
        r
    }

    pub fn recompute_totals(&mut self) {
        self.dense_params = self.layers.iter().map(|l| l.dense_params).sum();
        self.pruned_params = self.layers.iter().map(|l| l.pruned_params).sum();
        self.compressed_params = self.layers.iter().map(|l| l.compressed_params).sum();
        self.bytes = self.layers.iter().map(|l| l.bytes).sum();
        self.unquantized_bytes = 4 * self.compressed_params;
        self.ratio = ratio(self.dense_params, self.compressed_params);
        self.quantization_shrink = ratio(self.unquantized_bytes, self.bytes);
    }

    pub fn layer(&self, id: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    /// Checks that totals equal the per-layer sums.
    pub fn validate(&self) -> Result<()> {
        let mut fresh = self.clone();
        fresh.recompute_totals();
        let same = fresh.dense_params == self.dense_params
            && fresh.pruned_params == self.pruned_params
            && fresh.compressed_params == self.compressed_params
            && fresh.bytes == self.bytes
            && fresh.unquantized_bytes == self.unquantized_bytes
            && fresh.ratio.to_bits() == self.ratio.to_bits()
            && fresh.quantization_shrink.to_bits() == self.quantization_shrink.to_bits();
        if !same {
            return Err(Error::Validation(
                "report totals disagree with per-layer rows".into(),
            ));
        }
        Ok(())
    }

    /// Final full-set accuracy drop relative to the original network.
    pub fn total_drop(&self) -> Option<f64> {
        let a = &self.accuracy;
        let last = a.post_quantization.or(a.post_coreset).or(a.post_prune)?;
        Some(a.original? - last)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// One `key=value` per line, in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv(
            "method",
            self.method.map_or("none".into(), |m| m.to_string()),
        );
        kv("pruned", self.pruned.to_string());
        kv("seed", self.seed.to_string());
        kv("quantize_bits", opt(self.quantize_bits));
        for l in &self.layers {
            let p = format!("layer.{}", l.layer_id);
            kv(&format!("{p}.kind"), l.kind.clone());
            kv(
                &format!("{p}.original_filters"),
                l.original_filters.to_string(),
            );
            kv(
                &format!("{p}.retained_filters"),
                l.retained_filters.to_string(),
            );
            kv(&format!("{p}.coreset_rank"), opt(l.coreset_rank));
            kv(&format!("{p}.lambda"), opt(l.lambda));
            kv(&format!("{p}.dense_params"), l.dense_params.to_string());
            kv(&format!("{p}.pruned_params"), l.pruned_params.to_string());
            kv(
                &format!("{p}.compressed_params"),
                l.compressed_params.to_string(),
            );
            kv(&format!("{p}.bytes"), l.bytes.to_string());
        }
        kv("total.dense_params", self.dense_params.to_string());
        kv("total.pruned_params", self.pruned_params.to_string());
        kv(
            "total.compressed_params",
            self.compressed_params.to_string(),
        );
        kv("total.bytes", self.bytes.to_string());
        kv(
            "total.unquantized_bytes",
            self.unquantized_bytes.to_string(),
        );
        kv("ratio", self.ratio.to_string());
        kv("quantization_shrink", self.quantization_shrink.to_string());
        kv("accuracy.original", opt(self.accuracy.original));
        kv("accuracy.post_prune", opt(self.accuracy.post_prune));
        kv("accuracy.post_coreset", opt(self.accuracy.post_coreset));
        kv(
            "accuracy.post_quantization",
            opt(self.accuracy.post_quantization),
        );
        for (i, w) in self.warnings.iter().enumerate() {
            kv(&format!("warning.{i}"), w.clone());
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>7} {:>7} {:>8} {:>10} {:>10} {:>10}",
            "layer", "kind", "filters", "kept", "coreset", "dense", "compressed", "bytes"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>7} {:>7} {:>8} {:>10} {:>10} {:>10}",
                l.layer_id,
                l.kind,
                l.original_filters,
                l.retained_filters,
                l.coreset_rank.map_or("dense".into(), |r| r.to_string()),
                l.dense_params,
                l.compressed_params,
                l.bytes
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>7} {:>7} {:>8} {:>10} {:>10} {:>10}",
            "total", "", "", "", "", self.dense_params, self.compressed_params, self.bytes
        );
        let _ = writeln!(out, "parameter ratio: {:.3}x", self.ratio);
        if let Some(bits) = self.quantize_bits {
            let _ = writeln!(
                out,
                "quantized to {bits} bits without retraining: {:.3}x smaller than f32 payloads",
                self.quantization_shrink
            );
        }
        let acc = &self.accuracy;
        for (name, v) in [
            ("original", acc.original),
            ("post-prune", acc.post_prune),
            ("post-coreset", acc.post_coreset),
            ("post-quantization", acc.post_quantization),
        ] {
            if let Some(v) = v {
                let _ = writeln!(out, "accuracy {name}: {v:.6}");
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}
