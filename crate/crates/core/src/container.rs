//! The compressed artifact: topology, one payload per parametric layer, the
//! prune masks that produced it and its report.

use std::collections::BTreeMap;

use crate::codec::StoredMatrix;
use crate::coreset::{CoresetLayer, Method};
use crate::error::{Error, Result};
use crate::model::{LayerParams, LayerSpec, NetworkSpec};
use crate::pruning::PruneMask;
use crate::report::CompressionReport;
use crate::tensor::Matrix;

/// Weights of a factored layer after quantization. The basis bias column, if
/// it is not structurally zero, is kept as plain `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedCoreset {
    pub method: Method,
    pub shape: (usize, usize),
    pub dropped_rows: Vec<usize>,
    pub dropped_cols: Vec<usize>,
    /// Compact mixer.
    pub mixer: StoredMatrix,
    /// Compact basis without its bias column.
    pub basis: StoredMatrix,
    pub basis_bias: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(Matrix),
    Coreset(CoresetLayer),
    /// Weight columns quantized, bias column kept as `f32`.
    QuantizedDense {
        weights: StoredMatrix,
        bias: Vec<f32>,
    },
    QuantizedCoreset(QuantizedCoreset),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Dense(_) => "dense",
            Payload::Coreset(_) => "coreset",
            Payload::QuantizedDense { .. } => "quantized-dense",
            Payload::QuantizedCoreset(_) => "quantized-coreset",
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(
            self,
            Payload::QuantizedDense { .. } | Payload::QuantizedCoreset(_)
        )
    }

    /// Coreset rank for factored payloads.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Payload::Dense(_) | Payload::QuantizedDense { .. } => None,
            Payload::Coreset(c) => Some(c.rank()),
            Payload::QuantizedCoreset(q) => Some(q.mixer.shape().1),
        }
    }

    /// Stored parameter count (structural zeros excluded).
    pub fn param_count(&self) -> usize {
        match self {
            Payload::Dense(w) => w.len(),
            Payload::Coreset(c) => c.param_count(),
            Payload::QuantizedDense { weights, bias } => {
                let (r, c) = weights.shape();
                r * c + bias.len()
            }
            Payload::QuantizedCoreset(q) => {
                let (mr, mc) = q.mixer.shape();
                let (br, bc) = q.basis.shape();
                mr * mc + br * bc + q.basis_bias.as_ref().map_or(0, Vec::len)
            }
        }
    }

    /// Exact serialized size in bytes.
    pub fn byte_size(&self) -> usize {
        match self {
            Payload::Dense(w) => 4 * w.len(),
            Payload::Coreset(c) => c.byte_size(),
            Payload::QuantizedDense { weights, bias } => weights.byte_size() + 4 * bias.len(),
            Payload::QuantizedCoreset(q) => {
                q.mixer.byte_size()
                    + q.basis.byte_size()
                    + 4 * q.basis_bias.as_ref().map_or(0, Vec::len)
            }
        }
    }

    /// Decodes into the parameters used for inference.
    pub fn to_params(&self, layer_id: &str) -> Result<LayerParams> {
        Ok(match self {
            Payload::Dense(w) => LayerParams::Dense(w.clone()),
            Payload::Coreset(c) => LayerParams::Factored(c.clone()),
            Payload::QuantizedDense { weights, bias } => {
                let w = weights.decode()?;
                if w.rows() != bias.len() {
                    return Err(Error::Format(format!(
                        "bias length of `{layer_id}` does not match its weights"
                    )));
                }
                LayerParams::Dense(append_col(&w, bias))
            }
            Payload::QuantizedCoreset(q) => {
                let mixer = q.mixer.decode()?;
                let mut basis = q.basis.decode()?;
                if let Some(b) = &q.basis_bias {
                    if b.len() != basis.rows() {
                        return Err(Error::Format(format!(
                            "basis bias of `{layer_id}` has wrong length"
                        )));
                    }
                    basis = append_col(&basis, b);
                }
                LayerParams::Factored(CoresetLayer::from_compact(
                    layer_id,
                    q.method,
                    q.shape,
                    &mixer,
                    &basis,
                    q.dropped_rows.clone(),
                    q.dropped_cols.clone(),
                )?)
            }
        })
    }

    /// Quantizes weight matrices to `bits` per entry. Seeds are derived from
    /// `seed` so every matrix gets its own stream.
    pub fn quantize(&self, bits: u32, seed: u64) -> Result<Payload> {
        Ok(match self {
            Payload::Dense(w) => {
                let (weights, bias) = split_last_col(w);
                Payload::QuantizedDense {
                    weights: StoredMatrix::quantize(&weights, bits, seed)?,
                    bias,
                }
            }
            Payload::Coreset(c) => {
                let (n, p) = c.shape();
                let mut basis = c.compact_basis();
                let basis_bias = if c.dropped_cols().last() == Some(&(p - 1)) {
                    None
                } else {
                    let (b, bias) = split_last_col(&basis);
                    basis = b;
                    Some(bias)
                };
                Payload::QuantizedCoreset(QuantizedCoreset {
                    method: c.method(),
                    shape: (n, p),
                    dropped_rows: c.dropped_rows().to_vec(),
                    dropped_cols: c.dropped_cols().to_vec(),
                    mixer: StoredMatrix::quantize(&c.compact_mixer(), bits, seed)?,
                    basis: StoredMatrix::quantize(&basis, bits, seed.wrapping_add(1))?,
                    basis_bias,
                })
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "payload is already quantized".into(),
                ))
            }
        })
    }
}

fn split_last_col(m: &Matrix) -> (Matrix, Vec<f32>) {
    let c = m.cols();
    let weights = m.select_cols(&(0..c - 1).collect::<Vec<_>>());
    let bias = (0..m.rows()).map(|r| m.get(r, c - 1)).collect();
    (weights, bias)
}

fn append_col(m: &Matrix, col: &[f32]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols() + 1);
    for (r, &extra) in col.iter().enumerate().take(m.rows()) {
        for c in 0..m.cols() {
            out.set(r, c, m.get(r, c));
        }
        out.set(r, m.cols(), extra);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedContainer {
    network: NetworkSpec,
    payloads: BTreeMap<String, Payload>,
    pub masks: Vec<PruneMask>,
    pub report: CompressionReport,
}

impl CompressedContainer {
    /// Assembles a container from the post-pruning topology of `topology`
    /// (its parameters are ignored) and one payload per parametric layer.
    pub fn new(
        topology: &NetworkSpec,
        payloads: BTreeMap<String, Payload>,
        masks: Vec<PruneMask>,
        report: CompressionReport,
    ) -> Result<Self> {
        Self::from_parts(
            topology.input_shape.clone(),
            topology.layers.clone(),
            topology.metadata.clone(),
            payloads,
            masks,
            report,
        )
    }

    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        metadata: serde_json::Map<String, serde_json::Value>,
        payloads: BTreeMap<String, Payload>,
        masks: Vec<PruneMask>,
        report: CompressionReport,
    ) -> Result<Self> {
        let params = payloads
            .iter()
            .map(|(id, p)| Ok((id.clone(), p.to_params(id)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut network = NetworkSpec::new(input_shape, layers, params)?;
        network.metadata = metadata;
        report.validate()?;
        Ok(Self {
            network,
            payloads,
            masks,
            report,
        })
    }

    /// Dense-equivalent network used for inference (factored layers stay
    /// factored; quantized ones are decoded).
    pub fn network(&self) -> &NetworkSpec {
        &self.network
    }

    pub fn payloads(&self) -> &BTreeMap<String, Payload> {
        &self.payloads
    }

    pub fn payload(&self, id: &str) -> Option<&Payload> {
        self.payloads.get(id)
    }

    pub fn is_quantized(&self) -> bool {
        self.payloads.values().any(Payload::is_quantized)
    }

    pub fn param_count(&self) -> usize {
        self.payloads.values().map(Payload::param_count).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.payloads.values().map(Payload::byte_size).sum()
    }

    /// Replaces one payload, keeping the decoded network in sync. The report
    /// is left untouched.
    pub fn set_payload(&mut self, id: &str, payload: Payload) -> Result<()> {
        if !self.payloads.contains_key(id) {
            return Err(Error::InvalidArgument(format!(
                "container has no layer `{id}`"
            )));
        }
        let params = payload.to_params(id)?;
        let mut network = self.network.clone();
        network.params.insert(id.to_string(), params);
        network.validate()?;
        self.network = network;
        self.payloads.insert(id.to_string(), payload);
        Ok(())
    }

    /// Rewrites per-layer byte and parameter counts from the payloads.
    pub fn refresh_report_sizes(&mut self) {
        for row in &mut self.report.layers {
            if let Some(p) = self.payloads.get(&row.layer_id) {
                row.compressed_params = p.param_count();
                row.bytes = p.byte_size();
            }
        }
        self.report.recompute_totals();
    }

    /// Plain dense network with every payload multiplied out.
    pub fn densify(&self) -> NetworkSpec {
        self.network.densified()
    }
}
