//! Network topology, per-layer parameters and graph bookkeeping.
//!
//! A parametric layer `k` with `N_k` filters stores a single matrix of shape
//! `N_k x (C_k*h_k*w_k + 1)` (conv) or `N_k x (inputs + 1)` (fc): the last
//! column is the bias, applied through the all-ones row that `im2col` appends.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coreset::CoresetLayer;
use crate::error::{Error, Result};
use crate::tensor::{conv_output_dim, Matrix, Tensor};

/// Reserved predecessor id naming the network input.
pub const INPUT_ID: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub filters: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Columns of the weight matrix, bias included.
    pub fn weight_cols(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcGeometry {
    pub outputs: usize,
    #[serde(rename = "input_dim")]
    pub inputs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv(ConvGeometry),
    Fc(FcGeometry),
    Relu,
    Maxpool(PoolGeometry),
    Avgpool(PoolGeometry),
    Flatten,
    Softmax,
    ResidualAdd,
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::Fc(_))
    }

    /// `(N_k, columns)` of the weight matrix for parametric layers.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match self {
            LayerKind::Conv(g) => Some((g.filters, g.weight_cols())),
            LayerKind::Fc(g) => Some((g.outputs, g.inputs + 1)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Fc(_) => "fc",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool(_) => "maxpool",
            LayerKind::Avgpool(_) => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
            LayerKind::ResidualAdd => "residual-add",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// Parameters of one conv/fc layer: either the dense weight matrix or a
/// factored `mixer * basis` pair evaluated without densifying.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense(Matrix),
    Factored(CoresetLayer),
}

impl LayerParams {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerParams::Dense(w) => w.shape(),
            LayerParams::Factored(c) => c.shape(),
        }
    }

    /// Applies the layer to a `(cols x L)` patch matrix.
    pub fn apply_cols(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            LayerParams::Dense(w) => w.matmul(x),
            LayerParams::Factored(c) => c.mixer().matmul(&c.basis().matmul(x)?),
        }
    }

    pub fn dense(&self) -> Matrix {
        match self {
            LayerParams::Dense(w) => w.clone(),
            LayerParams::Factored(c) => c.densify(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerParams::Dense(w) => w.len(),
            LayerParams::Factored(c) => c.param_count(),
        }
    }
}

/// Where a removed output channel of some layer lands in a downstream
/// parametric layer: channel `c` owns weight columns `c*block .. (c+1)*block`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelConsumer {
    pub layer: usize,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, LayerParams>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl NetworkSpec {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, LayerParams>,
    ) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
            params,
            metadata: Default::default(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.layer_index(id)
            .map(|i| &self.layers[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{id}`")))
    }

    /// Indices of conv/fc layers, in topological order.
    pub fn parametric_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.is_parametric())
            .collect()
    }

    pub fn params_of(&self, id: &str) -> Result<&LayerParams> {
        self.params
            .get(id)
            .ok_or_else(|| Error::Validation(format!("layer `{id}` has no weights")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(LayerParams::param_count).sum()
    }

    /// Parameter count the layer would have if stored densely.
    pub fn dense_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.kind.weight_shape())
            .map(|(r, c)| r * c)
            .sum()
    }

    pub fn class_count(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        Ok(shapes.last().map_or(0, |s| s.iter().product()))
    }

    /// Indices of the layers that read layer `idx`'s output.
    pub fn consumers(&self, idx: usize) -> Vec<usize> {
        let id = &self.layers[idx].id;
        (idx + 1..self.layers.len())
            .filter(|&j| self.layers[j].inputs.iter().any(|i| i == id))
            .collect()
    }

    fn input_indices(&self, idx: usize) -> Result<Vec<Option<usize>>> {
        self.layers[idx]
            .inputs
            .iter()
            .map(|name| {
                if name == INPUT_ID {
                    return Ok(None);
                }
                match self.layers[..idx].iter().position(|l| &l.id == name) {
                    Some(j) => Ok(Some(j)),
                    None => Err(Error::Validation(format!(
                        "layer `{}` reads `{name}`, which is not an earlier layer",
                        self.layers[idx].id
                    ))),
                }
            })
            .collect()
    }

    /// Predecessor layer indices (`None` for the network input).
    pub fn inputs_of(&self, idx: usize) -> Result<Vec<Option<usize>>> {
        self.input_indices(idx)
    }

    /// Output shape of every layer, checking geometry along each edge.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let preds = self.input_indices(idx)?;
            let expected_inputs = if layer.kind == LayerKind::ResidualAdd {
                2
            } else {
                1
            };
            if preds.len() != expected_inputs {
                return Err(Error::Validation(format!(
                    "layer `{}` ({}) needs {expected_inputs} input(s), has {}",
                    layer.id,
                    layer.kind.name(),
                    preds.len()
                )));
            }
            let in_shapes: Vec<&Vec<usize>> = preds
                .iter()
                .map(|p| match p {
                    Some(j) => &shapes[*j],
                    None => &self.input_shape,
                })
                .collect();
            let x = in_shapes[0];
            let bad = |msg: String| Error::Validation(format!("layer `{}`: {msg}", layer.id));
            let out = match &layer.kind {
                LayerKind::Conv(g) => {
                    let [c, h, w] = x[..] else {
                        return Err(bad(format!("conv needs a (C,H,W) input, got {x:?}")));
                    };
                    if c != g.channels {
                        return Err(bad(format!(
                            "expects {} channels, input has {c}",
                            g.channels
                        )));
                    }
                    match (
                        conv_output_dim(h, g.kernel_h, g.stride, g.pad),
                        conv_output_dim(w, g.kernel_w, g.stride, g.pad),
                    ) {
                        (Some(oh), Some(ow)) if g.filters > 0 => vec![g.filters, oh, ow],
                        _ => return Err(bad("kernel does not fit input".into())),
                    }
                }
                LayerKind::Fc(g) => {
                    let n: usize = x.iter().product();
                    if n != g.inputs {
                        return Err(bad(format!("expects {} inputs, got {n}", g.inputs)));
                    }
                    if g.outputs == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    vec![g.outputs]
                }
                LayerKind::Maxpool(p) | LayerKind::Avgpool(p) => {
                    let [c, h, w] = x[..] else {
                        return Err(bad(format!("pooling needs a (C,H,W) input, got {x:?}")));
                    };
                    match (
                        conv_output_dim(h, p.window, p.stride, 0),
                        conv_output_dim(w, p.window, p.stride, 0),
                    ) {
                        (Some(oh), Some(ow)) => vec![c, oh, ow],
                        _ => return Err(bad("pool window does not fit input".into())),
                    }
                }
                LayerKind::Flatten => vec![x.iter().product()],
                LayerKind::Relu | LayerKind::Softmax => x.clone(),
                LayerKind::ResidualAdd => {
                    if in_shapes[0] != in_shapes[1] {
                        return Err(bad(format!(
                            "residual inputs differ: {:?} vs {:?}",
                            in_shapes[0], in_shapes[1]
                        )));
                    }
                    x.clone()
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Input shape seen by each layer (first input for residual-add).
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let outs = self.output_shapes()?;
        (0..self.layers.len())
            .map(|i| {
                Ok(match self.input_indices(i)?[0] {
                    Some(j) => outs[j].clone(),
                    None => self.input_shape.clone(),
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Validation(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Validation("network has no layers".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            if l.id == INPUT_ID || !seen.insert(l.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate or reserved layer id `{}`",
                    l.id
                )));
            }
        }
        self.output_shapes()?;
        let last = self.layers.len() - 1;
        for i in 0..last {
            if self.consumers(i).is_empty() {
                return Err(Error::Validation(format!(
                    "layer `{}` is not consumed; the graph must have a single output",
                    self.layers[i].id
                )));
            }
        }
        for l in &self.layers {
            match (l.kind.weight_shape(), self.params.get(&l.id)) {
                (Some(expected), Some(p)) => {
                    if p.shape() != expected {
                        return Err(Error::Validation(format!(
                            "weights of `{}` are {:?}, geometry needs {:?}",
                            l.id,
                            p.shape(),
                            expected
                        )));
                    }
                    let finite = match p {
                        LayerParams::Dense(w) => w.is_finite(),
                        LayerParams::Factored(c) => c.mixer().is_finite() && c.basis().is_finite(),
                    };
                    if !finite {
                        return Err(Error::NonFinite(format!("weights of `{}`", l.id)));
                    }
                }
                (Some(_), None) => {
                    return Err(Error::Validation(format!(
                        "layer `{}` has no weights",
                        l.id
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::Validation(format!(
                        "non-parametric layer `{}` carries weights",
                        l.id
                    )))
                }
                (None, None) => {}
            }
        }
        if self.params.len() != self.parametric_layers().len() {
            return Err(Error::Validation(
                "weights present for unknown layers".into(),
            ));
        }
        Ok(())
    }

    /// Parametric layers that read layer `idx`'s output channels, with the
    /// number of weight columns each channel occupies in them. Fails when the
    /// channels reach a residual-add, a softmax or the network output, since
    /// removing them there has no well-defined cascade.
    pub fn channel_consumers(&self, idx: usize) -> Result<Vec<ChannelConsumer>> {
        let shapes = self.output_shapes()?;
        let id = &self.layers[idx].id;
        let mut out = Vec::new();
        // (layer index, column block carried so far)
        let mut stack: Vec<(usize, usize)> = vec![(idx, 1)];
        while let Some((from, block)) = stack.pop() {
            let consumers = self.consumers(from);
            if consumers.is_empty() {
                return Err(Error::Validation(format!(
                    "channels of `{id}` reach the network output"
                )));
            }
            for j in consumers {
                let layer = &self.layers[j];
                match &layer.kind {
                    LayerKind::Conv(g) => out.push(ChannelConsumer {
                        layer: j,
                        block: block * g.kernel_h * g.kernel_w,
                    }),
                    LayerKind::Fc(_) => {
                        let spatial: usize = shapes[from].iter().skip(1).product();
                        let block = if shapes[from].len() > 1 {
                            spatial
                        } else {
                            block
                        };
                        out.push(ChannelConsumer { layer: j, block });
                    }
                    LayerKind::Flatten => {
                        let spatial: usize = shapes[from].iter().skip(1).product();
                        let block = if shapes[from].len() > 1 {
                            spatial
                        } else {
                            block
                        };
                        stack.push((j, block));
                    }
                    LayerKind::Relu | LayerKind::Maxpool(_) | LayerKind::Avgpool(_) => {
                        stack.push((j, block))
                    }
                    LayerKind::ResidualAdd | LayerKind::Softmax => {
                        return Err(Error::Validation(format!(
                            "channels of `{id}` feed `{}` ({})",
                            layer.id,
                            layer.kind.name()
                        )))
                    }
                }
            }
        }
        out.sort_by_key(|c| c.layer);
        out.dedup();
        Ok(out)
    }

    /// Whether whole output filters of layer `idx` can be removed.
    pub fn is_prunable(&self, idx: usize) -> bool {
        self.layers[idx].kind.is_parametric() && self.channel_consumers(idx).is_ok()
    }

    /// The layer whose output statistics describe layer `idx`'s filters:
    /// the following ReLU when it is the sole consumer, else the layer itself.
    pub fn stats_tap(&self, idx: usize) -> usize {
        match self.consumers(idx).as_slice() {
            [j] if self.layers[*j].kind == LayerKind::Relu => *j,
            _ => idx,
        }
    }

    /// Copy with every factored layer replaced by its dense product.
    pub fn densified(&self) -> NetworkSpec {
        let params = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), LayerParams::Dense(p.dense())))
            .collect();
        NetworkSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params,
            metadata: self.metadata.clone(),
        }
    }
}

/// Labelled evaluation samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub samples: Vec<(Tensor, usize)>,
}

impl EvalSet {
    pub fn new(
        input_shape: Vec<usize>,
        class_count: usize,
        samples: Vec<(Tensor, usize)>,
    ) -> Result<Self> {
        let set = Self {
            input_shape,
            class_count,
            samples,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        for (i, (x, label)) in self.samples.iter().enumerate() {
            if x.shape() != self.input_shape.as_slice() {
                return Err(Error::Validation(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    x.shape(),
                    self.input_shape
                )));
            }
            if *label >= self.class_count {
                return Err(Error::Validation(format!(
                    "sample {i} has label {label} >= class count {}",
                    self.class_count
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Subset with the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> EvalSet {
        EvalSet {
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
pub(crate) mod testnets {
    //! Small hand-built networks shared by unit tests.
    use super::*;

    pub fn conv(
        id: &str,
        input: &str,
        filters: usize,
        channels: usize,
        k: usize,
        pad: usize,
    ) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::Conv(ConvGeometry {
                filters,
                channels,
                kernel_h: k,
                kernel_w: k,
                stride: 1,
                pad,
            }),
            inputs: vec![input.into()],
        }
    }

    pub fn fc(id: &str, input: &str, outputs: usize, inputs: usize) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            kind: LayerKind::Fc(FcGeometry { outputs, inputs }),
            inputs: vec![input.into()],
        }
    }

    pub fn simple(id: &str, input: &str, kind: LayerKind) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            kind,
            inputs: vec![input.into()],
        }
    }

    pub fn random_matrix(seed: u64, rows: usize, cols: usize, scale: f32) -> Matrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.gen_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    }

    /// conv(1->4,3x3,pad1) relu maxpool2 flatten fc(16->6) relu fc(6->3)
    pub fn tiny_cnn(seed: u64) -> NetworkSpec {
        let layers = vec![
            conv("conv1", INPUT_ID, 4, 1, 3, 1),
            simple("relu1", "conv1", LayerKind::Relu),
            simple(
                "pool1",
                "relu1",
                LayerKind::Maxpool(PoolGeometry {
                    window: 2,
                    stride: 2,
                }),
            ),
            simple("flat", "pool1", LayerKind::Flatten),
            fc("fc1", "flat", 6, 16),
            simple("relu2", "fc1", LayerKind::Relu),
            fc("fc2", "relu2", 3, 6),
        ];
        let mut params = BTreeMap::new();
        params.insert(
            "conv1".into(),
            LayerParams::Dense(random_matrix(seed, 4, 10, 1.0)),
        );
        params.insert(
            "fc1".into(),
            LayerParams::Dense(random_matrix(seed + 1, 6, 17, 0.5)),
        );
        params.insert(
            "fc2".into(),
            LayerParams::Dense(random_matrix(seed + 2, 3, 7, 0.5)),
        );
        NetworkSpec::new(vec![1, 4, 4], layers, params).unwrap()
    }

    pub fn random_evalset(seed: u64, shape: &[usize], classes: usize, count: usize) -> EvalSet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len: usize = shape.iter().product();
        let samples = (0..count)
            .map(|_| {
                let x = Tensor::new(
                    shape.to_vec(),
                    (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
                .unwrap();
                (x, rng.gen_range(0..classes))
            })
            .collect();
        EvalSet::new(shape.to_vec(), classes, samples).unwrap()
    }
}
