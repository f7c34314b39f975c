//! On-disk formats. Every file is a JSON manifest next to a binary blob with
//! the same stem and a `.bin` extension. The manifest names the blob and
//! gives byte offsets into it; all floats are little-endian `f32`,
//! row-major, in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{HuffmanTable, PackedMatrix, StoredMatrix};
use crate::container::{CompressedContainer, Payload, QuantizedCoreset};
use crate::coreset::{CoresetLayer, Method};
use crate::error::{Error, Result};
use crate::model::{EvalSet, LayerParams, LayerSpec, NetworkSpec};
use crate::pruning::PruneMask;
use crate::report::CompressionReport;
use crate::tensor::{Matrix, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const NETWORK_FORMAT: &str = "coreset-network";
const EVALSET_FORMAT: &str = "coreset-evalset";
const CONTAINER_FORMAT: &str = "coreset-container";

/// Blob path belonging to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn blob_name(manifest: &Path) -> Result<String> {
    blob_path(manifest)
        .file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", manifest.display())))
}

fn resolve_blob(manifest: &Path, name: &str) -> Result<PathBuf> {
    if name.is_empty() || Path::new(name).file_name().and_then(|n| n.to_str()) != Some(name) {
        return Err(Error::Format(format!(
            "blob name `{name}` must be a plain file name"
        )));
    }
    Ok(manifest.parent().unwrap_or(Path::new(".")).join(name))
}

/// Parses a manifest after checking its format tag and version.
fn read_manifest<T: serde::de::DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if format != expected {
        return Err(Error::Format(format!(
            "expected a `{expected}` manifest, found `{format}`"
        )));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "unsupported {expected} version {version:?}"
        )));
    }
    Ok(serde_json::from_str(&text)?)
}

/// Appends floats and raw bytes to a blob, handing out segment descriptors.
#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn floats(&mut self, values: &[f32]) -> Segment {
        let offset = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        Segment {
            offset,
            len: 4 * values.len(),
        }
    }

    fn raw(&mut self, bytes: &[u8]) -> Segment {
        let offset = self.bytes.len();
        self.bytes.extend_from_slice(bytes);
        Segment {
            offset,
            len: bytes.len(),
        }
    }
}

struct BlobReader {
    bytes: Vec<u8>,
}

impl BlobReader {
    fn slice(&self, seg: &Segment, what: &str) -> Result<&[u8]> {
        let available = self.bytes.len().saturating_sub(seg.offset);
        if available < seg.len {
            return Err(Error::SizeMismatch {
                tensor: what.to_string(),
                expected: seg.len,
                actual: available,
            });
        }
        Ok(&self.bytes[seg.offset..seg.offset + seg.len])
    }

    fn floats(&self, seg: &Segment, what: &str, count: usize) -> Result<Vec<f32>> {
        if seg.len != 4 * count {
            return Err(Error::SizeMismatch {
                tensor: what.to_string(),
                expected: 4 * count,
                actual: seg.len,
            });
        }
        let values: Vec<f32> = self
            .slice(seg, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor `{what}`")));
        }
        Ok(values)
    }

    fn matrix(&self, seg: &Segment, what: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.floats(seg, what, rows * cols)?)
    }
}

/// Requires the segments to tile the blob exactly, in order.
fn check_tiling(segments: &[(String, Segment)], blob_len: usize) -> Result<()> {
    let mut pos = 0;
    for (what, seg) in segments {
        if seg.offset != pos {
            return Err(Error::Format(format!(
                "segment `{what}` starts at byte {} but the previous one ends at {pos}",
                seg.offset
            )));
        }
        pos += seg.len;
    }
    if pos != blob_len {
        let (what, seg) = segments
            .last()
            .cloned()
            .unwrap_or_else(|| ("blob".into(), Segment { offset: 0, len: 0 }));
        return Err(Error::SizeMismatch {
            tensor: what,
            expected: seg.len,
            actual: (blob_len as isize - seg.offset as isize).max(0) as usize,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

// ---------------------------------------------------------------- networks

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkManifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    blob: String,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
}

/// Writes a network with dense weights; factored layers are multiplied out.
pub fn save_network(net: &NetworkSpec, path: &Path) -> Result<()> {
    let mut blob = BlobWriter::default();
    let mut tensors = Vec::new();
    for idx in net.parametric_layers() {
        let id = &net.layers[idx].id;
        let w = net.params_of(id)?.dense();
        let seg = blob.floats(w.data());
        tensors.push(TensorEntry {
            layer: id.clone(),
            shape: [w.rows(), w.cols()],
            offset: seg.offset,
        });
    }
    let manifest = NetworkManifest {
        format: NETWORK_FORMAT.into(),
        version: FORMAT_VERSION,
        input_shape: net.input_shape.clone(),
        layers: net.layers.clone(),
        tensors,
        blob: blob_name(path)?,
        metadata: net.metadata.clone(),
    };
    fs::write(blob_path(path), &blob.bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<NetworkSpec> {
    let manifest: NetworkManifest = read_manifest(path, NETWORK_FORMAT)?;
    let blob = BlobReader {
        bytes: fs::read(resolve_blob(path, &manifest.blob)?)?,
    };
    let mut params = BTreeMap::new();
    let mut segments = Vec::new();
    for t in &manifest.tensors {
        let seg = Segment {
            offset: t.offset,
            len: 4 * t.shape[0] * t.shape[1],
        };
        let w = blob.matrix(&seg, &t.layer, t.shape[0], t.shape[1])?;
        if params
            .insert(t.layer.clone(), LayerParams::Dense(w))
            .is_some()
        {
            return Err(Error::Format(format!(
                "tensor for `{}` listed twice",
                t.layer
            )));
        }
        segments.push((t.layer.clone(), seg));
    }
    check_tiling(&segments, blob.bytes.len())?;
    let mut net = NetworkSpec::new(manifest.input_shape, manifest.layers, params)?;
    net.metadata = manifest.metadata;
    Ok(net)
}

// ---------------------------------------------------------------- eval sets

#[derive(Serialize, Deserialize)]
struct EvalSetManifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    class_count: usize,
    labels: Vec<usize>,
    blob: String,
}

pub fn save_evalset(set: &EvalSet, path: &Path) -> Result<()> {
    set.validate()?;
    let mut blob = BlobWriter::default();
    for (x, _) in &set.samples {
        blob.floats(x.data());
    }
    let manifest = EvalSetManifest {
        format: EVALSET_FORMAT.into(),
        version: FORMAT_VERSION,
        input_shape: set.input_shape.clone(),
        class_count: set.class_count,
        labels: set.samples.iter().map(|s| s.1).collect(),
        blob: blob_name(path)?,
    };
    fs::write(blob_path(path), &blob.bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_evalset(path: &Path) -> Result<EvalSet> {
    let manifest: EvalSetManifest = read_manifest(path, EVALSET_FORMAT)?;
    if manifest.labels.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let blob = BlobReader {
        bytes: fs::read(resolve_blob(path, &manifest.blob)?)?,
    };
    let per = manifest.input_shape.iter().product::<usize>();
    let expected = 4 * per * manifest.labels.len();
    if blob.bytes.len() != expected {
        return Err(Error::SizeMismatch {
            tensor: "samples".into(),
            expected,
            actual: blob.bytes.len(),
        });
    }
    let samples = manifest
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let seg = Segment {
                offset: 4 * per * i,
                len: 4 * per,
            };
            let data = blob.floats(&seg, &format!("sample {i}"), per)?;
            Ok((Tensor::new(manifest.input_shape.clone(), data)?, label))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalSet::new(manifest.input_shape, manifest.class_count, samples)
}

// ---------------------------------------------------------------- containers

#[derive(Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "kebab-case")]
enum StoredEntry {
    Raw {
        rows: usize,
        cols: usize,
        data: Segment,
    },
    Packed {
        rows: usize,
        cols: usize,
        codebook: Segment,
        table: Segment,
        stream: Segment,
        stream_bits: usize,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum PayloadEntry {
    Dense {
        layer: String,
        shape: [usize; 2],
        data: Segment,
    },
    Coreset {
        layer: String,
        method: Method,
        shape: [usize; 2],
        rank: usize,
        dropped_rows: Vec<usize>,
        dropped_cols: Vec<usize>,
        mixer: Segment,
        basis: Segment,
    },
    QuantizedDense {
        layer: String,
        weights: StoredEntry,
        bias: Segment,
    },
    QuantizedCoreset {
        layer: String,
        method: Method,
        shape: [usize; 2],
        dropped_rows: Vec<usize>,
        dropped_cols: Vec<usize>,
        mixer: StoredEntry,
        basis: StoredEntry,
        basis_bias: Option<Segment>,
    },
}

impl PayloadEntry {
    fn layer(&self) -> &str {
        match self {
            PayloadEntry::Dense { layer, .. }
            | PayloadEntry::Coreset { layer, .. }
            | PayloadEntry::QuantizedDense { layer, .. }
            | PayloadEntry::QuantizedCoreset { layer, .. } => layer,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ContainerManifest {
    format: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
    masks: Vec<PruneMask>,
    payloads: Vec<PayloadEntry>,
    blob: String,
    report: CompressionReport,
}

fn write_stored(blob: &mut BlobWriter, m: &StoredMatrix) -> StoredEntry {
    match m {
        StoredMatrix::Raw(m) => StoredEntry::Raw {
            rows: m.rows(),
            cols: m.cols(),
            data: blob.floats(m.data()),
        },
        StoredMatrix::Packed(p) => StoredEntry::Packed {
            rows: p.rows,
            cols: p.cols,
            codebook: blob.floats(&p.codebook),
            table: blob.raw(&p.table.serialize()),
            stream: blob.raw(&p.stream),
            stream_bits: p.stream_bits,
        },
    }
}

fn read_stored(
    blob: &BlobReader,
    e: &StoredEntry,
    what: &str,
    segments: &mut Vec<(String, Segment)>,
) -> Result<StoredMatrix> {
    match e {
        StoredEntry::Raw { rows, cols, data } => {
            segments.push((what.into(), *data));
            Ok(StoredMatrix::Raw(blob.matrix(data, what, *rows, *cols)?))
        }
        StoredEntry::Packed {
            rows,
            cols,
            codebook,
            table,
            stream,
            stream_bits,
        } => {
            segments.push((format!("{what} codebook"), *codebook));
            segments.push((format!("{what} table"), *table));
            segments.push((format!("{what} stream"), *stream));
            if codebook.len % 4 != 0 || codebook.len == 0 {
                return Err(Error::Format(format!(
                    "codebook of {what} has {} bytes",
                    codebook.len
                )));
            }
            let book = blob.floats(codebook, what, codebook.len / 4)?;
            if !book.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Format(format!(
                    "codebook of {what} is not strictly increasing"
                )));
            }
            let (huff, used) = HuffmanTable::deserialize(blob.slice(table, what)?)?;
            if used != table.len {
                return Err(Error::Format(format!(
                    "huffman table of {what} has trailing bytes"
                )));
            }
            let bytes = blob.slice(stream, what)?.to_vec();
            if bytes.len() != stream_bits.div_ceil(8) {
                return Err(Error::Format(format!(
                    "stream of {what} does not match its bit length"
                )));
            }
            let packed = PackedMatrix {
                rows: *rows,
                cols: *cols,
                codebook: book,
                table: huff,
                stream: bytes,
                stream_bits: *stream_bits,
            };
            packed.decode()?;
            Ok(StoredMatrix::Packed(packed))
        }
    }
}

pub fn save_container(c: &CompressedContainer, path: &Path) -> Result<()> {
    let mut blob = BlobWriter::default();
    let net = c.network();
    let mut entries = Vec::new();
    for idx in net.parametric_layers() {
        let layer = net.layers[idx].id.clone();
        let payload = c
            .payload(&layer)
            .ok_or_else(|| Error::Validation(format!("container has no payload for `{layer}`")))?;
        entries.push(match payload {
            Payload::Dense(w) => PayloadEntry::Dense {
                layer,
                shape: [w.rows(), w.cols()],
                data: blob.floats(w.data()),
            },
            Payload::Coreset(core) => {
                let (n, p) = core.shape();
                PayloadEntry::Coreset {
                    layer,
                    method: core.method(),
                    shape: [n, p],
                    rank: core.rank(),
                    dropped_rows: core.dropped_rows().to_vec(),
                    dropped_cols: core.dropped_cols().to_vec(),
                    mixer: blob.floats(core.compact_mixer().data()),
                    basis: blob.floats(core.compact_basis().data()),
                }
            }
            Payload::QuantizedDense { weights, bias } => PayloadEntry::QuantizedDense {
                layer,
                weights: write_stored(&mut blob, weights),
                bias: blob.floats(bias),
            },
            Payload::QuantizedCoreset(q) => PayloadEntry::QuantizedCoreset {
                layer,
                method: q.method,
                shape: [q.shape.0, q.shape.1],
                dropped_rows: q.dropped_rows.clone(),
                dropped_cols: q.dropped_cols.clone(),
                mixer: write_stored(&mut blob, &q.mixer),
                basis: write_stored(&mut blob, &q.basis),
                basis_bias: q.basis_bias.as_ref().map(|b| blob.floats(b)),
            },
        });
    }
    debug_assert_eq!(blob.bytes.len(), c.byte_size());
    let manifest = ContainerManifest {
        format: CONTAINER_FORMAT.into(),
        version: FORMAT_VERSION,
        input_shape: net.input_shape.clone(),
        layers: net.layers.clone(),
        metadata: net.metadata.clone(),
        masks: c.masks.clone(),
        payloads: entries,
        blob: blob_name(path)?,
        report: c.report.clone(),
    };
    fs::write(blob_path(path), &blob.bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<CompressedContainer> {
    let manifest: ContainerManifest = read_manifest(path, CONTAINER_FORMAT)?;
    let blob = BlobReader {
        bytes: fs::read(resolve_blob(path, &manifest.blob)?)?,
    };
    let mut segments = Vec::new();
    let mut payloads = BTreeMap::new();
    for entry in &manifest.payloads {
        let id = entry.layer().to_string();
        let payload = match entry {
            PayloadEntry::Dense { shape, data, .. } => {
                segments.push((id.clone(), *data));
                Payload::Dense(blob.matrix(data, &id, shape[0], shape[1])?)
            }
            PayloadEntry::Coreset {
                method,
                shape,
                rank,
                dropped_rows,
                dropped_cols,
                mixer,
                basis,
                ..
            } => {
                segments.push((format!("{id} mixer"), *mixer));
                segments.push((format!("{id} basis"), *basis));
                let rows = shape[0].checked_sub(dropped_rows.len());
                let cols = shape[1].checked_sub(dropped_cols.len());
                let (Some(rows), Some(cols)) = (rows, cols) else {
                    return Err(Error::Format(format!(
                        "`{id}` drops more entries than it has"
                    )));
                };
                let m = blob.matrix(mixer, &format!("{id} mixer"), rows, *rank)?;
                let b = blob.matrix(basis, &format!("{id} basis"), *rank, cols)?;
                Payload::Coreset(CoresetLayer::from_compact(
                    id.clone(),
                    *method,
                    (shape[0], shape[1]),
                    &m,
                    &b,
                    dropped_rows.clone(),
                    dropped_cols.clone(),
                )?)
            }
            PayloadEntry::QuantizedDense { weights, bias, .. } => {
                let weights = read_stored(&blob, weights, &format!("{id} weights"), &mut segments)?;
                segments.push((format!("{id} bias"), *bias));
                let bias = blob.floats(bias, &format!("{id} bias"), weights.shape().0)?;
                Payload::QuantizedDense { weights, bias }
            }
            PayloadEntry::QuantizedCoreset {
                method,
                shape,
                dropped_rows,
                dropped_cols,
                mixer,
                basis,
                basis_bias,
                ..
            } => {
                let mixer = read_stored(&blob, mixer, &format!("{id} mixer"), &mut segments)?;
                let basis = read_stored(&blob, basis, &format!("{id} basis"), &mut segments)?;
                let basis_bias = match basis_bias {
                    Some(seg) => {
                        segments.push((format!("{id} basis bias"), *seg));
                        Some(blob.floats(seg, &format!("{id} basis bias"), basis.shape().0)?)
                    }
                    None => None,
                };
                Payload::QuantizedCoreset(QuantizedCoreset {
                    method: *method,
                    shape: (shape[0], shape[1]),
                    dropped_rows: dropped_rows.clone(),
                    dropped_cols: dropped_cols.clone(),
                    mixer,
                    basis,
                    basis_bias,
                })
            }
        };
        if payloads.insert(id.clone(), payload).is_some() {
            return Err(Error::Format(format!("payload for `{id}` listed twice")));
        }
    }
    check_tiling(&segments, blob.bytes.len())?;
    let c = CompressedContainer::from_parts(
        manifest.input_shape,
        manifest.layers,
        manifest.metadata,
        payloads,
        manifest.masks,
        manifest.report,
    )?;
    if c.report.bytes != c.byte_size() || c.report.compressed_params != c.param_count() {
        return Err(Error::Validation(
            "report sizes disagree with the stored payloads".into(),
        ));
    }
    Ok(c)
}

/// Reads either a container or a plain network manifest, returning the
/// network used for inference.
pub fn load_any_network(path: &Path) -> Result<NetworkSpec> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(CONTAINER_FORMAT) => Ok(load_container(path)?.network().clone()),
        Some(NETWORK_FORMAT) => load_network(path),
        other => Err(Error::Format(format!("unknown manifest format {other:?}"))),
    }
}

pub fn save_report(report: &CompressionReport, container_path: &Path) -> Result<()> {
    fs::write(report_json_path(container_path), report.to_json()?)?;
    fs::write(report_text_path(container_path), report.to_key_values())?;
    Ok(())
}

pub fn report_json_path(container_path: &Path) -> PathBuf {
    with_suffix(container_path, ".report.json")
}

pub fn report_text_path(container_path: &Path) -> PathBuf {
    with_suffix(container_path, ".report.txt")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testnets;
    use crate::report::LayerReport;

    #[test]
    fn network_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let mut net = testnets::tiny_cnn(5);
        net.metadata.insert("note".into(), "x".into());
        save_network(&net, &path).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(back, net);
        let again = dir.path().join("again.json");
        save_network(&back, &again).unwrap();
        assert_eq!(
            fs::read(blob_path(&path)).unwrap(),
            fs::read(blob_path(&again)).unwrap()
        );
    }

    #[test]
    fn truncated_blob_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&testnets::tiny_cnn(5), &path).unwrap();
        let mut bytes = fs::read(blob_path(&path)).unwrap();
        bytes.pop();
        fs::write(blob_path(&path), &bytes).unwrap();
        match load_network(&path) {
            Err(Error::SizeMismatch { tensor, .. }) => assert_eq!(tensor, "fc2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_blob_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&testnets::tiny_cnn(5), &path).unwrap();
        let mut bytes = fs::read(blob_path(&path)).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(blob_path(&path), &bytes).unwrap();
        assert!(matches!(
            load_network(&path),
            Err(Error::SizeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_weight_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&testnets::tiny_cnn(5), &path).unwrap();
        let mut bytes = fs::read(blob_path(&path)).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(blob_path(&path), &bytes).unwrap();
        assert!(matches!(load_network(&path), Err(Error::NonFinite(_))));
    }

    #[test]
    fn evalset_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        let set = testnets::random_evalset(1, &[1, 4, 4], 3, 7);
        save_evalset(&set, &path).unwrap();
        assert_eq!(load_evalset(&path).unwrap(), set);

        let text = fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["labels"][0] = 3.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(load_evalset(&path), Err(Error::Validation(_))));

        v["labels"] = serde_json::json!([]);
        fs::write(&path, v.to_string()).unwrap();
        let err = load_evalset(&path).unwrap_err();
        assert!(matches!(err, Error::EmptyEvalSet));
        assert_eq!(err.to_string(), "empty evaluation set");
    }

    fn sample_container(quantize: bool) -> CompressedContainer {
        let net = testnets::tiny_cnn(8);
        let mut payloads = BTreeMap::new();
        let mut rows = Vec::new();
        for idx in net.parametric_layers() {
            let id = net.layers[idx].id.clone();
            let w = net.params_of(&id).unwrap().dense();
            let mut p = if id == "fc1" {
                Payload::Coreset(
                    crate::coreset::SvdLadder::new(&w)
                        .unwrap()
                        .coreset(&id, 2)
                        .unwrap(),
                )
            } else {
                Payload::Dense(w.clone())
            };
            if quantize {
                p = p.quantize(3, 1).unwrap();
            }
            rows.push(LayerReport {
                layer_id: id.clone(),
                kind: net.layers[idx].kind.name().into(),
                original_filters: w.rows(),
                retained_filters: w.rows(),
                coreset_rank: p.rank(),
                lambda: None,
                dense_params: w.len(),
                pruned_params: w.len(),
                compressed_params: p.param_count(),
                bytes: p.byte_size(),
            });
            payloads.insert(id, p);
        }
        let masks = vec![PruneMask::keep_all("conv1", 4)];
        CompressedContainer::new(&net, payloads, masks, CompressionReport::new(rows)).unwrap()
    }

    #[test]
    fn container_round_trip_and_exact_bytes() {
        for quantize in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.json");
            let c = sample_container(quantize);
            save_container(&c, &path).unwrap();
            let back = load_container(&path).unwrap();
            assert_eq!(back, c);
            let blob_len = fs::metadata(blob_path(&path)).unwrap().len() as usize;
            assert_eq!(blob_len, c.report.bytes);
            assert_eq!(blob_len, c.byte_size());
            assert_eq!(load_any_network(&path).unwrap(), *c.network());
        }
    }

    #[test]
    fn container_blob_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_container(&sample_container(true), &path).unwrap();
        let mut bytes = fs::read(blob_path(&path)).unwrap();
        bytes.pop();
        fs::write(blob_path(&path), &bytes).unwrap();
        assert!(load_container(&path).is_err());
    }

    #[test]
    fn wrong_format_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_network(&testnets::tiny_cnn(5), &path).unwrap();
        assert!(matches!(load_container(&path), Err(Error::Format(_))));
        assert!(matches!(load_evalset(&path), Err(Error::Format(_))));
    }
}
