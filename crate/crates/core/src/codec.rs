//! Scalar k-means weight sharing and canonical Huffman coding of the
//! resulting codebook indices.
//!
//! Serialized table layout: one byte holding the maximum code length `L`,
//! then `L` little-endian `u16` counts of codes per length (1..=L), then the
//! symbols (one byte each) in canonical order. The code stream follows,
//! packed most-significant bit first and zero-padded to a byte boundary.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::CompressedContainer;
use crate::error::{Error, Result};
use crate::inference::accuracy;
use crate::model::EvalSet;
use crate::pruning::ACCURACY_EPS;
use crate::tensor::Matrix;

pub const MAX_CODEBOOK: usize = 256;
pub const DEFAULT_KMEANS_ITERS: usize = 100;
const KMEANS_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// Strictly increasing.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u8>,
}

impl Codebook {
    pub fn dequantize(&self) -> Vec<f32> {
        self.assignments
            .iter()
            .map(|&a| self.centroids[a as usize])
            .collect()
    }

    pub fn sse(&self, values: &[f32]) -> f64 {
        values
            .iter()
            .zip(self.dequantize())
            .map(|(&v, q)| ((v - q) as f64).powi(2))
            .sum()
    }
}

fn distinct_count(values: &[f32]) -> usize {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    sorted.dedup();
    sorted.len()
}

/// Lloyd's algorithm on scalars from a seeded k-means++ start.
pub fn kmeans_quantize(values: &[f32], k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    kmeans_traced(values, k, seed, max_iters).map(|(c, _)| c)
}

/// As [`kmeans_quantize`], also returning the within-cluster SSE after every
/// assignment step.
pub fn kmeans_traced(
    values: &[f32],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Codebook, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::Empty("quantization input"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantization input".into()));
    }
    let distinct = distinct_count(values);
    if k == 0 || k > MAX_CODEBOOK || k > distinct {
        return Err(Error::InvalidArgument(format!(
            "codebook size {k} must lie in [1, min({MAX_CODEBOOK}, {distinct} distinct values)]"
        )));
    }
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Several seeded starts; 1-D Lloyd easily stalls in poor local optima.
    let (centers, trace) = (0..KMEANS_RESTARTS)
        .map(|_| lloyd(&xs, k, &mut rng, max_iters))
        .min_by(|a, b| a.1.last().unwrap().total_cmp(b.1.last().unwrap()))
        .expect("at least one restart");

    // Final nearest assignment against f32 centroids, merging any that
    // collide after rounding.
    let mut cents: Vec<f32> = centers.iter().map(|&c| c as f32).collect();
    cents.sort_by(f32::total_cmp);
    cents.dedup();
    let cents64: Vec<f64> = cents.iter().map(|&c| c as f64).collect();
    let assignments: Vec<u8> = xs.iter().map(|&x| nearest(&cents64, x) as u8).collect();
    // Drop centroids nobody uses so every codebook entry is live.
    let mut used = vec![false; cents.len()];
    for &a in &assignments {
        used[a as usize] = true;
    }
    let mut remap = vec![0u8; cents.len()];
    let mut centroids = Vec::with_capacity(cents.len());
    for (j, &c) in cents.iter().enumerate() {
        if used[j] {
            remap[j] = centroids.len() as u8;
            centroids.push(c);
        }
    }
    let assignments = assignments.into_iter().map(|a| remap[a as usize]).collect();
    Ok((
        Codebook {
            centroids,
            assignments,
        },
        trace,
    ))
}

/// One k-means++ seeded Lloyd run; returns sorted centers and the SSE after
/// each assignment step.
fn lloyd(xs: &[f64], k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> (Vec<f64>, Vec<f64>) {
    // k-means++ seeding
    let mut centers = vec![xs[rng.gen_range(0..xs.len())]];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2
            .iter()
            .rposition(|&d| d > 0.0)
            .expect("distinct values remain");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = xs[pick];
        centers.push(c);
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min((x - c).powi(2));
        }
    }

    let mut assign = vec![0usize; xs.len()];
    let mut trace = Vec::new();
    for iter in 0..max_iters.max(1) {
        centers.sort_by(f64::total_cmp);
        let mut changed = iter == 0;
        let mut sse = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let a = nearest(&centers, x);
            if a != assign[i] {
                changed = true;
                assign[i] = a;
            }
            sse += (x - centers[a]).powi(2);
        }
        trace.push(sse);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &x) in assign.iter().zip(xs) {
            sums[a] += x;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        // Re-seed empty clusters at the worst-served points.
        for j in 0..k {
            if counts[j] == 0 {
                let (worst, _) = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (i, (x - centers[assign[i]]).powi(2)))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .expect("non-empty");
                centers[j] = xs[worst];
            }
        }
    }
    centers.sort_by(f64::total_cmp);
    (centers, trace)
}

/// Index of the closest entry of sorted `centers` (lower index on ties).
fn nearest(centers: &[f64], x: f64) -> usize {
    let i = centers.partition_point(|&c| c < x);
    if i == 0 {
        0
    } else if i == centers.len() {
        centers.len() - 1
    } else if x - centers[i - 1] <= centers[i] - x {
        i - 1
    } else {
        i
    }
}

/// Code lengths of a canonical prefix code over byte symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuffmanTable {
    /// Code length per symbol value; 0 for symbols that never occur.
    lengths: Vec<u8>,
}

impl HuffmanTable {
    /// Optimal code lengths for the given symbol frequencies. A lone symbol
    /// gets a 1-bit code.
    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        if freqs.len() > 256 {
            return Err(Error::InvalidArgument(
                "alphabet larger than 256 symbols".into(),
            ));
        }
        let live: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
        let mut lengths = vec![0u8; freqs.len()];
        match live.len() {
            0 => return Err(Error::Empty("huffman input")),
            1 => {
                lengths[live[0]] = 1;
                return Ok(Self { lengths });
            }
            _ => {}
        }
        // Nodes 0..n are leaves; parents are appended. Heap ties resolve on
        // creation order so the tree is deterministic.
        let mut parent: Vec<usize> = vec![usize::MAX; live.len()];
        let mut heap: BinaryHeap<Reverse<(u64, usize)>> = live
            .iter()
            .enumerate()
            .map(|(i, &s)| Reverse((freqs[s], i)))
            .collect();
        while heap.len() > 1 {
            let Reverse((wa, a)) = heap.pop().unwrap();
            let Reverse((wb, b)) = heap.pop().unwrap();
            let id = parent.len();
            parent.push(usize::MAX);
            parent[a] = id;
            parent[b] = id;
            heap.push(Reverse((wa + wb, id)));
        }
        for (i, &s) in live.iter().enumerate() {
            let mut depth = 0usize;
            let mut node = i;
            while parent[node] != usize::MAX {
                node = parent[node];
                depth += 1;
            }
            if depth > 64 {
                return Err(Error::InvalidArgument(
                    "huffman code longer than 64 bits".into(),
                ));
            }
            lengths[s] = depth as u8;
        }
        Ok(Self { lengths })
    }

    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        let t = Self { lengths };
        if t.lengths.iter().all(|&l| l == 0) {
            return Err(Error::Format("huffman table has no symbols".into()));
        }
        if t.lengths.iter().any(|&l| l > 64) || t.kraft_sum() > 1.0 + 1e-12 {
            return Err(Error::Format(
                "huffman code lengths violate the Kraft inequality".into(),
            ));
        }
        Ok(t)
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn max_len(&self) -> u8 {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    pub fn kraft_sum(&self) -> f64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 0.5f64.powi(l as i32))
            .sum()
    }

    /// Symbols sorted by (length, value).
    fn canonical_order(&self) -> Vec<usize> {
        let mut syms: Vec<usize> = (0..self.lengths.len())
            .filter(|&s| self.lengths[s] > 0)
            .collect();
        syms.sort_by_key(|&s| (self.lengths[s], s));
        syms
    }

    /// Canonical `(code, length)` per symbol.
    pub fn codes(&self) -> Vec<(u64, u8)> {
        let mut codes = vec![(0u64, 0u8); self.lengths.len()];
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for s in self.canonical_order() {
            let len = self.lengths[s];
            code <<= len - prev_len;
            codes[s] = (code, len);
            code += 1;
            prev_len = len;
        }
        codes
    }

    pub fn serialized_len(&self) -> usize {
        1 + 2 * self.max_len() as usize + self.canonical_order().len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let max = self.max_len();
        let mut out = Vec::with_capacity(self.serialized_len());
        out.push(max);
        for len in 1..=max {
            let count = self.lengths.iter().filter(|&&l| l == len).count() as u16;
            out.extend_from_slice(&count.to_le_bytes());
        }
        out.extend(self.canonical_order().into_iter().map(|s| s as u8));
        out
    }

    /// Parses a table from the front of `bytes`, returning it and the number
    /// of bytes consumed.
    pub fn deserialize(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Format("truncated huffman table".into());
        let max = *bytes.first().ok_or_else(short)? as usize;
        let mut pos = 1;
        let mut counts = Vec::with_capacity(max);
        for _ in 0..max {
            let c = bytes.get(pos..pos + 2).ok_or_else(short)?;
            counts.push(u16::from_le_bytes([c[0], c[1]]) as usize);
            pos += 2;
        }
        let total: usize = counts.iter().sum();
        let syms = bytes.get(pos..pos + total).ok_or_else(short)?;
        pos += total;
        let mut lengths = vec![0u8; 256];
        let mut it = syms.iter();
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let s = *it.next().unwrap() as usize;
                if lengths[s] != 0 {
                    return Err(Error::Format(format!(
                        "symbol {s} listed twice in huffman table"
                    )));
                }
                lengths[s] = (i + 1) as u8;
            }
        }
        let last = lengths.iter().rposition(|&l| l > 0).map_or(0, |p| p + 1);
        lengths.truncate(last);
        Ok((Self::from_lengths(lengths)?, pos))
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bits: usize,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            bits: 0,
        }
    }

    fn write(&mut self, code: u64, len: u8) {
        for i in (0..len).rev() {
            if self.bits.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (code >> i) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

/// Huffman-codes `symbols`; returns the table, the byte-padded stream and
/// its length in bits.
pub fn huffman_encode(symbols: &[u8]) -> Result<(HuffmanTable, Vec<u8>, usize)> {
    let mut freqs = vec![0u64; 256];
    for &s in symbols {
        freqs[s as usize] += 1;
    }
    let last = freqs.iter().rposition(|&f| f > 0).map_or(0, |p| p + 1);
    freqs.truncate(last);
    let table = HuffmanTable::from_frequencies(&freqs)?;
    let codes = table.codes();
    let mut w = BitWriter::new();
    for &s in symbols {
        let (code, len) = codes[s as usize];
        w.write(code, len);
    }
    Ok((table, w.bytes, w.bits))
}

/// Decodes exactly `count` symbols from `stream`.
pub fn huffman_decode(table: &HuffmanTable, stream: &[u8], count: usize) -> Result<Vec<u8>> {
    let max = table.max_len() as usize;
    let mut counts = vec![0u64; max + 1];
    for &l in table.lengths() {
        if l > 0 {
            counts[l as usize] += 1;
        }
    }
    let order = table.canonical_order();
    // first code and first symbol offset at each length
    let mut first = vec![0u64; max + 1];
    let mut offset = vec![0usize; max + 1];
    let (mut code, mut off) = (0u64, 0usize);
    for len in 1..=max {
        code = (code + if len > 1 { counts[len - 1] } else { 0 }) << 1;
        if len == 1 {
            code = 0;
        }
        first[len] = code;
        offset[len] = off;
        off += counts[len] as usize;
    }

    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    let total_bits = stream.len() * 8;
    while out.len() < count {
        let mut code = 0u64;
        let mut found = false;
        for len in 1..=max {
            if bit >= total_bits {
                return Err(Error::Format("huffman stream ended early".into()));
            }
            let b = (stream[bit / 8] >> (7 - bit % 8)) & 1;
            bit += 1;
            code = (code << 1) | b as u64;
            let idx = code.wrapping_sub(first[len]);
            if code >= first[len] && idx < counts[len] {
                out.push(order[offset[len] + idx as usize] as u8);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Format("invalid code in huffman stream".into()));
        }
    }
    Ok(out)
}

/// A matrix stored as a codebook plus a Huffman-coded index stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub codebook: Vec<f32>,
    pub table: HuffmanTable,
    pub stream: Vec<u8>,
    pub stream_bits: usize,
}

impl PackedMatrix {
    pub fn encode(m: &Matrix, k: usize, seed: u64) -> Result<Self> {
        let k = k.min(distinct_count(m.data()));
        let book = kmeans_quantize(m.data(), k, seed, DEFAULT_KMEANS_ITERS)?;
        let (table, stream, stream_bits) = huffman_encode(&book.assignments)?;
        Ok(Self {
            rows: m.rows(),
            cols: m.cols(),
            codebook: book.centroids,
            table,
            stream,
            stream_bits,
        })
    }

    pub fn decode(&self) -> Result<Matrix> {
        let idx = huffman_decode(&self.table, &self.stream, self.rows * self.cols)?;
        let data = idx
            .into_iter()
            .map(|i| {
                self.codebook
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("codebook index {i} out of range")))
            })
            .collect::<Result<Vec<f32>>>()?;
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn byte_size(&self) -> usize {
        4 * self.codebook.len() + self.table.serialized_len() + self.stream.len()
    }
}

/// A factor matrix as stored in a container: raw `f32` or quantized.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredMatrix {
    Raw(Matrix),
    Packed(PackedMatrix),
}

impl StoredMatrix {
    /// Quantizes to at most `2^bits` centroids, keeping the raw matrix when
    /// the codebook and stream would not be smaller than plain floats.
    pub fn quantize(m: &Matrix, bits: u32, seed: u64) -> Result<Self> {
        if bits == 0 || bits > 8 {
            return Err(Error::InvalidArgument(format!(
                "bits per weight must lie in [1, 8] when quantizing, got {bits}"
            )));
        }
        if m.is_empty() {
            return Ok(StoredMatrix::Raw(m.clone()));
        }
        let packed = PackedMatrix::encode(m, 1 << bits, seed)?;
        if packed.byte_size() < 4 * m.len() {
            Ok(StoredMatrix::Packed(packed))
        } else {
            Ok(StoredMatrix::Raw(m.clone()))
        }
    }

    pub fn decode(&self) -> Result<Matrix> {
        match self {
            StoredMatrix::Raw(m) => Ok(m.clone()),
            StoredMatrix::Packed(p) => p.decode(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredMatrix::Raw(m) => m.shape(),
            StoredMatrix::Packed(p) => (p.rows, p.cols),
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            StoredMatrix::Raw(m) => 4 * m.len(),
            StoredMatrix::Packed(p) => p.byte_size(),
        }
    }
}

/// Bit width that leaves a container untouched.
pub const BYPASS_BITS: u32 = 32;

/// Quantizes every payload of an unquantized container to `bits` per weight,
/// one layer at a time in topological order, re-measuring full-set accuracy
/// after each. Fails naming the first layer after which accuracy has fallen
/// more than `slack` below the container's own accuracy.
pub fn quantize_container(
    container: &CompressedContainer,
    bits: u32,
    eval: &EvalSet,
    slack: f64,
    seed: u64,
) -> Result<CompressedContainer> {
    if bits == BYPASS_BITS {
        return Ok(container.clone());
    }
    if container.is_quantized() {
        return Err(Error::InvalidArgument(
            "container is already quantized".into(),
        ));
    }
    if slack.is_nan() || slack < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "slack must be >= 0, got {slack}"
        )));
    }
    let reference = accuracy(container.network(), eval, 1.0, seed)?;
    let mut out = container.clone();
    let net = container.network();
    let mut acc = reference;
    for (idx, layer_idx) in net.parametric_layers().into_iter().enumerate() {
        let id = net.layers[layer_idx].id.clone();
        let payload = container
            .payload(&id)
            .ok_or_else(|| Error::Validation(format!("container has no payload for `{id}`")))?;
        let layer_seed = seed.wrapping_add(2 * idx as u64);
        out.set_payload(&id, payload.quantize(bits, layer_seed)?)?;
        acc = accuracy(out.network(), eval, 1.0, seed)?;
        debug!("quantized `{id}`: accuracy {acc:.4} (reference {reference:.4})");
        if acc + ACCURACY_EPS < reference - slack {
            return Err(Error::Budget(format!(
                "quantizing layer `{id}` to {bits} bits drops accuracy to {acc:.6}, \
                 more than {slack} below {reference:.6}"
            )));
        }
    }
    out.refresh_report_sizes();
    out.report.quantize_bits = Some(bits);
    out.report.accuracy.post_quantization = Some(acc);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_obvious_clusters() {
        let book = kmeans_quantize(&[1.0, 1.1, 5.0, 5.1], 2, 0, 100).unwrap();
        assert_eq!(book.centroids.len(), 2);
        assert!((book.centroids[0] - 1.05).abs() < 1e-6);
        assert!((book.centroids[1] - 5.05).abs() < 1e-6);
        assert_eq!(book.assignments, vec![0, 0, 1, 1]);
    }

    #[test]
    fn distinct_count_codebook_is_lossless() {
        let values = [0.5, -1.0, 0.5, 2.0, 3.25, -1.0];
        let book = kmeans_quantize(&values, 4, 3, 100).unwrap();
        assert_eq!(book.sse(&values), 0.0);
        assert!(kmeans_quantize(&values, 5, 3, 100).is_err());
        assert!(kmeans_quantize(&values, 0, 3, 100).is_err());
        assert!(kmeans_quantize(&[], 1, 3, 100).is_err());
    }

    /// Exact 1-D k-means by dynamic programming over sorted values.
    fn optimal_sse(values: &[f32], k: usize) -> f64 {
        let mut xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let mut pre = vec![0.0; n + 1];
        let mut pre2 = vec![0.0; n + 1];
        for i in 0..n {
            pre[i + 1] = pre[i] + xs[i];
            pre2[i + 1] = pre2[i] + xs[i] * xs[i];
        }
        let cost = |a: usize, b: usize| {
            let m = (b - a) as f64;
            let s = pre[b] - pre[a];
            pre2[b] - pre2[a] - s * s / m
        };
        let mut dp = vec![f64::INFINITY; n + 1];
        dp[0] = 0.0;
        for _ in 0..k {
            let mut next = vec![f64::INFINITY; n + 1];
            for (b, slot) in next.iter_mut().enumerate().skip(1) {
                for (a, &prev) in dp.iter().enumerate().take(b) {
                    if prev.is_finite() {
                        *slot = slot.min(prev + cost(a, b));
                    }
                }
            }
            dp = next;
        }
        dp[n]
    }

    #[test]
    fn sse_close_to_optimum_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let values: Vec<f32> = (0..200)
            .map(|_| rng.gen_range(-1.0f32..1.0) * rng.gen_range(0.0f32..1.0))
            .collect();
        let (book, trace) = kmeans_traced(&values, 8, 5, 100).unwrap();
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        let best = optimal_sse(&values, 8);
        let ours = book.sse(&values);
        assert!(ours <= best * 1.05, "{ours} vs optimum {best}");
        assert!(book.centroids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn textbook_code_lengths() {
        let (table, _, bits) = huffman_encode(b"aabc").unwrap();
        assert_eq!(table.lengths()[b'a' as usize], 1);
        assert_eq!(table.lengths()[b'b' as usize], 2);
        assert_eq!(table.lengths()[b'c' as usize], 2);
        assert_eq!(bits, 6);
    }

    #[test]
    fn single_symbol_uses_one_bit() {
        let symbols = vec![7u8; 13];
        let (table, stream, bits) = huffman_encode(&symbols).unwrap();
        assert_eq!(bits, 13);
        assert_eq!(stream.len(), 2);
        assert_eq!(huffman_decode(&table, &stream, 13).unwrap(), symbols);
    }

    #[test]
    fn table_serialization_layout() {
        let (table, _, _) = huffman_encode(b"aabc").unwrap();
        let bytes = table.serialize();
        // max len 2, one code of length 1, two of length 2, symbols a b c
        assert_eq!(bytes, vec![2, 1, 0, 2, 0, b'a', b'b', b'c']);
        let (back, used) = HuffmanTable::deserialize(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, table);
        assert!(HuffmanTable::deserialize(&bytes[..4]).is_err());
        assert!(HuffmanTable::from_lengths(vec![1, 1, 1]).is_err());
    }

    #[test]
    fn packed_matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Matrix::new(
            20,
            30,
            (0..600).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
        )
        .unwrap();
        let packed = PackedMatrix::encode(&m, 256, 1).unwrap();
        let decoded = packed.decode().unwrap();
        let book = kmeans_quantize(m.data(), 256, 1, DEFAULT_KMEANS_ITERS).unwrap();
        assert_eq!(decoded.data(), book.dequantize().as_slice());
        assert!(packed.byte_size() < 4 * m.len());
        let stored = StoredMatrix::quantize(&m, 8, 1).unwrap();
        assert!(matches!(stored, StoredMatrix::Packed(_)));
        // tiny matrices are not worth a codebook
        let small = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            StoredMatrix::quantize(&small, 8, 1).unwrap(),
            StoredMatrix::Raw(small)
        );
    }

    proptest::proptest! {
        #[test]
        fn huffman_round_trip_and_bounds(symbols in proptest::collection::vec(0u8..40, 1..400)) {
            let (table, stream, bits) = huffman_encode(&symbols).unwrap();
            proptest::prop_assert!(table.kraft_sum() <= 1.0 + 1e-12);
            proptest::prop_assert_eq!(huffman_decode(&table, &stream, symbols.len()).unwrap(), symbols.clone());
            proptest::prop_assert_eq!(stream.len(), bits.div_ceil(8));
            let (back, _) = HuffmanTable::deserialize(&table.serialize()).unwrap();
            proptest::prop_assert_eq!(&back, &table);

            let mut freq = [0usize; 256];
            for &s in &symbols { freq[s as usize] += 1; }
            let n = symbols.len() as f64;
            let entropy: f64 = freq.iter().filter(|&&f| f > 0).map(|&f| {
                let p = f as f64 / n;
                -p * p.log2()
            }).sum();
            proptest::prop_assert!(bits as f64 / n <= entropy + 1.0 + 1e-9);
        }
    }
}
