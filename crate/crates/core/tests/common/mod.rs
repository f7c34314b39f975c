//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coreset_core::model::{LayerKind, NetworkSpec};
use coreset_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn net_path() -> PathBuf {
    fixture("digits_net.json")
}

pub fn eval_path() -> PathBuf {
    fixture("digits_eval.json")
}

/// Runs the CLI single-threaded.
pub fn coreset<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coreset"))
        .args(args)
        .env("CORESET_THREADS", "1")
        .output()
        .expect("spawn coreset binary")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Value of the first `key=value` line of `text` with the given key.
pub fn kv(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
        .map(str::to_string)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum_k N_k (C_k h_k w_k + 1)` read from layer geometry alone.
pub fn geometric_param_count(net: &NetworkSpec) -> usize {
    net.layers
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv(g) => g.filters * (g.channels * g.kernel_h * g.kernel_w + 1),
            LayerKind::Fc(g) => g.outputs * (g.inputs + 1),
            _ => 0,
        })
        .sum()
}

/// Sum of every `{offset, len}` segment length found under `v`.
pub fn segment_bytes(v: &serde_json::Value) -> usize {
    match v {
        serde_json::Value::Object(map) => {
            if let (Some(_), Some(len)) = (map.get("offset"), map.get("len")) {
                return len.as_u64().unwrap() as usize;
            }
            map.values().map(segment_bytes).sum()
        }
        serde_json::Value::Array(items) => items.iter().map(segment_bytes).sum(),
        _ => 0,
    }
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
