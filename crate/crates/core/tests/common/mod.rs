//! Helpers shared by the acceptance harness and the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddsr::data::Dataset;
use ddsr::net::{LayerLayout, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Central differences of `f` at `theta`, one coordinate at a time.
pub fn central_diff(theta: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            t[i] = theta[i] + h;
            let up = f(&t);
            t[i] = theta[i] - h;
            let down = f(&t);
            t[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Hidden pre-activations of every sample along the path of width `widths`,
/// computed straight from the flat parameter layout.
pub fn hidden_preactivations(layout: &LayerLayout, theta: &[f64], widths: &[usize], batch: &[f64]) -> Vec<f64> {
    let sizes = layout.sizes();
    let depth = layout.depth();
    let mut out = Vec::new();
    for x in batch.chunks_exact(sizes[0]) {
        let mut a = x.to_vec();
        for l in 0..depth - 1 {
            let (w_off, b_off) = layout.offsets(l);
            let mut next = Vec::with_capacity(widths[l + 1]);
            for r in 0..widths[l + 1] {
                let mut z = theta[b_off + r];
                for (c, v) in a.iter().enumerate().take(widths[l]) {
                    z += theta[w_off + r * sizes[l] + c] * v;
                }
                out.push(z);
                next.push(z.max(0.0));
            }
            a = next;
        }
    }
    out
}

/// Largest per-coordinate `|a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn min_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min)
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Row-stochastic `n x c` matrix; some rows are sharp, a few one-hot.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        let kind = rng.random_range(0..10);
        let mut row: Vec<f64> = match kind {
            0 => {
                let k = rng.random_range(0..c);
                (0..c).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            }
            1..=3 => (0..c).map(|_| rng.random::<f64>().powi(8)).collect(),
            _ => (0..c).map(|_| rng.random::<f64>() + 1e-3).collect(),
        };
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            row[0] = 1.0;
        } else {
            row.iter_mut().for_each(|v| *v /= s);
        }
        out.extend(row);
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

pub fn small_network(seed: u64, sizes: Vec<usize>) -> Network {
    let layout = LayerLayout::with_activation(sizes, ddsr::net::Activation::Relu).unwrap();
    Network::init(layout, seed)
}

pub fn unlabeled(features: Vec<f64>, dim: usize, classes: usize) -> Dataset {
    let n = features.len() / dim;
    Dataset::new(ids(n), features, dim, classes, None).unwrap()
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ddsr")
}

/// Runs the CLI binary; panics only if it cannot be spawned.
pub fn ddsr(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn ddsr")
}

pub fn status_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .rfind(|l| l.starts_with("ddsr-status:"))
        .unwrap_or("")
        .to_string()
}

pub fn p(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn s(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

#[derive(Debug, Deserialize)]
pub struct Golden {
    pub dataset_sha256: String,
    pub teacher_b_accuracy: f64,
    pub teacher_c_accuracy: f64,
    pub bayes_accuracy: f64,
    pub bayes_draws: usize,
    pub pipeline: GoldenPipeline,
}

#[derive(Debug, Deserialize)]
pub struct GoldenPipeline {
    pub stage_one_accuracy: f64,
    pub final_accuracy: f64,
    pub final_gu: f64,
    pub ablations: Vec<GoldenAblation>,
}

#[derive(Debug, Deserialize)]
pub struct GoldenAblation {
    pub without: String,
    pub final_accuracy: f64,
    pub final_gu: f64,
}

pub fn golden() -> Golden {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/default_benchmark.json");
    let text = std::fs::read_to_string(&path).expect("golden file");
    serde_json::from_str(&text).expect("golden file parses")
}
