//! Brute-force reference for region-aware cross-attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::region_cross_attention_values;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Explicit masked double loop: each shadow query `i` takes a softmax over
/// the non-shadow keys `j` only; every other row is zero.
pub fn masked_attention_loop(
    fq: &Tensor,
    fkv: &Tensor,
    ms: &[f64],
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<Tensor> {
    let (n, c) = match *fq.shape() {
        [n, c] => (n, c),
        ref s => return Err(dim_err!("oracle expects [HW × C] queries, got {:?}", s)),
    };
    if fkv.shape() != [n, c] || ms.len() != n {
        return Err(dim_err!("oracle: mismatched inputs"));
    }
    let d = w_q.shape()[1];
    let project = |x: &Tensor, w: &Tensor, t: usize, k: usize| -> f64 {
        (0..c).map(|i| x.data()[t * c + i] * w.data()[i * d + k]).sum()
    };
    let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
        (0..n).map(|t| (0..d).map(|k| project(x, w, t, k)).collect()).collect()
    };
    let (q, k, v) = (proj(fq, w_q), proj(fkv, w_k), proj(fkv, w_v));
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        if ms[i] != 1.0 {
            continue;
        }
        let keys: Vec<usize> = (0..n).filter(|&j| ms[j] == 0.0).collect();
        if keys.is_empty() {
            continue;
        }
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| (0..d).map(|x| q[i][x] * k[j][x]).sum::<f64>() * scale)
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for (&j, ej) in keys.iter().zip(&e) {
            for x in 0..d {
                out[i * d + x] += ej / z * v[j][x];
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskCase {
    Random,
    AllShadow,
    NoShadow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub mask: MaskCase,
    pub tokens: usize,
    pub channels: usize,
    pub shadow_tokens: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

pub const ORACLE_TOLERANCE: f64 = 1e-10;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Compares the graph implementation with [`masked_attention_loop`] on one
/// random instance.
pub fn compare(rng: &mut ChaCha8Rng, tokens: usize, channels: usize, case: MaskCase) -> Result<OracleCase> {
    let fq = normal(rng, &[tokens, channels]);
    let fkv = normal(rng, &[tokens, channels]);
    let w: Vec<Tensor> = (0..3).map(|_| normal(rng, &[channels, channels])).collect();
    let ms: Vec<f64> = match case {
        MaskCase::Random => {
            let p: f64 = rng.random_range(0.1..0.9);
            (0..tokens).map(|_| rng.random_bool(p) as u8 as f64).collect()
        }
        MaskCase::AllShadow => vec![1.0; tokens],
        MaskCase::NoShadow => vec![0.0; tokens],
    };
    let got = region_cross_attention_values(&fq, &fkv, &ms, &w[0], &w[1], &w[2])?;
    let want = masked_attention_loop(&fq, &fkv, &ms, &w[0], &w[1], &w[2])?;
    let diff = got.max_abs_diff(&want);
    let diff = if got.all_finite() { diff } else { f64::INFINITY };
    Ok(OracleCase {
        mask: case,
        tokens,
        channels,
        shadow_tokens: ms.iter().filter(|&&m| m == 1.0).count(),
        max_abs_diff: diff,
        passed: diff <= ORACLE_TOLERANCE,
    })
}

/// One random-mask instance plus both degenerate masks.
pub fn run(seed: u64, tokens: usize, channels: usize) -> Result<Vec<OracleCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [MaskCase::Random, MaskCase::AllShadow, MaskCase::NoShadow]
        .into_iter()
        .map(|case| compare(&mut rng, tokens, channels, case))
        .collect()
}
