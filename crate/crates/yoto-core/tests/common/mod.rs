//! Test-only oracles, independent of the library's math paths.
// each integration-test target compiles this module separately, so any
// helper unused by one target would warn without this
#![allow(dead_code)]
// the oracle is deliberately written in index-loop scalar style
#![allow(clippy::needless_range_loop)]
//!
//! `oracle` reimplements the encoder forward pass and the weighted
//! cross-entropy scalar-by-scalar in f64, straight from the layer
//! equations. It reads the same named parameters but shares no kernel code
//! with the crate, so agreement is evidence, not tautology. The f64
//! precision also makes central finite differences clean enough to check
//! the crate's analytic f32 gradients at h = 1e-3.

use std::collections::BTreeMap;

use yoto_core::model::{self, Batch, ModelConfig, NamedParams};
use yoto_core::tensor::Tensor;
use yoto_core::train::weighted_cross_entropy;

const LN_EPS: f64 = 1e-5; // matches the layer-norm epsilon in the model

type Mat = Vec<Vec<f64>>;

fn fetch(params: &NamedParams, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = params
        .get(name)
        .unwrap_or_else(|| panic!("oracle: missing parameter {name}"));
    (
        t.shape().to_vec(),
        t.data().iter().map(|&v| v as f64).collect(),
    )
}

fn fetch_mat(params: &NamedParams, name: &str) -> Mat {
    let (shape, data) = fetch(params, name);
    assert_eq!(shape.len(), 2, "{name} should be rank 2");
    data.chunks(shape[1]).map(|r| r.to_vec()).collect()
}

fn fetch_vec(params: &NamedParams, name: &str) -> Vec<f64> {
    let (shape, data) = fetch(params, name);
    assert_eq!(shape.len(), 1, "{name} should be rank 1");
    data
}

fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let (rows, inner, out) = (x.len(), w.len(), w[0].len());
    let mut y = vec![vec![0.0; out]; rows];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = 0.0;
            for j in 0..inner {
                acc += x[r][j] * w[j][o];
            }
            y[r][o] = acc + b[o];
        }
    }
    y
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let n = gain.len() as f64;
    x.iter()
        .map(|row| {
            let mean: f64 = row.iter().sum::<f64>() / n;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| gain[j] * ((v - mean) * inv) + bias[j])
                .collect()
        })
        .collect()
}

/// Scalar-level f64 re-derivation of the classification forward pass.
pub fn oracle_logits(
    params: &NamedParams,
    config: &ModelConfig,
    ids: &[Vec<u32>],
    mask: &[Vec<bool>],
    head_id: &str,
) -> Mat {
    oracle_logits_signs(params, config, ids, mask, head_id).0
}

/// Forward pass plus a rolling hash over every ReLU activation sign. Two
/// evaluations with different hashes straddle a kink, where central
/// differences do not estimate a derivative.
pub fn oracle_logits_signs(
    params: &NamedParams,
    config: &ModelConfig,
    ids: &[Vec<u32>],
    mask: &[Vec<bool>],
    head_id: &str,
) -> (Mat, u64) {
    let mut sign_hash = 0xcbf2_9ce4_8422_2325u64;
    let mut mix = |active: bool| {
        sign_hash ^= active as u64 + 0x9e37_79b9;
        sign_hash = sign_hash.wrapping_mul(0x1000_0000_01b3);
    };
    let d = config.d_model;
    let dh = d / config.n_heads;
    let tok = fetch_mat(params, "encoder.embed.tok");
    let pos = fetch_mat(params, "encoder.embed.pos");

    let mut pooled: Mat = Vec::with_capacity(ids.len());
    for (row_ids, row_mask) in ids.iter().zip(mask) {
        let t_len = row_ids.len();
        let mut x: Mat = (0..t_len)
            .map(|t| {
                (0..d)
                    .map(|j| tok[row_ids[t] as usize][j] + pos[t][j])
                    .collect()
            })
            .collect();

        for l in 0..config.n_layers {
            let p = format!("encoder.block{l}");
            let q = linear(&x, &fetch_mat(params, &format!("{p}.attn.wq")), &fetch_vec(params, &format!("{p}.attn.bq")));
            let k = linear(&x, &fetch_mat(params, &format!("{p}.attn.wk")), &fetch_vec(params, &format!("{p}.attn.bk")));
            let v = linear(&x, &fetch_mat(params, &format!("{p}.attn.wv")), &fetch_vec(params, &format!("{p}.attn.bv")));

            let mut ctx = vec![vec![0.0; d]; t_len];
            for h in 0..config.n_heads {
                for i in 0..t_len {
                    // masked scores: pads act as -inf and get weight zero
                    let mut weights = vec![0.0f64; t_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t_len {
                        if row_mask[j] {
                            let mut s = 0.0;
                            for e in 0..dh {
                                s += q[i][h * dh + e] * k[j][h * dh + e];
                            }
                            weights[j] = s / (dh as f64).sqrt();
                            if weights[j] > max {
                                max = weights[j];
                            }
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..t_len {
                        if row_mask[j] {
                            weights[j] = (weights[j] - max).exp();
                            sum += weights[j];
                        } else {
                            weights[j] = 0.0;
                        }
                    }
                    for w in weights.iter_mut() {
                        *w /= sum;
                    }
                    for e in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..t_len {
                            acc += weights[j] * v[j][h * dh + e];
                        }
                        ctx[i][h * dh + e] = acc;
                    }
                }
            }

            let attn_out = linear(&ctx, &fetch_mat(params, &format!("{p}.attn.wo")), &fetch_vec(params, &format!("{p}.attn.bo")));
            let r1: Mat = x
                .iter()
                .zip(&attn_out)
                .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
                .collect();
            let y1 = layer_norm(
                &r1,
                &fetch_vec(params, &format!("{p}.norm1.gain")),
                &fetch_vec(params, &format!("{p}.norm1.bias")),
            );

            let h1 = linear(&y1, &fetch_mat(params, &format!("{p}.ff.w1")), &fetch_vec(params, &format!("{p}.ff.b1")));
            let a1: Mat = h1
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| {
                            mix(v > 0.0);
                            if v > 0.0 {
                                v
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let ff = linear(&a1, &fetch_mat(params, &format!("{p}.ff.w2")), &fetch_vec(params, &format!("{p}.ff.b2")));
            let r2: Mat = y1
                .iter()
                .zip(&ff)
                .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
                .collect();
            x = layer_norm(
                &r2,
                &fetch_vec(params, &format!("{p}.norm2.gain")),
                &fetch_vec(params, &format!("{p}.norm2.bias")),
            );
        }

        let n_real = row_mask.iter().filter(|&&m| m).count() as f64;
        let mut pool = vec![0.0; d];
        for (t, &m) in row_mask.iter().enumerate() {
            if m {
                for j in 0..d {
                    pool[j] += x[t][j];
                }
            }
        }
        for p in pool.iter_mut() {
            *p /= n_real;
        }
        pooled.push(pool);
    }

    let logits = linear(
        &pooled,
        &fetch_mat(params, &format!("head.{head_id}.w")),
        &fetch_vec(params, &format!("head.{head_id}.b")),
    );
    (logits, sign_hash)
}

/// f64 weighted cross-entropy over the oracle logits, with the ReLU sign
/// signature of the forward pass.
pub fn oracle_loss(
    params: &NamedParams,
    config: &ModelConfig,
    ids: &[Vec<u32>],
    mask: &[Vec<bool>],
    head_id: &str,
    targets: &[usize],
    class_weights: &[f64],
) -> (f64, u64) {
    let (logits, signs) = oracle_logits_signs(params, config, ids, mask, head_id);
    let mut total_w = 0.0;
    let mut loss = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let logp = (row[t] - max) - sum.ln();
        let w = class_weights[t];
        loss += w * -logp;
        total_w += w;
    }
    (loss / total_w, signs)
}

/// A generic random parameter point for gradient checking: O(1) weights,
/// nonzero biases, perturbed gains. The training init (std 0.02, zero
/// biases) is a degenerate point for finite differences — layer norm over
/// rows of std ~0.02 has inv_std ~50, which amplifies an h=1e-3 bump to
/// the size of the whole ReLU pre-activation spread.
fn generic_params(
    config: &ModelConfig,
    heads: &BTreeMap<String, usize>,
    seed: u64,
) -> NamedParams {
    let mut rng = yoto_core::rng::SeededRng::new(seed);
    let schema = model::param_schema(config, heads);
    let mut params = NamedParams::new();
    for (name, shape) in &schema {
        let last = name.rsplit('.').next().unwrap();
        let n: usize = shape.iter().product();
        let draw = |rng: &mut yoto_core::rng::SeededRng, scale: f64, offset: f64| -> Vec<f32> {
            (0..n)
                .map(|_| (offset + scale * rng.next_normal()) as f32)
                .collect()
        };
        let data = if last == "gain" {
            draw(&mut rng, 0.1, 1.0)
        } else if last.starts_with('b') {
            draw(&mut rng, 0.1, 0.0)
        } else {
            draw(&mut rng, 0.35, 0.0)
        };
        params
            .insert(name, Tensor::new(shape.clone(), data).unwrap())
            .unwrap();
    }
    params
}

/// The gradient-check harness shared by the oracle tests and acceptance
/// criterion 3: analytic f32 gradients against f64 central differences at
/// h = 1e-3 on a d_model=8, single-layer model.
///
/// Returns the worst per-tensor relative error, where a tensor's relative
/// error is `max_i |analytic_i − fd_i| / (max_j max(|analytic_j|, |fd_j|))`.
pub fn gradient_check(seed: u64) -> f64 {
    let config = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_len: 6,
    };
    let heads = BTreeMap::from([("cls".to_string(), 2usize)]);
    let params = generic_params(&config, &heads, seed);

    let ids = vec![vec![3u32, 7, 1, 0], vec![5, 2, 9, 4]];
    let mask = vec![vec![true, true, true, false], vec![true, true, true, true]];
    let targets = vec![1usize, 0];
    let weights_f32 = [1.0f32, 5.0];
    let weights_f64 = [1.0f64, 5.0];

    // analytic path: f32 forward, exact wce gradient, hand-derived backward
    let batch = Batch::new(ids.clone(), mask.clone()).unwrap();
    let (logits, cache) = model::forward(&params, &config, &batch, "cls").unwrap();
    let (_, grad_logits) = weighted_cross_entropy(&logits, &targets, &weights_f32).unwrap();
    let analytic = model::backward(&params, &config, &cache, &grad_logits).unwrap();

    let h = 1e-3f64;
    let mut worst = 0.0f64;
    let mut total_elems = 0usize;
    let mut total_checked = 0usize;
    for (name, tensor) in params.iter() {
        let an = analytic.get(name).unwrap();
        let mut fd = vec![f64::NAN; tensor.len()];
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            let bump = |delta: f64| -> (f64, u64) {
                let mut p = params.clone();
                let mut t = p.get(name).unwrap().clone();
                t.data_mut()[i] = (orig as f64 + delta) as f32;
                p.set(name, t).unwrap();
                oracle_loss(&p, &config, &ids, &mask, "cls", &targets, &weights_f64)
            };
            let (lp, sp) = bump(h);
            let (lm, sm) = bump(-h);
            if sp != sm {
                // the ±h points straddle a ReLU kink; loss is piecewise
                // there and the central difference estimates no derivative
                continue;
            }
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let checked: Vec<(f64, f64)> = an
            .data()
            .iter()
            .zip(&fd)
            .filter(|(_, f)| !f.is_nan())
            .map(|(a, f)| (*a as f64, *f))
            .collect();
        // bias-like parameters shift every ReLU pre-activation at once, so
        // at h=1e-3 a few of their elements straddle kinks on any given
        // seed; each tensor still needs at least one valid probe, and the
        // model-wide coverage is asserted below
        assert!(
            !checked.is_empty(),
            "{name}: every element straddles a ReLU kink"
        );
        total_elems += tensor.len();
        total_checked += checked.len();
        let scale = checked
            .iter()
            .map(|(a, f)| a.abs().max(f.abs()))
            .fold(0.0f64, f64::max);
        if scale < 1e-8 {
            // degenerate tensors: unused heads are exactly zero on both
            // sides, and the key bias is analytically zero (per-row softmax
            // shift invariance), leaving only f32 noise below any signal
            // finite differences could resolve
            continue;
        }
        let err = checked
            .iter()
            .map(|(a, f)| (a - f).abs())
            .fold(0.0f64, f64::max)
            / scale;
        if err > worst {
            worst = err;
        }
    }
    assert!(
        total_checked * 100 >= total_elems * 85,
        "finite differences skipped too much: {total_checked} of {total_elems} elements checked"
    );
    worst
}

/// Mixed relative/absolute closeness used across integration tests:
/// |a − b| <= tol * max(|a|, |b|, floor).
pub fn rel_close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-4)
}
