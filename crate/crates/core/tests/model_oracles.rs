//! Second implementations of both forward passes, written as plain scalar
//! loops over ndarray storage with no shared graph code, compared entrywise
//! against the graph-built models. Also probes causal masking end to end.

use ndarray::{Array2, ArrayView1, ArrayView2, Ix1, Ix2};
use rmt_core::lm::ModelSpec;
use rmt_core::memory::NormAxis;
use rmt_core::params::{InitOptions, ParamSet};
use rmt_core::rmt::RmtConfig;
use rmt_core::transformer::TransformerConfig;

fn mat<'a>(p: &'a ParamSet, name: &str) -> ArrayView2<'a, f64> {
    p.get(name).view().into_dimensionality::<Ix2>().unwrap()
}

fn vec1<'a>(p: &'a ParamSet, name: &str) -> ArrayView1<'a, f64> {
    p.get(name).view().into_dimensionality::<Ix1>().unwrap()
}

fn matmul_loop(a: ArrayView2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, inner) = a.dim();
    let (inner2, n) = b.dim();
    assert_eq!(inner, inner2);
    let mut out = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..inner {
                acc += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Normalize each column over its rows and multiply by a per-row gain.
fn ln_cols(x: &Array2<f64>, gain: ArrayView1<f64>, eps: f64) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    for c in 0..cols {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += x[[r, c]];
        }
        mean /= rows as f64;
        let mut var = 0.0;
        for r in 0..rows {
            let d = x[[r, c]] - mean;
            var += d * d;
        }
        var /= rows as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for r in 0..rows {
            out[[r, c]] = (x[[r, c]] - mean) * inv * gain[r];
        }
    }
    out
}

/// Single-head causal attention on `d x n` query/key/value panels at the
/// given scale, all in explicit loops.
fn causal_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, scale: f64) -> Array2<f64> {
    let (d, n) = q.dim();
    let mut out = Array2::zeros((d, n));
    for t in 0..n {
        let mut scores = vec![0.0; t + 1];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for f in 0..d {
                dot += k[[f, j]] * q[[f, t]];
            }
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut z = 0.0;
        let weights: Vec<f64> = scores
            .iter()
            .map(|s| {
                let e = (s - max).exp();
                z += e;
                e
            })
            .collect();
        for (j, w) in weights.iter().enumerate() {
            for f in 0..d {
                out[[f, t]] += v[[f, j]] * (w / z);
            }
        }
    }
    out
}

fn tfm_oracle(cfg: &TransformerConfig, p: &ParamSet, batch: &[Vec<usize>]) -> Array2<f64> {
    let n = batch[0].len();
    let cols = batch.len() * n;
    let we = mat(p, "w_e");
    let pe = mat(p, "w_pe");
    let mut x = Array2::zeros((cfg.d, cols));
    for (b, seq) in batch.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            for d in 0..cfg.d {
                x[[d, b * n + t]] = we[[d, tok]] + pe[[d, t]];
            }
        }
    }
    let scale = 1.0 / (cfg.d_h as f64).sqrt();
    for layer in 0..cfg.l {
        let xn = ln_cols(&x, vec1(p, &format!("layer{layer}.attn_norm.gain")), cfg.ln_eps);
        let mut delta = Array2::zeros((cfg.d, cols));
        for h in 0..cfg.h {
            let q = matmul_loop(mat(p, &format!("layer{layer}.attn.wq.{h}")), &xn);
            let k = matmul_loop(mat(p, &format!("layer{layer}.attn.wk.{h}")), &xn);
            let v = matmul_loop(mat(p, &format!("layer{layer}.attn.wv.{h}")), &xn);
            let mut sha = Array2::zeros((cfg.d_h, cols));
            for b in 0..batch.len() {
                let take = |m: &Array2<f64>| {
                    let mut panel = Array2::zeros((cfg.d_h, n));
                    for t in 0..n {
                        for f in 0..cfg.d_h {
                            panel[[f, t]] = m[[f, b * n + t]];
                        }
                    }
                    panel
                };
                let out = causal_attention(&take(&q), &take(&k), &take(&v), scale);
                for t in 0..n {
                    for f in 0..cfg.d_h {
                        sha[[f, b * n + t]] = out[[f, t]];
                    }
                }
            }
            let head = matmul_loop(mat(p, &format!("layer{layer}.attn.wo.{h}")), &sha);
            delta += &head;
        }
        x += &delta;
        let xn = ln_cols(&x, vec1(p, &format!("layer{layer}.ff_norm.gain")), cfg.ln_eps);
        let hidden = matmul_loop(mat(p, &format!("layer{layer}.ff.w1")), &xn).map(|&v| gelu(v));
        x += &matmul_loop(mat(p, &format!("layer{layer}.ff.w2")), &hidden);
    }
    let xn = ln_cols(&x, vec1(p, "final_norm.gain"), cfg.ln_eps);
    matmul_loop(mat(p, "w_u"), &xn)
}

/// One residual matrix per token column, kept as a Vec of `d_k x d_v` states.
fn rmt_oracle(cfg: &RmtConfig, p: &ParamSet, batch: &[Vec<usize>]) -> Array2<f64> {
    let n = batch[0].len();
    let cols = batch.len() * n;
    let (dk, dv, r) = (cfg.d_k, cfg.d_v, cfg.r);
    let mut state = vec![Array2::<f64>::zeros((dk, dv)); cols];
    for (b, seq) in batch.iter().enumerate() {
        for (t, &tok) in seq.iter().enumerate() {
            let s = &mut state[b * n + t];
            for h in 0..r {
                let wmat = mat(p, &format!("emb_w.mat.{h}"));
                let wkey = vec1(p, &format!("emb_w.key.{h}"));
                let pmat = mat(p, &format!("emb_p.mat.{h}"));
                let pkey = vec1(p, &format!("emb_p.key.{h}"));
                for k in 0..dk {
                    for v in 0..dv {
                        s[[k, v]] += wkey[k] * wmat[[v, tok]] + pkey[k] * pmat[[v, t]];
                    }
                }
            }
        }
    }

    let norm = |state: &[Array2<f64>], gain_name: &str| -> Vec<Array2<f64>> {
        let gain = mat(p, gain_name);
        state
            .iter()
            .map(|s| {
                let mut out = s.clone();
                match cfg.norm_axis {
                    NormAxis::Whole => {
                        let count = (dk * dv) as f64;
                        let mean = s.sum() / count;
                        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / count;
                        let inv = 1.0 / (var + cfg.ln_eps).sqrt();
                        out.mapv_inplace(|v| (v - mean) * inv);
                    }
                    NormAxis::PerRow => {
                        for mut row in out.rows_mut() {
                            let count = dv as f64;
                            let mean = row.sum() / count;
                            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / count;
                            let inv = 1.0 / (var + cfg.ln_eps).sqrt();
                            row.mapv_inplace(|v| (v - mean) * inv);
                        }
                    }
                }
                for k in 0..dk {
                    for v in 0..dv {
                        out[[k, v]] *= gain[[k, v]];
                    }
                }
                out
            })
            .collect()
    };
    // Contract a retrieval key against every token state: column c of the
    // result is key^T state[c].
    let retrieve_all = |state: &[Array2<f64>], key: ArrayView1<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((dv, state.len()));
        for (c, s) in state.iter().enumerate() {
            for v in 0..dv {
                let mut acc = 0.0;
                for k in 0..dk {
                    acc += key[k] * s[[k, v]];
                }
                out[[v, c]] = acc;
            }
        }
        out
    };

    let scale = 1.0 / (dv as f64).sqrt();
    for layer in 0..cfg.l {
        let sn = norm(&state, &format!("layer{layer}.attn_norm.gain"));
        let mut delta = vec![Array2::<f64>::zeros((dk, dv)); cols];
        for h in 0..r {
            let q = retrieve_all(&sn, vec1(p, &format!("layer{layer}.attn.rq.{h}")));
            let k = retrieve_all(&sn, vec1(p, &format!("layer{layer}.attn.rk.{h}")));
            let v = retrieve_all(&sn, vec1(p, &format!("layer{layer}.attn.rv.{h}")));
            let wo = vec1(p, &format!("layer{layer}.attn.wo.{h}"));
            for b in 0..batch.len() {
                let take = |m: &Array2<f64>| {
                    let mut panel = Array2::zeros((dv, n));
                    for t in 0..n {
                        for f in 0..dv {
                            panel[[f, t]] = m[[f, b * n + t]];
                        }
                    }
                    panel
                };
                let sha = causal_attention(&take(&q), &take(&k), &take(&v), scale);
                for t in 0..n {
                    let d = &mut delta[b * n + t];
                    for kk in 0..dk {
                        for vv in 0..dv {
                            d[[kk, vv]] += wo[kk] * sha[[vv, t]];
                        }
                    }
                }
            }
        }
        for (s, d) in state.iter_mut().zip(&delta) {
            *s += d;
        }

        let sn = norm(&state, &format!("layer{layer}.ff_norm.gain"));
        let mut stacked = Array2::zeros((r * dv, cols));
        for h in 0..r {
            let part = retrieve_all(&sn, vec1(p, &format!("layer{layer}.ff.rff.{h}")));
            for c in 0..cols {
                for v in 0..dv {
                    stacked[[h * dv + v, c]] = part[[v, c]];
                }
            }
        }
        let hidden = matmul_loop(mat(p, &format!("layer{layer}.ff.w1")), &stacked).map(|&x| gelu(x));
        let core = matmul_loop(mat(p, &format!("layer{layer}.ff.w2")), &hidden);
        for h in 0..r {
            let wff = vec1(p, &format!("layer{layer}.ff.wff.{h}"));
            for c in 0..cols {
                let s = &mut state[c];
                for kk in 0..dk {
                    for vv in 0..dv {
                        s[[kk, vv]] += wff[kk] * core[[h * dv + vv, c]];
                    }
                }
            }
        }
    }

    let sn = norm(&state, "final_norm.gain");
    let mut logits = Array2::zeros((cfg.v, cols));
    for h in 0..r {
        let data = retrieve_all(&sn, vec1(p, &format!("unembed.ru.{h}")));
        logits += &matmul_loop(mat(p, &format!("unembed.wu.{h}")), &data);
    }
    logits
}

fn tiny_tfm() -> TransformerConfig {
    TransformerConfig {
        v: 11,
        n: 8,
        d: 16,
        l: 2,
        h: 2,
        d_h: 8,
        d_ff: 32,
        ln_eps: 1e-6,
        softmax_upcast: true,
    }
}

fn tiny_rmt() -> RmtConfig {
    RmtConfig {
        v: 11,
        n: 8,
        d_k: 8,
        d_v: 4,
        r: 4,
        l: 2,
        d_ff: 32,
        ln_eps: 1e-6,
        norm_axis: NormAxis::Whole,
        softmax_upcast: true,
    }
}

fn graph_logits(model: &ModelSpec, params: &ParamSet, batch: &[Vec<usize>]) -> Array2<f64> {
    let refs: Vec<&[usize]> = batch.iter().map(|s| s.as_slice()).collect();
    rmt_core::lm::logits_value(model, params, &refs).unwrap()
}

fn assert_logits_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
    assert_eq!(a.dim(), b.dim());
    for (x, y) in a.iter().zip(b.iter()) {
        let scale = x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
    }
}

fn probe_batch() -> Vec<Vec<usize>> {
    vec![vec![0, 3, 7, 10, 2, 5], vec![9, 9, 1, 4, 6, 8]]
}

#[test]
fn transformer_matches_the_loop_oracle() {
    let cfg = tiny_tfm();
    let model = ModelSpec::Transformer(cfg.clone());
    let params = model.init(11, &InitOptions::default()).unwrap();
    let batch = probe_batch();
    let got = graph_logits(&model, &params, &batch);
    let expect = tfm_oracle(&cfg, &params, &batch);
    assert_logits_close(&got, &expect, 1e-10);
}

#[test]
fn rmt_matches_the_loop_oracle() {
    let cfg = tiny_rmt();
    let model = ModelSpec::Rmt(cfg.clone());
    let params = model.init(13, &InitOptions::default()).unwrap();
    let batch = probe_batch();
    let got = graph_logits(&model, &params, &batch);
    let expect = rmt_oracle(&cfg, &params, &batch);
    assert_logits_close(&got, &expect, 1e-10);
}

#[test]
fn rmt_per_row_normalization_matches_the_loop_oracle() {
    let mut cfg = tiny_rmt();
    cfg.norm_axis = NormAxis::PerRow;
    let model = ModelSpec::Rmt(cfg.clone());
    let params = model.init(17, &InitOptions::default()).unwrap();
    let batch = probe_batch();
    let got = graph_logits(&model, &params, &batch);
    let expect = rmt_oracle(&cfg, &params, &batch);
    assert_logits_close(&got, &expect, 1e-10);
}

#[test]
fn oracles_agree_under_residual_scaled_initialization() {
    let opts = InitOptions {
        residual_scaling: true,
        ..Default::default()
    };
    let batch = probe_batch();

    let cfg = tiny_tfm();
    let model = ModelSpec::Transformer(cfg.clone());
    let params = model.init(23, &opts).unwrap();
    assert_logits_close(&graph_logits(&model, &params, &batch), &tfm_oracle(&cfg, &params, &batch), 1e-10);

    let cfg = tiny_rmt();
    let model = ModelSpec::Rmt(cfg.clone());
    let params = model.init(29, &opts).unwrap();
    assert_logits_close(&graph_logits(&model, &params, &batch), &rmt_oracle(&cfg, &params, &batch), 1e-10);
}

#[test]
fn batched_forward_equals_per_example_forwards() {
    for (model, seed) in [
        (ModelSpec::Transformer(tiny_tfm()), 3_u64),
        (ModelSpec::Rmt(tiny_rmt()), 4),
    ] {
        let params = model.init(seed, &InitOptions::default()).unwrap();
        let batch = probe_batch();
        let joint = graph_logits(&model, &params, &batch);
        for (b, seq) in batch.iter().enumerate() {
            let single = graph_logits(&model, &params, std::slice::from_ref(seq));
            let n = seq.len();
            for t in 0..n {
                for v in 0..single.nrows() {
                    let a = joint[[v, b * n + t]];
                    let s = single[[v, t]];
                    assert!((a - s).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {s}");
                }
            }
        }
    }
}

#[test]
fn perturbing_a_token_never_changes_earlier_logits() {
    for (model, seed) in [
        (ModelSpec::Transformer(tiny_tfm()), 5_u64),
        (ModelSpec::Rmt(tiny_rmt()), 6),
    ] {
        let params = model.init(seed, &InitOptions::default()).unwrap();
        let base = vec![vec![1usize, 8, 2, 9, 4, 0, 7, 3]];
        let base_logits = graph_logits(&model, &params, &base);
        for pos in 1..8 {
            let mut changed = base.clone();
            changed[0][pos] = (changed[0][pos] + 5) % 11;
            let new_logits = graph_logits(&model, &params, &changed);
            for t in 0..pos {
                for v in 0..new_logits.nrows() {
                    assert!(
                        base_logits[[v, t]].to_bits() == new_logits[[v, t]].to_bits(),
                        "logits before position {pos} must be bit-identical"
                    );
                }
            }
            let moved = (0..new_logits.nrows()).any(|v| base_logits[[v, pos]] != new_logits[[v, pos]]);
            assert!(moved, "the perturbed position itself should shift");
        }
    }
}
