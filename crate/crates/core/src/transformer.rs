//! Baseline decoder-only transformer: untied embeddings, pre-LayerNorm
//! residual blocks of multi-head causal attention and a Gelu feed-forward,
//! and a final LayerNorm before unembedding. No bias terms anywhere.
//!
//! Activations are laid out with tokens as columns: the residual state is a
//! `D x (examples * n)` matrix. Attention is evaluated per example so scores
//! never cross sequence boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{gaussian, xavier_std, BoundParams, InitOptions, ParamSet};

fn default_ln_eps() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    /// Vocabulary size.
    pub v: usize,
    /// Maximum sequence length.
    pub n: usize,
    /// Residual stream width.
    pub d: usize,
    /// Number of attention + feed-forward layer pairs.
    pub l: usize,
    /// Attention heads per layer.
    pub h: usize,
    /// Width of one attention head.
    pub d_h: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Attention softmax always runs in f64 here; the flag records the
    /// upcasting choice for lower-precision activation backends.
    #[serde(default = "default_true")]
    pub softmax_upcast: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, val) in [
            ("v", self.v),
            ("n", self.n),
            ("d", self.d),
            ("h", self.h),
            ("d_h", self.d_h),
            ("d_ff", self.d_ff),
        ] {
            if val == 0 {
                return Err(Error::config(format!("transformer config: {name} must be positive")));
            }
        }
        if self.ln_eps <= 0.0 || self.ln_eps.is_nan() {
            return Err(Error::config("transformer config: ln_eps must be positive"));
        }
        Ok(())
    }

    /// Residual stream width, for size-matched comparisons with the RMT.
    pub fn residual_width(&self) -> usize {
        self.d
    }
}

/// Initialize all parameter tensors. Matrices are Xavier with natural
/// per-tensor fans; gains start at one. With `residual_scaling`, the tensors
/// that write into the residual stream (W_O, W_2) are scaled by 1/sqrt(2L).
pub fn init_transformer(cfg: &TransformerConfig, seed: u64, opts: &InitOptions) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let resid = if opts.residual_scaling && cfg.l > 0 {
        1.0 / ((2 * cfg.l) as f64).sqrt()
    } else {
        1.0
    };

    p.push("w_e", gaussian(&mut rng, &[cfg.d, cfg.v], xavier_std(cfg.v, cfg.d)), false);
    p.push("w_pe", gaussian(&mut rng, &[cfg.d, cfg.n], xavier_std(cfg.n, cfg.d)), false);
    for i in 0..cfg.l {
        p.push(format!("layer{i}.attn_norm.gain"), ndarray::ArrayD::ones(ndarray::IxDyn(&[cfg.d])), false);
        for h in 0..cfg.h {
            let qkv_std = xavier_std(cfg.d, cfg.d_h);
            p.push(format!("layer{i}.attn.wq.{h}"), gaussian(&mut rng, &[cfg.d_h, cfg.d], qkv_std), true);
            p.push(format!("layer{i}.attn.wk.{h}"), gaussian(&mut rng, &[cfg.d_h, cfg.d], qkv_std), true);
            p.push(format!("layer{i}.attn.wv.{h}"), gaussian(&mut rng, &[cfg.d_h, cfg.d], qkv_std), true);
            p.push(
                format!("layer{i}.attn.wo.{h}"),
                gaussian(&mut rng, &[cfg.d, cfg.d_h], resid * xavier_std(cfg.d_h, cfg.d)),
                true,
            );
        }
        p.push(format!("layer{i}.ff_norm.gain"), ndarray::ArrayD::ones(ndarray::IxDyn(&[cfg.d])), false);
        p.push(
            format!("layer{i}.ff.w1"),
            gaussian(&mut rng, &[cfg.d_ff, cfg.d], xavier_std(cfg.d, cfg.d_ff)),
            true,
        );
        p.push(
            format!("layer{i}.ff.w2"),
            gaussian(&mut rng, &[cfg.d, cfg.d_ff], resid * xavier_std(cfg.d_ff, cfg.d)),
            true,
        );
    }
    p.push("final_norm.gain", ndarray::ArrayD::ones(ndarray::IxDyn(&[cfg.d])), false);
    p.push("w_u", gaussian(&mut rng, &[cfg.v, cfg.d], xavier_std(cfg.d, cfg.v)), false);
    Ok(p)
}

pub(crate) fn validate_batch(v: usize, n_max: usize, batch: &[&[usize]]) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::input("empty batch"));
    };
    let n = first.len();
    if n == 0 || n > n_max {
        return Err(Error::input(format!(
            "sequence length {n} outside 1..={n_max}"
        )));
    }
    for seq in batch {
        if seq.len() != n {
            return Err(Error::input("ragged batch: sequences must share one length"));
        }
        for &t in seq.iter() {
            if t >= v {
                return Err(Error::input(format!("token id {t} out of range for vocab {v}")));
            }
        }
    }
    Ok(n)
}

/// Pre-LN: normalize each token column, then apply the per-feature gain.
fn ln(bound: &BoundParams, eps: f64, x: Var, gain: &str) -> Var {
    let g = bound.graph;
    g.mul_bcast_col(g.layernorm_cols(x, eps), bound.var(gain))
}

/// Token plus position embedding, one residual column per token.
pub fn tfm_embed(bound: &BoundParams, cfg: &TransformerConfig, batch: &[&[usize]]) -> Result<Var> {
    let n = validate_batch(cfg.v, cfg.n, batch)?;
    let g = bound.graph;
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let pos: Vec<usize> = batch.iter().flat_map(|_| 0..n).collect();
    let we = g.gather_cols(bound.var("w_e"), &ids);
    let pe = g.gather_cols(bound.var("w_pe"), &pos);
    Ok(g.add(we, pe))
}

/// Multi-head causal attention delta `Σ_h W_O^(h) SHA^(h)(Xn)`; the caller
/// adds it to the residual.
pub fn tfm_mha(
    bound: &BoundParams,
    cfg: &TransformerConfig,
    layer: usize,
    xn: Var,
    examples: usize,
    n: usize,
) -> Var {
    let g = bound.graph;
    let scale = 1.0 / (cfg.d_h as f64).sqrt();
    let mut delta: Option<Var> = None;
    for h in 0..cfg.h {
        let q = g.matmul(bound.var(&format!("layer{layer}.attn.wq.{h}")), xn);
        let k = g.matmul(bound.var(&format!("layer{layer}.attn.wk.{h}")), xn);
        let v = g.matmul(bound.var(&format!("layer{layer}.attn.wv.{h}")), xn);
        let mut outs = Vec::with_capacity(examples);
        for b in 0..examples {
            let qb = g.slice_cols(q, b * n, n);
            let kb = g.slice_cols(k, b * n, n);
            let vb = g.slice_cols(v, b * n, n);
            // scores[j, t] = k_j . q_t / sqrt(D_h), softmaxed over j <= t.
            let scores = g.scale(g.matmul(g.transpose2(kb), qb), scale);
            let attn = g.causal_softmax(scores);
            outs.push(g.matmul(vb, attn));
        }
        let sha = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let head = g.matmul(bound.var(&format!("layer{layer}.attn.wo.{h}")), sha);
        delta = Some(match delta {
            Some(d) => g.add(d, head),
            None => head,
        });
    }
    delta.expect("at least one head")
}

/// Feed-forward delta `W_2 Gelu(W_1 Xn)`; the caller adds the residual.
pub fn tfm_ff(bound: &BoundParams, cfg: &TransformerConfig, layer: usize, xn: Var) -> Var {
    let _ = cfg;
    let g = bound.graph;
    let hidden = g.gelu(g.matmul(bound.var(&format!("layer{layer}.ff.w1")), xn));
    g.matmul(bound.var(&format!("layer{layer}.ff.w2")), hidden)
}

/// Full forward pass to logits, shape `V x (examples * n)`. Column `t` of
/// each example depends only on that example's tokens at positions `<= t`.
pub fn tfm_forward(bound: &BoundParams, cfg: &TransformerConfig, batch: &[&[usize]]) -> Result<Var> {
    let n = validate_batch(cfg.v, cfg.n, batch)?;
    let g = bound.graph;
    let mut x = tfm_embed(bound, cfg, batch)?;
    for i in 0..cfg.l {
        let xn = ln(bound, cfg.ln_eps, x, &format!("layer{i}.attn_norm.gain"));
        let attn = tfm_mha(bound, cfg, i, xn, batch.len(), n);
        x = g.add(x, attn);
        let xn = ln(bound, cfg.ln_eps, x, &format!("layer{i}.ff_norm.gain"));
        let ff = tfm_ff(bound, cfg, i, xn);
        x = g.add(x, ff);
    }
    let xn = ln(bound, cfg.ln_eps, x, "final_norm.gain");
    Ok(g.matmul(bound.var("w_u"), xn))
}
