//! Residual matrix transformer: the transformer skeleton with each token's
//! residual vector replaced by a D_k x D_v outer-product memory matrix.
//! Layers read data vectors out of the matrix by contracting retrieval keys
//! against the first axis and write results back as outer products with
//! storage keys.
//!
//! The in-graph residual state is a `D_k x D_v x (examples * n)` tensor,
//! one memory matrix per token column.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::memory::NormAxis;
use crate::params::{gaussian, xavier_std, BoundParams, InitOptions, KeyInit, ParamSet};
use crate::transformer::validate_batch;

fn default_ln_eps() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

/// One memory matrix per token position: shape `D_k x D_v x n`.
pub type ResidualMatrixState = ndarray::Array3<f64>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RmtConfig {
    /// Vocabulary size.
    pub v: usize,
    /// Maximum sequence length.
    pub n: usize,
    /// Residual key dimension (rows of each memory matrix).
    pub d_k: usize,
    /// Residual value dimension (columns of each memory matrix).
    pub d_v: usize,
    /// Key/data channels per layer; doubles as the attention head count.
    pub r: usize,
    /// Number of attention + feed-forward layer pairs.
    pub l: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub norm_axis: NormAxis,
    /// See [`crate::transformer::TransformerConfig::softmax_upcast`].
    #[serde(default = "default_true")]
    pub softmax_upcast: bool,
}

impl RmtConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, val) in [
            ("v", self.v),
            ("n", self.n),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("r", self.r),
            ("d_ff", self.d_ff),
        ] {
            if val == 0 {
                return Err(Error::config(format!("rmt config: {name} must be positive")));
            }
        }
        if self.ln_eps <= 0.0 || self.ln_eps.is_nan() {
            return Err(Error::config("rmt config: ln_eps must be positive"));
        }
        Ok(())
    }

    /// Total residual entries per token, the quantity matched against the
    /// transformer's D in size-mirrored comparisons.
    pub fn residual_width(&self) -> usize {
        self.d_k * self.d_v
    }

    /// Core feed-forward I/O width, equal to the mirrored transformer's D.
    pub fn core_width(&self) -> usize {
        self.r * self.d_v
    }
}

/// Initialize all RMT parameters. Matrices are Xavier with natural fans.
/// Key vectors follow `opts.key_init`: by default retrieval keys have
/// variance 1/D_k and storage keys 1/R so both forward variance ratios are 1.
/// With `residual_scaling`, storage keys that write into the residual
/// (w_O, w_FF) are scaled by 1/sqrt(2L).
pub fn init_rmt(cfg: &RmtConfig, seed: u64, opts: &InitOptions) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (retr_std, store_std) = match opts.key_init {
        KeyInit::VariancePreserving => (
            (1.0 / cfg.d_k as f64).sqrt(),
            (1.0 / cfg.r as f64).sqrt(),
        ),
        KeyInit::Xavier => {
            let s = xavier_std(cfg.d_k, cfg.r);
            (s, s)
        }
    };
    let resid = if opts.residual_scaling && cfg.l > 0 {
        1.0 / ((2 * cfg.l) as f64).sqrt()
    } else {
        1.0
    };
    let gain_shape = [cfg.d_k, cfg.d_v];

    for h in 0..cfg.r {
        p.push(format!("emb_w.mat.{h}"), gaussian(&mut rng, &[cfg.d_v, cfg.v], xavier_std(cfg.v, cfg.d_v)), false);
        p.push(format!("emb_w.key.{h}"), gaussian(&mut rng, &[cfg.d_k], store_std), true);
    }
    for h in 0..cfg.r {
        p.push(format!("emb_p.mat.{h}"), gaussian(&mut rng, &[cfg.d_v, cfg.n], xavier_std(cfg.n, cfg.d_v)), false);
        p.push(format!("emb_p.key.{h}"), gaussian(&mut rng, &[cfg.d_k], store_std), true);
    }
    for i in 0..cfg.l {
        p.push(format!("layer{i}.attn_norm.gain"), ndarray::ArrayD::ones(ndarray::IxDyn(&gain_shape)), false);
        for h in 0..cfg.r {
            p.push(format!("layer{i}.attn.rq.{h}"), gaussian(&mut rng, &[cfg.d_k], retr_std), true);
            p.push(format!("layer{i}.attn.rk.{h}"), gaussian(&mut rng, &[cfg.d_k], retr_std), true);
            p.push(format!("layer{i}.attn.rv.{h}"), gaussian(&mut rng, &[cfg.d_k], retr_std), true);
            p.push(format!("layer{i}.attn.wo.{h}"), gaussian(&mut rng, &[cfg.d_k], resid * store_std), true);
        }
        p.push(format!("layer{i}.ff_norm.gain"), ndarray::ArrayD::ones(ndarray::IxDyn(&gain_shape)), false);
        for h in 0..cfg.r {
            p.push(format!("layer{i}.ff.rff.{h}"), gaussian(&mut rng, &[cfg.d_k], retr_std), true);
            p.push(format!("layer{i}.ff.wff.{h}"), gaussian(&mut rng, &[cfg.d_k], resid * store_std), true);
        }
        let core = cfg.core_width();
        p.push(format!("layer{i}.ff.w1"), gaussian(&mut rng, &[cfg.d_ff, core], xavier_std(core, cfg.d_ff)), true);
        p.push(format!("layer{i}.ff.w2"), gaussian(&mut rng, &[core, cfg.d_ff], xavier_std(cfg.d_ff, core)), true);
    }
    p.push("final_norm.gain", ndarray::ArrayD::ones(ndarray::IxDyn(&gain_shape)), false);
    for h in 0..cfg.r {
        p.push(format!("unembed.ru.{h}"), gaussian(&mut rng, &[cfg.d_k], retr_std), true);
        p.push(format!("unembed.wu.{h}"), gaussian(&mut rng, &[cfg.v, cfg.d_v], xavier_std(cfg.d_v, cfg.v)), false);
    }
    Ok(p)
}

/// Per-token LayerNorm over the residual matrices, then the per-entry gain.
/// `Whole` normalizes all D_k*D_v entries of each token's matrix together;
/// `PerRow` normalizes each length-D_v row independently.
fn matrix_ln(bound: &BoundParams, cfg: &RmtConfig, x: Var, gain: &str) -> Var {
    let g = bound.graph;
    let cols = g.shape(x)[2];
    let (dk, dv) = (cfg.d_k, cfg.d_v);
    let normed = match cfg.norm_axis {
        NormAxis::Whole => {
            let flat = g.reshape(x, &[dk * dv, cols]);
            let n = g.layernorm_cols(flat, cfg.ln_eps);
            g.reshape(n, &[dk, dv, cols])
        }
        NormAxis::PerRow => {
            let perm = g.permute(x, &[1, 0, 2]);
            let flat = g.reshape(perm, &[dv, dk * cols]);
            let n = g.layernorm_cols(flat, cfg.ln_eps);
            let back = g.reshape(n, &[dv, dk, cols]);
            g.permute(back, &[1, 0, 2])
        }
    };
    let flat = g.reshape(normed, &[dk * dv, cols]);
    let gain_flat = g.reshape(bound.var(gain), &[dk * dv]);
    let gained = g.mul_bcast_col(flat, gain_flat);
    g.reshape(gained, &[dk, dv, cols])
}

/// Initial residual matrices: per token, the outer-product store of the word
/// embedding pairs plus the position embedding pairs.
pub fn rmt_embed(bound: &BoundParams, cfg: &RmtConfig, batch: &[&[usize]]) -> Result<Var> {
    let n = validate_batch(cfg.v, cfg.n, batch)?;
    let g = bound.graph;
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let pos: Vec<usize> = batch.iter().flat_map(|_| 0..n).collect();
    let mut state: Option<Var> = None;
    for h in 0..cfg.r {
        let wcols = g.gather_cols(bound.var(&format!("emb_w.mat.{h}")), &ids);
        let word = g.outer0(bound.var(&format!("emb_w.key.{h}")), wcols);
        let pcols = g.gather_cols(bound.var(&format!("emb_p.mat.{h}")), &pos);
        let posn = g.outer0(bound.var(&format!("emb_p.key.{h}")), pcols);
        let term = g.add(word, posn);
        state = Some(match state {
            Some(s) => g.add(s, term),
            None => term,
        });
    }
    Ok(state.expect("at least one channel"))
}

/// Attention delta: per channel, retrieve Q/K/V data vectors with the
/// retrieval keys, run causal single-head attention at scale 1/sqrt(D_v),
/// and write the result back with the storage key as an outer product.
pub fn rmt_mha(
    bound: &BoundParams,
    cfg: &RmtConfig,
    layer: usize,
    xn: Var,
    examples: usize,
    n: usize,
) -> Var {
    let g = bound.graph;
    let scale = 1.0 / (cfg.d_v as f64).sqrt();
    let mut delta: Option<Var> = None;
    for h in 0..cfg.r {
        let q = g.contract0(bound.var(&format!("layer{layer}.attn.rq.{h}")), xn);
        let k = g.contract0(bound.var(&format!("layer{layer}.attn.rk.{h}")), xn);
        let v = g.contract0(bound.var(&format!("layer{layer}.attn.rv.{h}")), xn);
        let mut outs = Vec::with_capacity(examples);
        for b in 0..examples {
            let qb = g.slice_cols(q, b * n, n);
            let kb = g.slice_cols(k, b * n, n);
            let vb = g.slice_cols(v, b * n, n);
            let scores = g.scale(g.matmul(g.transpose2(kb), qb), scale);
            let attn = g.causal_softmax(scores);
            outs.push(g.matmul(vb, attn));
        }
        let sha = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let written = g.outer0(bound.var(&format!("layer{layer}.attn.wo.{h}")), sha);
        delta = Some(match delta {
            Some(d) => g.add(d, written),
            None => written,
        });
    }
    delta.expect("at least one channel")
}

/// Activation used by the core feed-forward; `Identity` exists for tests
/// that check the adapter algebra around the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FfActivation {
    #[default]
    Gelu,
    Identity,
}

/// Feed-forward delta: retrieve one data vector per channel, stack them into
/// the R*D_v core input (channel h at rows [h*D_v, (h+1)*D_v)), apply
/// W_2 Gelu(W_1 .), split the core output the same way, and write each block
/// back with its storage key.
pub fn rmt_ff(
    bound: &BoundParams,
    cfg: &RmtConfig,
    layer: usize,
    xn: Var,
    activation: FfActivation,
) -> Var {
    let g = bound.graph;
    let parts: Vec<Var> = (0..cfg.r)
        .map(|h| g.contract0(bound.var(&format!("layer{layer}.ff.rff.{h}")), xn))
        .collect();
    let x_ff = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    let pre = g.matmul(bound.var(&format!("layer{layer}.ff.w1")), x_ff);
    let hidden = match activation {
        FfActivation::Gelu => g.gelu(pre),
        FfActivation::Identity => pre,
    };
    let core = g.matmul(bound.var(&format!("layer{layer}.ff.w2")), hidden);
    let mut delta: Option<Var> = None;
    for h in 0..cfg.r {
        let block = g.slice_rows(core, h * cfg.d_v, cfg.d_v);
        let written = g.outer0(bound.var(&format!("layer{layer}.ff.wff.{h}")), block);
        delta = Some(match delta {
            Some(d) => g.add(d, written),
            None => written,
        });
    }
    delta.expect("at least one channel")
}

/// Logits from the final normalized state: retrieve one data vector per
/// channel and sum the per-channel unembedding projections.
pub fn rmt_unembed(bound: &BoundParams, cfg: &RmtConfig, xn: Var) -> Var {
    let g = bound.graph;
    let mut logits: Option<Var> = None;
    for h in 0..cfg.r {
        let data = g.contract0(bound.var(&format!("unembed.ru.{h}")), xn);
        let term = g.matmul(bound.var(&format!("unembed.wu.{h}")), data);
        logits = Some(match logits {
            Some(l) => g.add(l, term),
            None => term,
        });
    }
    logits.expect("at least one channel")
}

/// Full forward pass to logits, shape `V x (examples * n)`.
pub fn rmt_forward(bound: &BoundParams, cfg: &RmtConfig, batch: &[&[usize]]) -> Result<Var> {
    let n = validate_batch(cfg.v, cfg.n, batch)?;
    let g = bound.graph;
    let mut x = rmt_embed(bound, cfg, batch)?;
    for i in 0..cfg.l {
        let xn = matrix_ln(bound, cfg, x, &format!("layer{i}.attn_norm.gain"));
        let attn = rmt_mha(bound, cfg, i, xn, batch.len(), n);
        x = g.add(x, attn);
        let xn = matrix_ln(bound, cfg, x, &format!("layer{i}.ff_norm.gain"));
        let ff = rmt_ff(bound, cfg, i, xn, FfActivation::Gelu);
        x = g.add(x, ff);
    }
    let xn = matrix_ln(bound, cfg, x, "final_norm.gain");
    Ok(rmt_unembed(bound, cfg, xn))
}
