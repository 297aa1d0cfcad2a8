//! Architecture-tagged model front end: one config type covering both
//! architectures, parameter initialization, batched forward to logits, and
//! the z-loss-augmented cross-entropy objective.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, InitOptions, ParamSet};
use crate::resources::{rmt_flops_train_per_token, tfm_flops_train_per_token, RmtDims, TfmDims};
use crate::rmt::{init_rmt, rmt_forward, RmtConfig};
use crate::transformer::{init_transformer, tfm_forward, TransformerConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "arch", content = "model", rename_all = "lowercase")]
pub enum ModelSpec {
    Transformer(TransformerConfig),
    Rmt(RmtConfig),
}

impl ModelSpec {
    pub fn arch(&self) -> &'static str {
        match self {
            ModelSpec::Transformer(_) => "transformer",
            ModelSpec::Rmt(_) => "rmt",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Transformer(c) => c.validate(),
            ModelSpec::Rmt(c) => c.validate(),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            ModelSpec::Transformer(c) => c.v,
            ModelSpec::Rmt(c) => c.v,
        }
    }

    /// Maximum sequence length the position table supports.
    pub fn max_seq(&self) -> usize {
        match self {
            ModelSpec::Transformer(c) => c.n,
            ModelSpec::Rmt(c) => c.n,
        }
    }

    /// Residual stream size: D, or D_k*D_v.
    pub fn residual_size(&self) -> usize {
        match self {
            ModelSpec::Transformer(c) => c.residual_width(),
            ModelSpec::Rmt(c) => c.residual_width(),
        }
    }

    pub fn init(&self, seed: u64, opts: &InitOptions) -> Result<ParamSet> {
        match self {
            ModelSpec::Transformer(c) => init_transformer(c, seed, opts),
            ModelSpec::Rmt(c) => init_rmt(c, seed, opts),
        }
    }

    /// Logits for a batch of token sequences, shape `V x (examples * n)`,
    /// columns ordered example-major.
    pub fn forward(&self, bound: &BoundParams, batch: &[&[usize]]) -> Result<Var> {
        match self {
            ModelSpec::Transformer(c) => tfm_forward(bound, c, batch),
            ModelSpec::Rmt(c) => rmt_forward(bound, c, batch),
        }
    }

    pub fn flops_train_per_token(&self, seq_len: usize) -> u64 {
        match self {
            ModelSpec::Transformer(c) => tfm_flops_train_per_token(&TfmDims::from(c), seq_len as u64),
            ModelSpec::Rmt(c) => rmt_flops_train_per_token(&RmtDims::from(c), seq_len as u64),
        }
    }
}

/// The optimized objective and its two reported components, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// ce + z, the quantity to differentiate.
    pub total: Var,
    /// Mean cross-entropy in nats per token; the reported loss.
    pub ce: Var,
    /// z-loss: coef times the mean squared log-partition.
    pub z: Var,
}

/// Build ce + z on the tape. `targets` is flattened example-major to match
/// the logits columns.
pub fn loss_graph(g: &Graph, logits: Var, targets: &[usize], z_coef: f64) -> Result<LossVars> {
    let shape = g.shape(logits);
    if shape.len() != 2 {
        return Err(Error::shape(format!("logits must be rank 2, got {shape:?}")));
    }
    if targets.len() != shape[1] {
        return Err(Error::shape(format!(
            "{} targets for {} logit columns",
            targets.len(),
            shape[1]
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= shape[0]) {
        return Err(Error::input(format!("target id {bad} out of vocab {}", shape[0])));
    }
    let lse = g.logsumexp_cols(logits);
    let picked = g.pick_cols(logits, targets);
    let ce = g.mean1(g.sub(lse, picked));
    let z = g.scale(g.mean1(g.mul(lse, lse)), z_coef);
    let total = g.add(ce, z);
    Ok(LossVars { total, ce, z })
}

/// Pure evaluation of the same objective from a logits matrix:
/// ce = mean_t(logsumexp(col_t) - col_t[target_t]),
/// z = coef * mean_t(logsumexp(col_t)^2).
pub fn loss_fn(logits: &Array2<f64>, targets: &[usize], z_coef: f64) -> Result<(f64, f64)> {
    let (v, cols) = logits.dim();
    if cols == 0 {
        return Err(Error::shape("logits must have at least one column"));
    }
    if targets.len() != cols {
        return Err(Error::shape(format!("{} targets for {cols} logit columns", targets.len())));
    }
    let mut ce = 0.0;
    let mut zsum = 0.0;
    for (t, col) in logits.axis_iter(Axis(1)).enumerate() {
        if targets[t] >= v {
            return Err(Error::input(format!("target id {} out of vocab {v}", targets[t])));
        }
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        ce += lse - col[targets[t]];
        zsum += lse * lse;
    }
    Ok((ce / cols as f64, z_coef * zsum / cols as f64))
}

/// Forward pass to a concrete logits matrix, no gradient tape kept around.
pub fn logits_value(spec: &ModelSpec, params: &ParamSet, batch: &[&[usize]]) -> Result<Array2<f64>> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params);
    let logits = spec.forward(&bound, batch)?;
    g.value(logits)
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::shape("logits must be rank 2"))
}

/// Scalar ce + z for a batch; the quantity finite differences probe.
pub fn loss_value(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &[&[usize]],
    targets: &[usize],
    z_coef: f64,
) -> Result<f64> {
    let logits = logits_value(spec, params, batch)?;
    let (ce, z) = loss_fn(&logits, targets, z_coef)?;
    Ok(ce + z)
}
