//! Outer-product memory primitives: storage, retrieval, and matrix
//! normalization. These are the operations the residual matrix stream is
//! built from; the model code reproduces the same math through [`crate::graph`]
//! ops, and tests cross-check the two.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Key vector of length `D_k`, addressing rows of a memory matrix.
pub type KeyVector = Array1<f64>;
/// Data vector of length `D_v`, the payload stored at or read from a key.
pub type DataVector = Array1<f64>;
/// `D_k x D_v` accumulation of outer products.
pub type MemoryMatrix = Array2<f64>;

/// Normalization extent for [`matrix_layernorm_axis`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormAxis {
    /// Normalize over all `D_k * D_v` entries, the analogue of normalizing a
    /// transformer's full residual vector. The default.
    #[default]
    Whole,
    /// Normalize each length-`D_v` row independently, kept as an ablation.
    PerRow,
}

fn ensure_finite(name: &str, it: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in it {
        if !v.is_finite() {
            return Err(Error::input(format!("{name} contains a non-finite entry")));
        }
    }
    Ok(())
}

/// Sum of outer products `Σ_p key_p ⊗ data_p`, bilinear in every pair and
/// independent of pair order up to floating-point reassociation.
pub fn outer_store(pairs: &[(KeyVector, DataVector)]) -> Result<MemoryMatrix> {
    let Some((k0, v0)) = pairs.first() else {
        return Err(Error::input("outer_store: empty pair list"));
    };
    let (dk, dv) = (k0.len(), v0.len());
    let mut m = Array2::<f64>::zeros((dk, dv));
    for (i, (key, data)) in pairs.iter().enumerate() {
        if key.len() != dk || data.len() != dv {
            return Err(Error::shape(format!(
                "outer_store: pair {i} has shape ({}, {}), expected ({dk}, {dv})",
                key.len(),
                data.len()
            )));
        }
        ensure_finite("key", key.iter().copied())?;
        ensure_finite("data", data.iter().copied())?;
        for (k, &kv) in key.iter().enumerate() {
            for (v, &dvv) in data.iter().enumerate() {
                m[[k, v]] += kv * dvv;
            }
        }
    }
    Ok(m)
}

/// Contraction of a key against the first axis of a memory matrix,
/// `keyᵀ M`, recovering a data vector.
pub fn retrieve(key: &KeyVector, m: &MemoryMatrix) -> Result<DataVector> {
    if key.len() != m.nrows() {
        return Err(Error::shape(format!(
            "retrieve: key length {} vs matrix first dimension {}",
            key.len(),
            m.nrows()
        )));
    }
    ensure_finite("key", key.iter().copied())?;
    ensure_finite("matrix", m.iter().copied())?;
    Ok(m.t().dot(key))
}

/// Whole-matrix layer normalization: subtract the mean and divide by
/// `sqrt(variance + eps)` over all entries (population variance), then scale
/// elementwise by `gain`. No bias term.
pub fn matrix_layernorm(m: &MemoryMatrix, gain: &Array2<f64>, eps: f64) -> Result<MemoryMatrix> {
    matrix_layernorm_axis(m, gain, eps, NormAxis::Whole)
}

/// [`matrix_layernorm`] with a selectable normalization extent.
pub fn matrix_layernorm_axis(
    m: &MemoryMatrix,
    gain: &Array2<f64>,
    eps: f64,
    axis: NormAxis,
) -> Result<MemoryMatrix> {
    if gain.dim() != m.dim() {
        return Err(Error::shape(format!(
            "matrix_layernorm: gain shape {:?} vs matrix shape {:?}",
            gain.dim(),
            m.dim()
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::input(format!("matrix_layernorm: eps must be finite and >= 0, got {eps}")));
    }
    ensure_finite("matrix", m.iter().copied())?;
    let mut out = m.clone();
    match axis {
        NormAxis::Whole => normalize_slice(out.as_slice_mut().expect("standard layout"), eps),
        NormAxis::PerRow => {
            for mut row in out.rows_mut() {
                normalize_slice(row.as_slice_mut().expect("standard layout"), eps);
            }
        }
    }
    out *= gain;
    Ok(out)
}

fn normalize_slice(xs: &mut [f64], eps: f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in xs.iter_mut() {
        *v = (*v - mean) * inv;
    }
}
