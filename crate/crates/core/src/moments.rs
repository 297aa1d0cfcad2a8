//! Closed-form mean/variance propagation through storage, retrieval, and
//! linear maps, a Monte Carlo verifier for those forms, and the
//! variance-ratio report comparing both architectures at reference widths.
//!
//! All closed forms assume zero-mean weights; they are distribution-free
//! given the first two moments of inputs and output gradients.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::KeyInit;
use crate::resources::{RmtDims, TfmDims};

/// First and second moments of the inputs, weights, and output gradients
/// feeding one map. Weight mean must be zero; all variances non-negative.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentSpec {
    pub mu_x: f64,
    pub var_x: f64,
    pub mu_w: f64,
    pub var_w: f64,
    pub mu_g: f64,
    pub var_g: f64,
}

impl MomentSpec {
    /// Zero-mean spec from the three variances.
    pub fn centered(var_x: f64, var_w: f64, var_g: f64) -> Self {
        Self {
            mu_x: 0.0,
            var_x,
            mu_w: 0.0,
            var_w,
            mu_g: 0.0,
            var_g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mu_x", self.mu_x),
            ("var_x", self.var_x),
            ("mu_w", self.mu_w),
            ("var_w", self.var_w),
            ("mu_g", self.mu_g),
            ("var_g", self.var_g),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::input(format!("{name} must be finite, got {v}")));
            }
        }
        for (name, v) in [("var_x", self.var_x), ("var_w", self.var_w), ("var_g", self.var_g)] {
            if v < 0.0 {
                return Err(Error::input(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.mu_w != 0.0 {
            return Err(Error::input(format!(
                "closed forms assume zero-mean weights, got mu_w={}",
                self.mu_w
            )));
        }
        Ok(())
    }
}

/// Propagated moments: forward output and backward input-gradient. Outputs
/// are exactly zero-mean because the weights are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu_out: f64,
    pub var_out: f64,
    pub mu_gin: f64,
    pub var_gin: f64,
}

fn check_dims(dims: &[(&str, usize)]) -> Result<()> {
    for (name, v) in dims {
        if *v == 0 {
            return Err(Error::input(format!("{name} must be positive")));
        }
    }
    Ok(())
}

/// Storage `M = sum_h w_h (x) x_h` over R channels with D_k-dim keys:
/// each output entry sums R weight-input products, each input-gradient
/// entry sums d_k weight-gradient products.
pub fn storage_moments(r: usize, d_k: usize, spec: &MomentSpec) -> Result<Moments> {
    spec.validate()?;
    check_dims(&[("r", r), ("d_k", d_k)])?;
    Ok(Moments {
        mu_out: 0.0,
        var_out: r as f64 * spec.var_w * (spec.var_x + spec.mu_x * spec.mu_x),
        mu_gin: 0.0,
        var_gin: d_k as f64 * spec.var_w * (spec.var_g + spec.mu_g * spec.mu_g),
    })
}

/// Retrieval `y_h = w_h^T M`: the dual of storage; forward sums d_k
/// products per entry and backward sums R.
pub fn retrieval_moments(r: usize, d_k: usize, spec: &MomentSpec) -> Result<Moments> {
    spec.validate()?;
    check_dims(&[("r", r), ("d_k", d_k)])?;
    Ok(Moments {
        mu_out: 0.0,
        var_out: d_k as f64 * spec.var_w * (spec.var_x + spec.mu_x * spec.mu_x),
        mu_gin: 0.0,
        var_gin: r as f64 * spec.var_w * (spec.var_g + spec.mu_g * spec.mu_g),
    })
}

/// Dense map `y = W x` with W of shape d_out x d_in.
pub fn linear_moments(d_in: usize, d_out: usize, spec: &MomentSpec) -> Result<Moments> {
    spec.validate()?;
    check_dims(&[("d_in", d_in), ("d_out", d_out)])?;
    Ok(Moments {
        mu_out: 0.0,
        var_out: d_in as f64 * spec.var_w * (spec.var_x + spec.mu_x * spec.mu_x),
        mu_gin: 0.0,
        var_gin: d_out as f64 * spec.var_w * (spec.var_g + spec.mu_g * spec.mu_g),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McKind {
    Storage,
    Retrieval,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McDist {
    #[default]
    Gaussian,
    Uniform,
}

/// Shapes for one Monte Carlo experiment. For storage and retrieval these
/// are the R channels, key dimension, and value dimension; for a linear map
/// `r` plays d_in, `d_k` plays d_out, and `d_v` is a count of independent
/// input columns sharing the weight draw (1 for a plain vector input).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McDims {
    pub r: usize,
    pub d_k: usize,
    pub d_v: usize,
}

/// Sample moments with standard errors, estimated over independent trials:
/// each trial redraws weights, inputs, and output gradients, evaluates the
/// map and its exact adjoint, and contributes per-trial entry statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub mu_out: f64,
    pub var_out: f64,
    pub mu_gin: f64,
    pub var_gin: f64,
    pub se_mu_out: f64,
    pub se_var_out: f64,
    pub se_mu_gin: f64,
    pub se_var_gin: f64,
    pub trials: usize,
}

fn fill(rng: &mut ChaCha8Rng, arr: &mut Array2<f64>, mu: f64, var: f64, dist: McDist) {
    match dist {
        McDist::Gaussian => {
            if var == 0.0 {
                arr.fill(mu);
                return;
            }
            let normal = Normal::new(mu, var.sqrt()).expect("finite moments");
            for v in arr.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        McDist::Uniform => {
            let half = (3.0 * var).sqrt();
            for v in arr.iter_mut() {
                *v = mu + (2.0 * rng.random::<f64>() - 1.0) * half;
            }
        }
    }
}

fn mean_and_sq(arr: &Array2<f64>) -> (f64, f64) {
    let n = arr.len() as f64;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for &v in arr.iter() {
        s += v;
        s2 += v * v;
    }
    (s / n, s2 / n)
}

fn mean_se(samples: &[f64]) -> (f64, f64) {
    let t = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / t;
    let ss: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum();
    (mean, (ss / (t - 1.0)).sqrt() / t.sqrt())
}

/// Monte Carlo verification of the closed forms. Weights are always drawn
/// zero-mean; input and gradient means from the spec are honored (the
/// closed forms hold for any first moments there). Deterministic per seed.
pub fn monte_carlo_moments(
    kind: McKind,
    dims: McDims,
    spec: &MomentSpec,
    trials: usize,
    seed: u64,
    dist: McDist,
) -> Result<McEstimate> {
    spec.validate()?;
    check_dims(&[("r", dims.r), ("d_k", dims.d_k), ("d_v", dims.d_v)])?;
    if trials < 1000 {
        return Err(Error::input(format!("trials must be at least 1000, got {trials}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu_out_s = Vec::with_capacity(trials);
    let mut m2_out_s = Vec::with_capacity(trials);
    let mut mu_gin_s = Vec::with_capacity(trials);
    let mut m2_gin_s = Vec::with_capacity(trials);
    let (r, d_k, d_v) = (dims.r, dims.d_k, dims.d_v);
    let mut w = Array2::zeros((r, d_k));
    for _ in 0..trials {
        fill(&mut rng, &mut w, 0.0, spec.var_w, dist);
        let (out, gin) = match kind {
            // out[k,v] = sum_h w[h,k] x[h,v]; gin[h,v] = sum_k w[h,k] G[k,v].
            McKind::Storage => {
                let mut x = Array2::zeros((r, d_v));
                fill(&mut rng, &mut x, spec.mu_x, spec.var_x, dist);
                let mut g = Array2::zeros((d_k, d_v));
                fill(&mut rng, &mut g, spec.mu_g, spec.var_g, dist);
                (w.t().dot(&x), w.dot(&g))
            }
            // out[h,v] = sum_k w[h,k] M[k,v]; gin[k,v] = sum_h w[h,k] g[h,v].
            McKind::Retrieval => {
                let mut m = Array2::zeros((d_k, d_v));
                fill(&mut rng, &mut m, spec.mu_x, spec.var_x, dist);
                let mut g = Array2::zeros((r, d_v));
                fill(&mut rng, &mut g, spec.mu_g, spec.var_g, dist);
                (w.dot(&m), w.t().dot(&g))
            }
            // W is d_out x d_in laid out as w^T; y = W x, gin = W^T g.
            McKind::Linear => {
                let mut x = Array2::zeros((r, d_v));
                fill(&mut rng, &mut x, spec.mu_x, spec.var_x, dist);
                let mut g = Array2::zeros((d_k, d_v));
                fill(&mut rng, &mut g, spec.mu_g, spec.var_g, dist);
                (w.t().dot(&x), w.dot(&g))
            }
        };
        let (m, m2) = mean_and_sq(&out);
        mu_out_s.push(m);
        m2_out_s.push(m2);
        let (m, m2) = mean_and_sq(&gin);
        mu_gin_s.push(m);
        m2_gin_s.push(m2);
    }
    let (mu_out, se_mu_out) = mean_se(&mu_out_s);
    let (m2_out, se_m2_out) = mean_se(&m2_out_s);
    let (mu_gin, se_mu_gin) = mean_se(&mu_gin_s);
    let (m2_gin, se_m2_gin) = mean_se(&m2_gin_s);
    Ok(McEstimate {
        mu_out,
        var_out: m2_out - mu_out * mu_out,
        mu_gin,
        var_gin: m2_gin - mu_gin * mu_gin,
        se_mu_out,
        se_var_out: se_m2_out,
        se_mu_gin,
        se_var_gin: se_m2_gin,
        trials,
    })
}

/// One named Monte Carlo verification setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSetting {
    pub name: String,
    pub kind: McKind,
    pub dims: McDims,
    pub spec: MomentSpec,
}

/// Closed-form moments for a Monte Carlo setting, using the same dimension
/// conventions as the sampler (for a linear map `r` is d_in, `d_k` d_out).
pub fn closed_form(kind: McKind, dims: McDims, spec: &MomentSpec) -> Result<Moments> {
    match kind {
        McKind::Storage => storage_moments(dims.r, dims.d_k, spec),
        McKind::Retrieval => retrieval_moments(dims.r, dims.d_k, spec),
        McKind::Linear => linear_moments(dims.r, dims.d_k, spec),
    }
}

/// Standard verification grid: five dimension/variance settings per
/// operation, mixing degenerate and wide shapes, centered and offset
/// input/gradient means, and one zero-variance input.
pub fn verification_settings() -> Vec<McSetting> {
    let set = |name: &str, kind, r, d_k, d_v, spec| McSetting {
        name: name.into(),
        kind,
        dims: McDims { r, d_k, d_v },
        spec,
    };
    use McKind::{Linear, Retrieval, Storage};
    vec![
        set("storage r=4 dk=8", Storage, 4, 8, 4, MomentSpec::centered(1.0, 0.1, 1.0)),
        set("storage r=16 dk=64", Storage, 16, 64, 16, MomentSpec::centered(1.0, 1.0 / 16.0, 1.0)),
        set("storage scalar", Storage, 1, 1, 1, MomentSpec::centered(2.0, 0.5, 3.0)),
        set(
            "storage offset means",
            Storage,
            8,
            4,
            2,
            MomentSpec { mu_x: 0.5, var_x: 0.7, mu_w: 0.0, var_w: 0.2, mu_g: -0.3, var_g: 1.1 },
        ),
        set("storage r=32 dk=16", Storage, 32, 16, 8, MomentSpec::centered(1.3, 0.05, 0.6)),
        set("retrieval r=4 dk=8", Retrieval, 4, 8, 4, MomentSpec::centered(1.0, 0.125, 1.0)),
        set("retrieval r=16 dk=64", Retrieval, 16, 64, 16, MomentSpec::centered(1.0, 1.0 / 64.0, 1.0)),
        set("retrieval thin", Retrieval, 1, 2, 3, MomentSpec::centered(0.9, 0.3, 1.4)),
        set(
            "retrieval offset means",
            Retrieval,
            8,
            4,
            2,
            MomentSpec { mu_x: -0.2, var_x: 0.6, mu_w: 0.0, var_w: 0.15, mu_g: 0.4, var_g: 0.8 },
        ),
        set("retrieval r=2 dk=32", Retrieval, 2, 32, 8, MomentSpec::centered(1.0, 0.01, 2.0)),
        set("linear 4->8", Linear, 4, 8, 1, MomentSpec::centered(1.0, 0.25, 1.0)),
        set("linear 64->16 xavier", Linear, 64, 16, 1, MomentSpec::centered(1.0, 0.025, 1.0)),
        set("linear 16->64 cols", Linear, 16, 64, 4, MomentSpec::centered(0.5, 0.05, 1.5)),
        set(
            "linear constant input",
            Linear,
            8,
            8,
            2,
            MomentSpec { mu_x: 1.0, var_x: 0.0, mu_w: 0.0, var_w: 0.1, mu_g: 0.5, var_g: 0.9 },
        ),
        set("linear 32->32", Linear, 32, 32, 1, MomentSpec::centered(2.0, 0.03, 0.7)),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub layer: String,
    pub operation: String,
    pub model: String,
    pub fwd_ratio: f64,
    pub bwd_ratio: f64,
}

/// Forward/backward variance ratios for attention and feed-forward storage
/// and retrieval in both architectures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceRatioReport {
    pub rows: Vec<RatioRow>,
}

fn row(layer: &str, operation: &str, model: &str, m: Moments) -> RatioRow {
    RatioRow {
        layer: layer.into(),
        operation: operation.into(),
        model: model.into(),
        fwd_ratio: m.var_out,
        bwd_ratio: m.var_gin,
    }
}

/// Variance-ratio report at unit input/gradient variance, so the propagated
/// variances are the ratios directly.
///
/// Transformer rows use the fan conventions that reproduce the reference
/// table: Q/K/V as one fused D -> 3*H*D_h Xavier map, the output projection
/// as a fused H*D_h -> D Xavier map, and the two feed-forward maps with
/// their natural fans. RMT rows use the chosen key initialization; with the
/// variance-preserving default every forward ratio is exactly 1 and the
/// backward ratios are d_k/R for storage and R/d_k for retrieval.
pub fn variance_ratio_report(tfm: &TfmDims, rmt: &RmtDims, rmt_init: KeyInit) -> Result<VarianceRatioReport> {
    let unit = |var_w: f64| MomentSpec::centered(1.0, var_w, 1.0);
    let (d, h_dh, d_ff) = (tfm.d as usize, (tfm.h * tfm.d_h) as usize, tfm.d_ff as usize);
    let xavier = |fan_in: usize, fan_out: usize| 2.0 / (fan_in as f64 + fan_out as f64);
    let (r, d_k) = (rmt.r as usize, rmt.d_k as usize);
    let (retr_var, store_var) = match rmt_init {
        KeyInit::VariancePreserving => (1.0 / d_k as f64, 1.0 / r as f64),
        KeyInit::Xavier => (xavier(d_k, r), xavier(d_k, r)),
    };
    let rows = vec![
        row("attn", "storage", "transformer", linear_moments(h_dh, d, &unit(xavier(d, d)))?),
        row("attn", "retrieval", "transformer", linear_moments(d, 3 * h_dh, &unit(xavier(d, 3 * h_dh)))?),
        row("ff", "storage", "transformer", linear_moments(d_ff, d, &unit(xavier(d, d_ff)))?),
        row("ff", "retrieval", "transformer", linear_moments(d, d_ff, &unit(xavier(d, d_ff)))?),
        row("attn", "storage", "rmt", storage_moments(r, d_k, &unit(store_var))?),
        row("attn", "retrieval", "rmt", retrieval_moments(r, d_k, &unit(retr_var))?),
        row("ff", "storage", "rmt", storage_moments(r, d_k, &unit(store_var))?),
        row("ff", "retrieval", "rmt", retrieval_moments(r, d_k, &unit(retr_var))?),
    ];
    Ok(VarianceRatioReport { rows })
}

impl VarianceRatioReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<8} {:<11} {:<13} {:>12} {:>12}\n",
            "layer", "operation", "model", "fwd_ratio", "bwd_ratio"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:<11} {:<13} {:>12} {:>12}\n",
                r.layer, r.operation, r.model, r.fwd_ratio, r.bwd_ratio
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,operation,model,fwd_ratio,bwd_ratio\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer, r.operation, r.model, r.fwd_ratio, r.bwd_ratio
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn storage_variance_sums_over_channels() {
        let spec = MomentSpec::centered(1.0, 0.1, 1.0);
        let m = storage_moments(4, 8, &spec).unwrap();
        assert_eq!(m.mu_out, 0.0);
        assert!(approx(m.var_out, 0.4, 1e-15));
        assert!(approx(m.var_gin, 0.8, 1e-15));
    }

    #[test]
    fn zero_weight_variance_kills_both_directions() {
        let spec = MomentSpec::centered(1.0, 0.0, 1.0);
        let m = storage_moments(4, 8, &spec).unwrap();
        assert_eq!((m.var_out, m.var_gin), (0.0, 0.0));
        let m = linear_moments(16, 32, &spec).unwrap();
        assert_eq!((m.var_out, m.var_gin), (0.0, 0.0));
    }

    #[test]
    fn retrieval_with_inverse_key_dim_variance_is_unit() {
        let spec = MomentSpec::centered(1.0, 1.0 / 8.0, 1.0);
        let m = retrieval_moments(4, 8, &spec).unwrap();
        assert_eq!(m.var_out, 1.0);
    }

    #[test]
    fn zero_input_variance_and_mean_gives_zero_output_variance() {
        let spec = MomentSpec::centered(0.0, 0.125, 1.0);
        let m = retrieval_moments(4, 8, &spec).unwrap();
        assert_eq!(m.var_out, 0.0);
    }

    #[test]
    fn feed_forward_fan_ratios() {
        let spec = MomentSpec::centered(1.0, 2.0 / 5120.0, 1.0);
        let m = linear_moments(4096, 1024, &spec).unwrap();
        assert!(approx(m.var_out, 1.6, 1e-12));
        assert!(approx(m.var_gin, 0.4, 1e-12));
    }

    #[test]
    fn fused_qkv_fan_ratios() {
        let spec = MomentSpec::centered(1.0, 2.0 / 4096.0, 1.0);
        let m = linear_moments(1024, 3072, &spec).unwrap();
        assert_eq!(m.var_out, 0.5);
        assert_eq!(m.var_gin, 1.5);
    }

    #[test]
    fn means_contribute_like_variance() {
        let spec = MomentSpec {
            mu_x: 2.0,
            var_x: 1.0,
            mu_w: 0.0,
            var_w: 0.5,
            mu_g: 3.0,
            var_g: 2.0,
        };
        let m = storage_moments(3, 5, &spec).unwrap();
        assert!(approx(m.var_out, 3.0 * 0.5 * 5.0, 1e-15));
        assert!(approx(m.var_gin, 5.0 * 0.5 * 11.0, 1e-15));
    }

    #[test]
    fn retrieval_forward_is_storage_backward_under_g_x_swap() {
        for (r, d_k, var_x, mu_x) in [(2usize, 3usize, 0.7, 0.2), (16, 64, 1.3, 0.0), (5, 5, 0.0, 1.0)] {
            let fwd_spec = MomentSpec {
                mu_x,
                var_x,
                mu_w: 0.0,
                var_w: 0.31,
                mu_g: 0.0,
                var_g: 0.0,
            };
            let swapped = MomentSpec {
                mu_x: 0.0,
                var_x: 0.0,
                mu_w: 0.0,
                var_w: 0.31,
                mu_g: mu_x,
                var_g: var_x,
            };
            let retr = retrieval_moments(r, d_k, &fwd_spec).unwrap();
            let stor = storage_moments(r, d_k, &swapped).unwrap();
            assert_eq!(retr.var_out, stor.var_gin);
        }
    }

    #[test]
    fn linear_swaps_fan_between_directions() {
        let spec = MomentSpec {
            mu_x: 0.4,
            var_x: 0.9,
            mu_w: 0.0,
            var_w: 0.2,
            mu_g: 0.4,
            var_g: 0.9,
        };
        let a = linear_moments(7, 13, &spec).unwrap();
        let b = linear_moments(13, 7, &spec).unwrap();
        assert_eq!(a.var_out, b.var_gin);
        assert_eq!(a.var_gin, b.var_out);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = MomentSpec::centered(1.0, 0.1, 1.0);
        spec.var_x = -1.0;
        assert!(storage_moments(4, 8, &spec).is_err());
        let mut spec = MomentSpec::centered(1.0, 0.1, 1.0);
        spec.mu_w = 0.5;
        assert!(linear_moments(4, 8, &spec).is_err());
        let spec = MomentSpec::centered(1.0, 0.1, 1.0);
        assert!(retrieval_moments(0, 8, &spec).is_err());
    }

    #[test]
    fn monte_carlo_matches_storage_closed_form_within_three_se() {
        let spec = MomentSpec::centered(1.0, 0.1, 1.0);
        let dims = McDims { r: 4, d_k: 8, d_v: 4 };
        let mc = monte_carlo_moments(McKind::Storage, dims, &spec, 20_000, 11, McDist::Gaussian).unwrap();
        let cf = storage_moments(4, 8, &spec).unwrap();
        assert!((mc.var_out - cf.var_out).abs() <= 3.0 * mc.se_var_out);
        assert!((mc.var_gin - cf.var_gin).abs() <= 3.0 * mc.se_var_gin);
        assert!(mc.mu_out.abs() <= 3.0 * mc.se_mu_out);
        assert!(mc.mu_gin.abs() <= 3.0 * mc.se_mu_gin);
    }

    #[test]
    fn monte_carlo_is_deterministic_per_seed() {
        let spec = MomentSpec::centered(1.0, 0.25, 2.0);
        let dims = McDims { r: 3, d_k: 5, d_v: 2 };
        let a = monte_carlo_moments(McKind::Retrieval, dims, &spec, 1000, 7, McDist::Gaussian).unwrap();
        let b = monte_carlo_moments(McKind::Retrieval, dims, &spec, 1000, 7, McDist::Gaussian).unwrap();
        assert_eq!(a.var_out.to_bits(), b.var_out.to_bits());
        assert_eq!(a.var_gin.to_bits(), b.var_gin.to_bits());
        assert_eq!(a.mu_out.to_bits(), b.mu_out.to_bits());
        let c = monte_carlo_moments(McKind::Retrieval, dims, &spec, 1000, 8, McDist::Gaussian).unwrap();
        assert_ne!(a.var_out.to_bits(), c.var_out.to_bits());
    }

    #[test]
    fn monte_carlo_rejects_too_few_trials() {
        let spec = MomentSpec::centered(1.0, 0.1, 1.0);
        let dims = McDims { r: 2, d_k: 2, d_v: 1 };
        assert!(monte_carlo_moments(McKind::Linear, dims, &spec, 999, 0, McDist::Gaussian).is_err());
    }

    #[test]
    fn linear_kind_shares_closed_forms_with_storage_at_matching_dims() {
        let spec = MomentSpec::centered(0.8, 0.05, 1.7);
        let lin = linear_moments(6, 9, &spec).unwrap();
        let stor = storage_moments(6, 9, &spec).unwrap();
        assert_eq!(lin, stor);
        let dims = McDims { r: 6, d_k: 9, d_v: 1 };
        let mc = monte_carlo_moments(McKind::Linear, dims, &spec, 20_000, 3, McDist::Gaussian).unwrap();
        assert!((mc.var_out - lin.var_out).abs() <= 3.0 * mc.se_var_out);
        assert!((mc.var_gin - lin.var_gin).abs() <= 3.0 * mc.se_var_gin);
    }

    #[test]
    fn uniform_draws_reproduce_the_same_closed_forms() {
        let spec = MomentSpec::centered(1.0, 0.1, 1.0);
        let dims = McDims { r: 4, d_k: 8, d_v: 4 };
        let mc = monte_carlo_moments(McKind::Storage, dims, &spec, 20_000, 5, McDist::Uniform).unwrap();
        let cf = storage_moments(4, 8, &spec).unwrap();
        assert!((mc.var_out - cf.var_out).abs() <= 3.0 * mc.se_var_out);
        assert!((mc.var_gin - cf.var_gin).abs() <= 3.0 * mc.se_var_gin);
    }

    #[test]
    fn verification_grid_has_five_valid_settings_per_kind() {
        let settings = verification_settings();
        for kind in [McKind::Storage, McKind::Retrieval, McKind::Linear] {
            assert_eq!(settings.iter().filter(|s| s.kind == kind).count(), 5);
        }
        for s in &settings {
            let cf = closed_form(s.kind, s.dims, &s.spec).unwrap();
            assert_eq!(cf.mu_out, 0.0);
            assert_eq!(cf.mu_gin, 0.0);
            assert!(cf.var_out.is_finite() && cf.var_gin.is_finite());
        }
    }

    #[test]
    fn closed_form_dispatches_by_kind() {
        let spec = MomentSpec::centered(1.0, 0.2, 1.0);
        let dims = McDims { r: 3, d_k: 7, d_v: 2 };
        assert_eq!(closed_form(McKind::Storage, dims, &spec).unwrap(), storage_moments(3, 7, &spec).unwrap());
        assert_eq!(closed_form(McKind::Retrieval, dims, &spec).unwrap(), retrieval_moments(3, 7, &spec).unwrap());
        assert_eq!(closed_form(McKind::Linear, dims, &spec).unwrap(), linear_moments(3, 7, &spec).unwrap());
    }

    fn reference_dims() -> (TfmDims, RmtDims) {
        (
            TfmDims { v: 50257, n: 512, d: 1024, l: 24, h: 16, d_h: 64, d_ff: 4096 },
            RmtDims { v: 50257, n: 512, d_k: 1024, d_v: 64, r: 16, l: 24, d_ff: 4096 },
        )
    }

    #[test]
    fn transformer_report_rows_match_reference_ratios() {
        let (tfm, rmt) = reference_dims();
        let report = variance_ratio_report(&tfm, &rmt, KeyInit::VariancePreserving).unwrap();
        let get = |layer: &str, op: &str| {
            report
                .rows
                .iter()
                .find(|r| r.layer == layer && r.operation == op && r.model == "transformer")
                .unwrap()
        };
        let r = get("attn", "storage");
        assert!(approx(r.fwd_ratio, 1.0, 1e-12) && approx(r.bwd_ratio, 1.0, 1e-12));
        let r = get("attn", "retrieval");
        assert!(approx(r.fwd_ratio, 0.5, 1e-12) && approx(r.bwd_ratio, 1.5, 1e-12));
        let r = get("ff", "storage");
        assert!(approx(r.fwd_ratio, 1.6, 1e-12) && approx(r.bwd_ratio, 0.4, 1e-12));
        let r = get("ff", "retrieval");
        assert!(approx(r.fwd_ratio, 0.4, 1e-12) && approx(r.bwd_ratio, 1.6, 1e-12));
    }

    #[test]
    fn rmt_default_init_rows_have_unit_forward_ratios() {
        let (tfm, rmt) = reference_dims();
        let report = variance_ratio_report(&tfm, &rmt, KeyInit::VariancePreserving).unwrap();
        for r in report.rows.iter().filter(|r| r.model == "rmt") {
            assert!(approx(r.fwd_ratio, 1.0, 1e-12), "{r:?}");
            let expect = match r.operation.as_str() {
                "storage" => 1024.0 / 16.0,
                _ => 16.0 / 1024.0,
            };
            assert!(approx(r.bwd_ratio, expect, 1e-12), "{r:?}");
        }
    }

    #[test]
    fn report_is_a_pure_function_of_inputs() {
        let (tfm, rmt) = reference_dims();
        let a = variance_ratio_report(&tfm, &rmt, KeyInit::Xavier).unwrap();
        let b = variance_ratio_report(&tfm, &rmt, KeyInit::Xavier).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn csv_has_pinned_columns_and_one_row_per_entry() {
        let (tfm, rmt) = reference_dims();
        let report = variance_ratio_report(&tfm, &rmt, KeyInit::VariancePreserving).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("layer,operation,model,fwd_ratio,bwd_ratio\n"));
        assert_eq!(csv.lines().count(), 9);
    }
}
