//! Parameter and FLOP accounting for both architectures: closed-form
//! expressions, itemized per-component sums, and ground-truth counts from
//! instantiated parameter sets.
//!
//! The itemized sums are the authoritative numbers. The closed forms are
//! evaluated exactly as printed for comparison; where they disagree with the
//! itemized sums (the RMT FLOP form: a (1+L) contraction coefficient where
//! the items sum to (1+2L), and a missing unembedding projection term) the
//! report surfaces both values rather than correcting either.
//!
//! Dimension structs are deliberately unvalidated so degenerate corners
//! (L=0, even D_k=0) can be evaluated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rmt::RmtConfig;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TfmDims {
    pub v: u64,
    pub n: u64,
    pub d: u64,
    pub l: u64,
    pub h: u64,
    pub d_h: u64,
    pub d_ff: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RmtDims {
    pub v: u64,
    pub n: u64,
    pub d_k: u64,
    pub d_v: u64,
    pub r: u64,
    pub l: u64,
    pub d_ff: u64,
}

impl From<&TransformerConfig> for TfmDims {
    fn from(c: &TransformerConfig) -> Self {
        Self {
            v: c.v as u64,
            n: c.n as u64,
            d: c.d as u64,
            l: c.l as u64,
            h: c.h as u64,
            d_h: c.d_h as u64,
            d_ff: c.d_ff as u64,
        }
    }
}

impl From<&RmtConfig> for RmtDims {
    fn from(c: &RmtConfig) -> Self {
        Self {
            v: c.v as u64,
            n: c.n as u64,
            d_k: c.d_k as u64,
            d_v: c.d_v as u64,
            r: c.r as u64,
            l: c.l as u64,
            d_ff: c.d_ff as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LineItem {
    pub label: String,
    pub count: u64,
}

fn item(label: impl Into<String>, count: u64) -> LineItem {
    LineItem {
        label: label.into(),
        count,
    }
}

pub fn sum_items(items: &[LineItem]) -> u64 {
    items.iter().map(|i| i.count).sum()
}

/// Transformer parameter closed form `D(L(4 H D_h + 2 D_FF) + V)`.
pub fn tfm_params_formula(d: &TfmDims) -> u64 {
    d.d * (d.l * (4 * d.h * d.d_h + 2 * d.d_ff) + d.v)
}

/// Transformer per-component parameter items. Relative to the closed form
/// this adds the untied unembedding (V·D) and position embeddings (N·D).
pub fn tfm_params_itemized(d: &TfmDims) -> Vec<LineItem> {
    vec![
        item("word embeddings", d.v * d.d),
        item("position embeddings", d.n * d.d),
        item("attention projections (all layers)", d.l * 4 * d.h * d.d_h * d.d),
        item("feed-forward (all layers)", d.l * 2 * d.d * d.d_ff),
        item("unembedding", d.v * d.d),
    ]
}

/// RMT parameter closed form `R(2 D_k (3L+1) + D_v (2 L D_FF + V + N))`.
pub fn rmt_params_formula(d: &RmtDims) -> u64 {
    d.r * (2 * d.d_k * (3 * d.l + 1) + d.d_v * (2 * d.l * d.d_ff + d.v + d.n))
}

/// RMT per-component parameter items: embeddings, attention keys, feed
/// forward, unembedding. Relative to the closed form this adds the
/// unembedding block R(V·D_v + D_k), which the closed form omits.
pub fn rmt_params_itemized(d: &RmtDims) -> Vec<LineItem> {
    vec![
        item("word embeddings", d.r * d.v * d.d_v),
        item("position embeddings", d.r * d.n * d.d_v),
        item("embedding key vectors", 2 * d.r * d.d_k),
        item("attention QKV key vectors (all layers)", d.l * 3 * d.r * d.d_k),
        item("attention output key vectors (all layers)", d.l * d.r * d.d_k),
        item("feed-forward input key vectors (all layers)", d.l * d.r * d.d_k),
        item("feed-forward core (all layers)", d.l * 2 * d.r * d.d_v * d.d_ff),
        item("feed-forward output key vectors (all layers)", d.l * d.r * d.d_k),
        item("unembedding key vectors", d.r * d.d_k),
        item("unembedding weights", d.r * d.v * d.d_v),
    ]
}

/// Transformer forward-FLOP closed form
/// `4N(V + L D (2 D_h H + D_FF) + L (N D_h H + 3/4 N H))`,
/// evaluated as printed with the 3/4 term in floating point and a single
/// rounding at the end.
pub fn tfm_flops_formula(d: &TfmDims, seq_len: u64) -> u64 {
    let n = seq_len as f64;
    let (v, l, dd, dh, h, dff) = (
        d.v as f64,
        d.l as f64,
        d.d as f64,
        d.d_h as f64,
        d.h as f64,
        d.d_ff as f64,
    );
    let inner = v + l * dd * (2.0 * dh * h + dff) + l * (n * dh * h + 0.75 * n * h);
    (4.0 * n * inner).round() as u64
}

/// Transformer forward-FLOP items, the Chinchilla-style decomposition.
pub fn tfm_flops_itemized(d: &TfmDims, seq_len: u64) -> Vec<LineItem> {
    let n = seq_len;
    vec![
        item("embeddings", 2 * n * d.v * d.d),
        item("attention QKV projections (all layers)", d.l * 6 * n * d.d * d.d_h * d.h),
        item("attention scores (all layers)", d.l * 2 * n * n * d.d_h * d.h),
        item("attention softmax (all layers)", d.l * 3 * d.h * n * n),
        item("attention value mix (all layers)", d.l * 2 * n * n * d.d_h * d.h),
        item("attention output projections (all layers)", d.l * 2 * n * d.d * d.d_h * d.h),
        item("feed-forward (all layers)", d.l * 4 * n * d.d * d.d_ff),
        item("unembedding", 2 * n * d.v * d.d),
    ]
}

/// RMT forward-FLOP closed form
/// `6 N R D_k D_v (1+L) + N R (4 V D_v + L (4 N D_v + 3N + 4 D_v D_FF))`.
pub fn rmt_flops_formula(d: &RmtDims, seq_len: u64) -> u64 {
    let n = seq_len;
    6 * n * d.r * d.d_k * d.d_v * (1 + d.l)
        + n * d.r * (4 * d.v * d.d_v + d.l * (4 * n * d.d_v + 3 * n + 4 * d.d_v * d.d_ff))
}

/// RMT forward-FLOP items; the authoritative count.
pub fn rmt_flops_itemized(d: &RmtDims, seq_len: u64) -> Vec<LineItem> {
    let n = seq_len;
    let contraction = 2 * n * d.d_k * d.d_v * d.r;
    vec![
        item("word embeddings", 2 * n * d.v * d.r * d.d_v),
        item("position embeddings", 2 * n * d.v * d.r * d.d_v),
        item("embedding key vectors", 2 * contraction),
        item("attention QKV key vectors (all layers)", d.l * 3 * contraction),
        item("attention SHA (all layers)", d.l * (4 * n * n * d.d_v * d.r + 3 * d.r * n * n)),
        item("attention output key vectors (all layers)", d.l * contraction),
        item("feed-forward input key vectors (all layers)", d.l * contraction),
        item("feed-forward core (all layers)", d.l * 4 * n * d.r * d.d_v * d.d_ff),
        item("feed-forward output key vectors (all layers)", d.l * contraction),
        item("unembedding key vectors", contraction),
        item("unembedding weights", 2 * n * d.v * d.r * d.d_v),
    ]
}

/// Ground-truth parameter count: every learnable tensor, LayerNorm gains
/// included.
pub fn count_actual(params: &ParamSet) -> u64 {
    params.num_params()
}

/// Training FLOPs per token: 3x the forward cost (backward approximated as
/// twice forward), from the itemized forward count at the given sequence
/// length.
pub fn tfm_flops_train_per_token(d: &TfmDims, seq_len: u64) -> u64 {
    let fwd = sum_items(&tfm_flops_itemized(d, seq_len));
    assert_eq!(fwd % seq_len, 0, "itemized forward FLOPs divisible by sequence length");
    3 * fwd / seq_len
}

pub fn rmt_flops_train_per_token(d: &RmtDims, seq_len: u64) -> u64 {
    let fwd = sum_items(&rmt_flops_itemized(d, seq_len));
    assert_eq!(fwd % seq_len, 0, "itemized forward FLOPs divisible by sequence length");
    3 * fwd / seq_len
}

/// Full accounting for one architecture at one sequence length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResourceReport {
    pub arch: String,
    pub params_formula: u64,
    pub params_itemized: u64,
    pub params_actual: Option<u64>,
    pub flops_formula_fwd: u64,
    pub flops_itemized_fwd: u64,
    pub flops_train_per_token: u64,
    pub seq_len: u64,
    pub param_items: Vec<LineItem>,
    pub flop_items: Vec<LineItem>,
    /// Differences between closed forms and itemized sums, surfaced rather
    /// than corrected.
    pub notes: Vec<String>,
}

pub fn tfm_report(d: &TfmDims, seq_len: u64, actual: Option<u64>) -> ResourceReport {
    let param_items = tfm_params_itemized(d);
    let flop_items = tfm_flops_itemized(d, seq_len);
    let params_formula = tfm_params_formula(d);
    let params_itemized = sum_items(&param_items);
    let flops_formula_fwd = tfm_flops_formula(d, seq_len);
    let flops_itemized_fwd = sum_items(&flop_items);
    let mut notes = vec![format!(
        "itemized params exceed the closed form by (V+N)*D = {} (untied unembedding and position embeddings)",
        params_itemized - params_formula
    )];
    notes.push(format!(
        "itemized forward FLOPs exceed the closed form by {} (embedding/unembedding matmuls vs the form's 4NV term)",
        flops_itemized_fwd as i128 - flops_formula_fwd as i128
    ));
    ResourceReport {
        arch: "transformer".into(),
        params_formula,
        params_itemized,
        params_actual: actual,
        flops_formula_fwd,
        flops_itemized_fwd,
        flops_train_per_token: tfm_flops_train_per_token(d, seq_len),
        seq_len,
        param_items,
        flop_items,
        notes,
    }
}

pub fn rmt_report(d: &RmtDims, seq_len: u64, actual: Option<u64>) -> ResourceReport {
    let param_items = rmt_params_itemized(d);
    let flop_items = rmt_flops_itemized(d, seq_len);
    let params_formula = rmt_params_formula(d);
    let params_itemized = sum_items(&param_items);
    let flops_formula_fwd = rmt_flops_formula(d, seq_len);
    let flops_itemized_fwd = sum_items(&flop_items);
    let notes = vec![
        format!(
            "itemized params exceed the closed form by R*(V*D_v + D_k) = {} (the unembedding block)",
            params_itemized - params_formula
        ),
        format!(
            "itemized forward FLOPs exceed the closed form by {} (contraction coefficient (1+2L) vs (1+L), plus the unembedding projection)",
            flops_itemized_fwd as i128 - flops_formula_fwd as i128
        ),
    ];
    ResourceReport {
        arch: "rmt".into(),
        params_formula,
        params_itemized,
        params_actual: actual,
        flops_formula_fwd,
        flops_itemized_fwd,
        flops_train_per_token: rmt_flops_train_per_token(d, seq_len),
        seq_len,
        param_items,
        flop_items,
        notes,
    }
}

/// One point of a residual-stream-size sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub resid_size: u64,
    pub params_formula: u64,
    pub params_itemized: u64,
    pub flops_formula: u64,
    pub flops_itemized: u64,
}

/// Evaluate the transformer counters across residual widths D.
pub fn tfm_scaling_series(base: &TfmDims, seq_len: u64, sizes: &[u64]) -> Vec<ScalingPoint> {
    sizes
        .iter()
        .map(|&size| {
            let d = TfmDims { d: size, ..*base };
            ScalingPoint {
                resid_size: size,
                params_formula: tfm_params_formula(&d),
                params_itemized: sum_items(&tfm_params_itemized(&d)),
                flops_formula: tfm_flops_formula(&d, seq_len),
                flops_itemized: sum_items(&tfm_flops_itemized(&d, seq_len)),
            }
        })
        .collect()
}

/// Evaluate the RMT counters across residual sizes D_k*D_v at fixed D_v;
/// each requested size must be divisible by D_v.
pub fn rmt_scaling_series(base: &RmtDims, seq_len: u64, sizes: &[u64]) -> Result<Vec<ScalingPoint>> {
    sizes
        .iter()
        .map(|&size| {
            if size % base.d_v != 0 {
                return Err(Error::input(format!(
                    "residual size {size} is not divisible by d_v {}",
                    base.d_v
                )));
            }
            let d = RmtDims {
                d_k: size / base.d_v,
                ..*base
            };
            Ok(ScalingPoint {
                resid_size: size,
                params_formula: rmt_params_formula(&d),
                params_itemized: sum_items(&rmt_params_itemized(&d)),
                flops_formula: rmt_flops_formula(&d, seq_len),
                flops_itemized: sum_items(&rmt_flops_itemized(&d, seq_len)),
            })
        })
        .collect()
}

pub fn scaling_series_csv(series: &[ScalingPoint]) -> String {
    let mut out = String::from("resid_size,params_formula,params_itemized,flops_formula,flops_itemized\n");
    for p in series {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.resid_size, p.params_formula, p.params_itemized, p.flops_formula, p.flops_itemized
        ));
    }
    out
}

impl ResourceReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("architecture: {}  (seq_len {})\n\n", self.arch, self.seq_len));
        s.push_str("parameters\n");
        for it in &self.param_items {
            s.push_str(&format!("  {:<48} {:>16}\n", it.label, it.count));
        }
        s.push_str(&format!("  {:<48} {:>16}\n", "itemized total", self.params_itemized));
        s.push_str(&format!("  {:<48} {:>16}\n", "closed form", self.params_formula));
        if let Some(actual) = self.params_actual {
            s.push_str(&format!("  {:<48} {:>16}\n", "actual (incl. norm gains)", actual));
        }
        s.push_str("\nforward FLOPs\n");
        for it in &self.flop_items {
            s.push_str(&format!("  {:<48} {:>16}\n", it.label, it.count));
        }
        s.push_str(&format!("  {:<48} {:>16}\n", "itemized total", self.flops_itemized_fwd));
        s.push_str(&format!("  {:<48} {:>16}\n", "closed form", self.flops_formula_fwd));
        s.push_str(&format!(
            "  {:<48} {:>16}\n",
            "train FLOPs per token (3x fwd)", self.flops_train_per_token
        ));
        if !self.notes.is_empty() {
            s.push_str("\nnotes\n");
            for n in &self.notes {
                s.push_str(&format!("  - {n}\n"));
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,label,count\n");
        for it in &self.param_items {
            out.push_str(&format!("params,{},{}\n", it.label, it.count));
        }
        out.push_str(&format!("params,itemized total,{}\n", self.params_itemized));
        out.push_str(&format!("params,closed form,{}\n", self.params_formula));
        if let Some(actual) = self.params_actual {
            out.push_str(&format!("params,actual,{actual}\n"));
        }
        for it in &self.flop_items {
            out.push_str(&format!("flops,{},{}\n", it.label, it.count));
        }
        out.push_str(&format!("flops,itemized total,{}\n", self.flops_itemized_fwd));
        out.push_str(&format!("flops,closed form,{}\n", self.flops_formula_fwd));
        out.push_str(&format!("flops,train per token,{}\n", self.flops_train_per_token));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpt2_medium() -> TfmDims {
        TfmDims {
            v: 50257,
            n: 512,
            d: 1024,
            l: 24,
            h: 16,
            d_h: 64,
            d_ff: 4096,
        }
    }

    fn rmt_mirror() -> RmtDims {
        RmtDims {
            v: 50257,
            n: 512,
            d_k: 1024,
            d_v: 64,
            r: 16,
            l: 24,
            d_ff: 4096,
        }
    }

    #[test]
    fn transformer_params_closed_form_at_reference_dims() {
        assert_eq!(tfm_params_formula(&gpt2_medium()), 353_453_056);
    }

    #[test]
    fn transformer_params_itemized_adds_untied_tables() {
        let d = gpt2_medium();
        let itemized = sum_items(&tfm_params_itemized(&d));
        assert_eq!(itemized, 405_440_512);
        assert_eq!(itemized - tfm_params_formula(&d), (d.v + d.n) * d.d);
    }

    #[test]
    fn transformer_params_formula_collapses_at_degenerate_dims() {
        let d = TfmDims {
            v: 1,
            n: 1,
            d: 1,
            l: 0,
            h: 1,
            d_h: 1,
            d_ff: 1,
        };
        assert_eq!(tfm_params_formula(&d), 1);
    }

    #[test]
    fn rmt_params_closed_form_at_mirror_dims() {
        assert_eq!(rmt_params_formula(&rmt_mirror()), 255_706_112);
    }

    #[test]
    fn rmt_params_itemized_adds_unembedding_block() {
        let d = rmt_mirror();
        let itemized = sum_items(&rmt_params_itemized(&d));
        // The closed form omits the whole unembedding block R(V*D_v + D_k):
        // weights 51,463,168 plus key vectors 16,384.
        assert_eq!(itemized - rmt_params_formula(&d), d.r * (d.v * d.d_v + d.d_k));
        assert_eq!(itemized, 307_185_664);
    }

    #[test]
    fn rmt_degenerate_tally_is_hand_countable() {
        let d = RmtDims {
            v: 1,
            n: 1,
            d_k: 1,
            d_v: 1,
            r: 1,
            l: 1,
            d_ff: 1,
        };
        // word 1 + pos 1 + embed keys 2 + qkv 3 + o 1 + ff in 1 + core 2 +
        // ff out 1 + unembed key 1 + unembed weights 1 = 14.
        assert_eq!(sum_items(&rmt_params_itemized(&d)), 14);
    }

    #[test]
    fn transformer_flops_formula_golden_value() {
        // 4*512*(50257 + 24*1024*6144 + 24*(512*1024 + 0.75*512*16)).
        assert_eq!(tfm_flops_formula(&gpt2_medium(), 512), 335_412_365_312);
    }

    #[test]
    fn transformer_flops_itemized_equals_formula_on_shared_components() {
        let d = gpt2_medium();
        let items = tfm_flops_itemized(&d, 512);
        let itemized = sum_items(&items);
        let embed_terms: u64 = items
            .iter()
            .filter(|i| i.label.contains("embedding"))
            .map(|i| i.count)
            .sum();
        // The closed form replaces the embedding/unembedding matmuls by 4NV.
        assert_eq!(itemized - embed_terms + 4 * 512 * d.v, tfm_flops_formula(&d, 512));
    }

    #[test]
    fn rmt_flops_formula_with_zero_dk_keeps_non_contraction_terms() {
        let mut d = rmt_mirror();
        d.d_k = 0;
        let n = 512u64;
        let expect = n * d.r * (4 * d.v * d.d_v + d.l * (4 * n * d.d_v + 3 * n + 4 * d.d_v * d.d_ff));
        assert_eq!(rmt_flops_formula(&d, n), expect);
    }

    #[test]
    fn rmt_contraction_subtotal_matches_bullet_structure() {
        let d = rmt_mirror();
        let unit = 2 * 512 * d.d_k * d.d_v * d.r;
        let contraction: u64 = rmt_flops_itemized(&d, 512)
            .iter()
            .filter(|i| i.label.contains("key vectors"))
            .map(|i| i.count)
            .sum();
        // 4 embed + (6+2)L attention + 4L FF + 2 unembed contraction halves,
        // i.e. N R D_k D_v (6 + 12 L).
        assert_eq!(contraction, unit / 2 * (6 + 12 * d.l));
    }

    #[test]
    fn train_flops_are_three_times_forward_per_token() {
        let d = gpt2_medium();
        let fwd = sum_items(&tfm_flops_itemized(&d, 512));
        assert_eq!(tfm_flops_train_per_token(&d, 512), 3 * fwd / 512);
        let r = rmt_mirror();
        let fwd = sum_items(&rmt_flops_itemized(&r, 512));
        assert_eq!(rmt_flops_train_per_token(&r, 512), 3 * fwd / 512);
    }

    #[test]
    fn doubling_transformer_width_doubles_params_and_nearly_doubles_flops() {
        let base = gpt2_medium();
        let series = tfm_scaling_series(&base, 512, &[1024, 2048]);
        assert_eq!(series[1].params_formula, 2 * series[0].params_formula);
        let ratio = series[1].flops_formula as f64 / series[0].flops_formula as f64;
        assert!((1.92..=1.96).contains(&ratio), "flop ratio {ratio}");
    }

    #[test]
    fn rmt_scaling_is_nearly_flat() {
        let base = rmt_mirror();
        let series = rmt_scaling_series(&base, 512, &[1024, 2048]).unwrap();
        let dp = series[1].params_formula as f64 / series[0].params_formula as f64 - 1.0;
        assert!((dp - 0.000148).abs() < 0.00002, "param growth {dp}");
        let df = series[1].flops_formula as f64 / series[0].flops_formula as f64 - 1.0;
        assert!(df < 0.01, "flop growth {df}");
    }

    #[test]
    fn empty_scaling_series_is_empty() {
        assert!(tfm_scaling_series(&gpt2_medium(), 512, &[]).is_empty());
        assert!(rmt_scaling_series(&rmt_mirror(), 512, &[]).unwrap().is_empty());
    }

    #[test]
    fn scaling_series_rejects_indivisible_sizes() {
        assert!(rmt_scaling_series(&rmt_mirror(), 512, &[1000]).is_err());
    }

    #[test]
    fn csv_has_pinned_columns() {
        let series = tfm_scaling_series(&gpt2_medium(), 512, &[1024]);
        let csv = scaling_series_csv(&series);
        assert!(csv.starts_with("resid_size,params_formula,params_itemized,flops_formula,flops_itemized\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
