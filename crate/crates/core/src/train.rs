//! Training harness: run configuration, the deterministic training loop
//! with JSONL metrics and periodic checkpoints, held-out evaluation,
//! finite-difference gradient checking, and the residual-size sweep driver.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{split_dev, tokenize_bytes, Batches, Example};
use crate::error::{Error, Result};
use crate::graph::{relative_error, Arr, Graph, Var};
use crate::lm::{loss_fn, loss_graph, loss_value, logits_value, ModelSpec};
use crate::optim::{adamw_step, AdamConfig, AdamState};
use crate::params::{BoundParams, InitOptions, KeyInit, ParamSet};
use crate::schedule::lr_at;

/// Fraction of the corpus held out as the dev split (its final bytes).
pub const DEV_FRAC: f64 = 0.05;

/// Windows evaluated per forward pass during held-out evaluation.
const EVAL_BATCH: usize = 8;

/// Entries probed per tensor by the gradient checker before switching to
/// strided sampling.
const GRAD_CHECK_SAMPLE: usize = 10_000;

fn d_warmup() -> f64 {
    0.05
}
fn d_final() -> f64 {
    0.1
}
fn d_z_coef() -> f64 {
    1e-4
}
fn d_log_interval() -> u64 {
    1
}
fn d_ckpt_interval() -> u64 {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    #[serde(flatten)]
    pub model: ModelSpec,
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_max: f64,
    #[serde(default = "d_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "d_final")]
    pub final_lr_frac: f64,
    #[serde(flatten)]
    pub adam: AdamConfig,
    #[serde(default = "d_z_coef")]
    pub z_loss_coef: f64,
    #[serde(default)]
    pub seed: u64,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "d_log_interval")]
    pub log_interval: u64,
    #[serde(default = "d_ckpt_interval")]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub residual_scaling: bool,
    #[serde(default)]
    pub key_init: KeyInit,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.seq_len == 0 || self.seq_len > self.model.max_seq() {
            return Err(Error::config(format!(
                "seq_len {} must be in 1..={}",
                self.seq_len,
                self.model.max_seq()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        for (name, f) in [("warmup_frac", self.warmup_frac), ("final_lr_frac", self.final_lr_frac)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("{name} must be in (0,1], got {f}")));
            }
        }
        if self.z_loss_coef < 0.0 {
            return Err(Error::config(format!(
                "z-loss coefficient must be non-negative, got {}",
                self.z_loss_coef
            )));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::config("log and checkpoint intervals must be positive"));
        }
        Ok(())
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            residual_scaling: self.residual_scaling,
            key_init: self.key_init,
        }
    }
}

/// One metrics line. `wall_seconds` is carried in memory but serialized to
/// the timings sidecar instead of metrics.jsonl, keeping the metrics file
/// byte-reproducible across runs with the same seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub ce_loss: f64,
    pub z_loss: f64,
    pub lr: f64,
    pub flops_cum: u64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arch: String,
    pub steps: u64,
    pub params_actual: u64,
    pub resid_size: u64,
    pub dev_ce_untrained: f64,
    pub dev_ce_final: f64,
    pub dev_ppl_final: f64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn ckpt_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.ckpt"))
}

/// One optimizer step on one batch: forward, ce+z loss, backward, AdamW.
/// Returns the pre-update (ce, z) of the batch.
pub fn train_step(
    model: &ModelSpec,
    params: &mut ParamSet,
    adam: &mut AdamState,
    examples: &[Example],
    z_coef: f64,
    lr: f64,
    acfg: &AdamConfig,
) -> Result<(f64, f64)> {
    let inputs: Vec<&[usize]> = examples.iter().map(|(x, _)| x.as_slice()).collect();
    let targets: Vec<usize> = examples.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params);
    let logits = model.forward(&bound, &inputs)?;
    let loss = loss_graph(&g, logits, &targets, z_coef)?;
    let ce = *g.value(loss.ce).first().expect("scalar ce");
    let z = *g.value(loss.z).first().expect("scalar z");
    let vars: Vec<Var> = (0..params.len()).map(|i| bound.var_at(i)).collect();
    let mut grads = g.backward(loss.total);
    let grad_arrs: Vec<Arr> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .take(v)
                .unwrap_or_else(|| Arr::zeros(params.entry(i).value.raw_dim()))
        })
        .collect();
    adamw_step(params, &grad_arrs, adam, lr, acfg)?;
    Ok((ce, z))
}

/// Mean cross-entropy and perplexity over non-overlapping windows of the
/// token array; every token in a complete window is predicted exactly once.
pub fn evaluate_tokens(
    model: &ModelSpec,
    params: &ParamSet,
    tokens: &[usize],
    seq_len: usize,
) -> Result<(f64, f64)> {
    if tokens.len() < seq_len + 1 {
        return Err(Error::input(format!(
            "evaluation corpus of {} tokens is shorter than seq_len+1 = {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let windows = (tokens.len() - seq_len - 1) / seq_len + 1;
    let mut total_ce = 0.0;
    let mut positions = 0usize;
    let mut w = 0;
    while w < windows {
        let group = (windows - w).min(EVAL_BATCH);
        let inputs: Vec<&[usize]> = (w..w + group)
            .map(|i| &tokens[i * seq_len..i * seq_len + seq_len])
            .collect();
        let targets: Vec<usize> = (w..w + group)
            .flat_map(|i| tokens[i * seq_len + 1..i * seq_len + seq_len + 1].iter().copied())
            .collect();
        let logits = logits_value(model, params, &inputs)?;
        let (ce, _) = loss_fn(&logits, &targets, 0.0)?;
        total_ce += ce * (group * seq_len) as f64;
        positions += group * seq_len;
        w += group;
    }
    let ce = total_ce / positions as f64;
    Ok((ce, ce.exp()))
}

/// Run the full training loop, writing metrics.jsonl, timings.jsonl,
/// config.json, periodic checkpoints, and summary.json under `out_dir`.
pub fn run_train(cfg: &TrainRunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut config_json = serde_json::to_string_pretty(cfg)?;
    config_json.push('\n');
    fs::write(cfg.out_dir.join("config.json"), config_json)?;

    let bytes = fs::read(&cfg.corpus)
        .map_err(|e| Error::input(format!("corpus {}: {e}", cfg.corpus.display())))?;
    let tokens = tokenize_bytes(&bytes);
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.model.vocab()) {
        return Err(Error::input(format!(
            "corpus token {bad} exceeds model vocabulary {}",
            cfg.model.vocab()
        )));
    }
    let (train_tokens, dev_tokens) = split_dev(&tokens, DEV_FRAC)?;
    let batches = Batches::new(train_tokens, cfg.seq_len, cfg.batch_size, cfg.seed)?;

    let mut params = cfg.model.init(cfg.seed, &cfg.init_options())?;
    let mut adam = AdamState::new(&params);
    let params_actual = params.num_params();
    let (dev_ce_untrained, _) = evaluate_tokens(&cfg.model, &params, dev_tokens, cfg.seq_len)?;
    save_checkpoint(&ckpt_path(&cfg.out_dir, 0), &cfg.model, 0, &params, &adam)?;

    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut timings = BufWriter::new(File::create(cfg.out_dir.join("timings.jsonl"))?);
    let flops_per_token = cfg.model.flops_train_per_token(cfg.seq_len);
    let tokens_per_step = (cfg.batch_size * cfg.seq_len) as u64;
    let start = Instant::now();

    for step in 1..=cfg.steps {
        let examples = batches.batch(step - 1);
        let lr = lr_at(step, cfg.steps, cfg.lr_max, cfg.warmup_frac, cfg.final_lr_frac);
        let (ce, z) = train_step(&cfg.model, &mut params, &mut adam, &examples, cfg.z_loss_coef, lr, &cfg.adam)?;
        if step % cfg.log_interval == 0 || step == cfg.steps {
            let record = MetricsRecord {
                step,
                tokens_seen: step * tokens_per_step,
                ce_loss: ce,
                z_loss: z,
                lr,
                flops_cum: step * tokens_per_step * flops_per_token,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut metrics, &record)?;
            metrics.write_all(b"\n")?;
            let timing = TimingRecord {
                step,
                wall_seconds: record.wall_seconds,
            };
            serde_json::to_writer(&mut timings, &timing)?;
            timings.write_all(b"\n")?;
        }
        if step % cfg.checkpoint_interval == 0 || step == cfg.steps {
            save_checkpoint(&ckpt_path(&cfg.out_dir, step), &cfg.model, step, &params, &adam)?;
        }
    }
    metrics.flush()?;
    timings.flush()?;

    let (dev_ce_final, dev_ppl_final) = evaluate_tokens(&cfg.model, &params, dev_tokens, cfg.seq_len)?;
    let summary = TrainSummary {
        arch: cfg.model.arch().into(),
        steps: cfg.steps,
        params_actual,
        resid_size: cfg.model.residual_size() as u64,
        dev_ce_untrained,
        dev_ce_final,
        dev_ppl_final,
        final_checkpoint: ckpt_path(&cfg.out_dir, cfg.steps),
        metrics_path,
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    fs::write(cfg.out_dir.join("summary.json"), summary_json)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked_entries: usize,
    pub total_entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub arch: String,
    pub fd_step: f64,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

/// Compare analytic gradients of the ce+z objective against central finite
/// differences for every parameter tensor. Tensors above the sampling
/// threshold are probed at evenly strided entries, with the probe count
/// reported per tensor.
pub fn grad_check(
    model: &ModelSpec,
    batch: &[&[usize]],
    targets: &[usize],
    z_coef: f64,
    fd_step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    model.validate()?;
    if fd_step <= 0.0 || fd_step.is_nan() {
        return Err(Error::input(format!("fd step must be positive, got {fd_step}")));
    }
    let params = model.init(seed, &InitOptions::default())?;
    let g = Graph::new();
    let bound = BoundParams::bind(&g, &params);
    let logits = model.forward(&bound, batch)?;
    let loss = loss_graph(&g, logits, targets, z_coef)?;
    let vars: Vec<Var> = (0..params.len()).map(|i| bound.var_at(i)).collect();
    let mut grads = g.backward(loss.total);
    let analytic: Vec<Arr> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .take(v)
                .unwrap_or_else(|| Arr::zeros(params.entry(i).value.raw_dim()))
        })
        .collect();

    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for i in 0..params.len() {
        let total_entries = params.entry(i).value.len();
        let probes: Vec<usize> = if total_entries <= GRAD_CHECK_SAMPLE {
            (0..total_entries).collect()
        } else {
            (0..GRAD_CHECK_SAMPLE)
                .map(|j| j * total_entries / GRAD_CHECK_SAMPLE)
                .collect()
        };
        let mut max_rel = 0.0f64;
        for &idx in &probes {
            let original = {
                let slice = work.entry(i).value.as_slice().expect("standard layout");
                slice[idx]
            };
            work.entry_mut(i).value.as_slice_mut().expect("standard layout")[idx] = original + fd_step;
            let plus = loss_value(model, &work, batch, targets, z_coef)?;
            work.entry_mut(i).value.as_slice_mut().expect("standard layout")[idx] = original - fd_step;
            let minus = loss_value(model, &work, batch, targets, z_coef)?;
            work.entry_mut(i).value.as_slice_mut().expect("standard layout")[idx] = original;
            let fd = (plus - minus) / (2.0 * fd_step);
            let a = analytic[i].as_slice().expect("standard layout")[idx];
            max_rel = max_rel.max(relative_error(a, fd, 1e-3));
        }
        overall = overall.max(max_rel);
        tensors.push(TensorCheck {
            name: params.entry(i).name.clone(),
            checked_entries: probes.len(),
            total_entries,
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport {
        arch: model.arch().into(),
        fd_step,
        max_rel_err: overall,
        tensors,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d_k: usize,
    pub resid_size: u64,
    pub params_actual: u64,
    pub dev_ce_final: f64,
    pub dev_ppl_final: f64,
    pub out_dir: PathBuf,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("resid_size,d_k,params_actual,dev_ce,dev_ppl\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.resid_size, p.d_k, p.params_actual, p.dev_ce_final, p.dev_ppl_final
        ));
    }
    out
}

/// Train one run per key dimension with everything else held fixed, each in
/// `out_dir/dk<value>`, and write the combined dev-loss-vs-residual-size
/// CSV to `out_dir/sweep.csv`.
pub fn run_sweep(base: &TrainRunConfig, dk_values: &[usize]) -> Result<Vec<SweepPoint>> {
    if dk_values.is_empty() {
        return Err(Error::input("sweep needs at least one key dimension"));
    }
    let ModelSpec::Rmt(base_model) = &base.model else {
        return Err(Error::config("the residual-size sweep varies d_k and needs an rmt model"));
    };
    let mut points = Vec::with_capacity(dk_values.len());
    for &d_k in dk_values {
        let mut model = base_model.clone();
        model.d_k = d_k;
        let cfg = TrainRunConfig {
            model: ModelSpec::Rmt(model),
            out_dir: base.out_dir.join(format!("dk{d_k}")),
            ..base.clone()
        };
        let summary = run_train(&cfg)?;
        points.push(SweepPoint {
            d_k,
            resid_size: summary.resid_size,
            params_actual: summary.params_actual,
            dev_ce_final: summary.dev_ce_final,
            dev_ppl_final: summary.dev_ppl_final,
            out_dir: cfg.out_dir,
        });
    }
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("sweep.csv"), sweep_csv(&points))?;
    Ok(points)
}
