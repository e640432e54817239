//! Joint optimization of the contrastive, orthogonality and matching losses.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::InputElem;
use crate::contrastive::{info_nce_graph, DEFAULT_TEMPERATURE};
use crate::embedder::{encode_batch, orth_penalty, Side};
use crate::error::{Error, Result};
use crate::matcher::{
    answer_logits, assemble, assemble_with_slot, layout_input, project, qdm_loss_graph, FeatureRef, MatchingMode, Slot,
};
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::params::Session;
use crate::rng::{domain, keyed_rng};
use crate::synth::{TaskConfig, TrainingInstance, World};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Share of steps spent in linear warmup before cosine decay to zero.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

fn default_warmup() -> f64 {
    0.03
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_fraction: default_warmup(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub steps: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_peak")]
    pub lr_peak: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::w_orth")]
    pub w_orth: f64,
    #[serde(default = "defaults::w_qdm")]
    pub w_qdm: f64,
    #[serde(default)]
    pub matching_mode: MatchingMode,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
}

mod defaults {
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr_peak() -> f64 {
        1e-4
    }
    pub fn temperature() -> f64 {
        super::DEFAULT_TEMPERATURE
    }
    pub fn w_orth() -> f64 {
        0.5
    }
    pub fn w_qdm() -> f64 {
        0.1
    }
}

impl TrainConfig {
    pub fn new(model: ModelConfig, steps: u64, seed: u64) -> Self {
        Self {
            model,
            steps,
            batch_size: defaults::batch_size(),
            lr_peak: defaults::lr_peak(),
            schedule: Schedule::default(),
            temperature: defaults::temperature(),
            w_orth: defaults::w_orth(),
            w_qdm: defaults::w_qdm(),
            matching_mode: MatchingMode::default(),
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.model.validate(&format!("{path}.model"))?;
        let bad = |field: &str, msg: &str| Err(Error::config(format!("{path}.{field}"), msg));
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr_peak.is_finite() && self.lr_peak >= 0.0) {
            return bad("lr_peak", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_fraction) {
            return bad("schedule.warmup_fraction", "must lie in [0, 1)");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature", "must be positive and finite");
        }
        if !(self.w_orth.is_finite() && self.w_orth >= 0.0) {
            return bad("w_orth", "must be finite and non-negative");
        }
        if !(self.w_qdm.is_finite() && self.w_qdm >= 0.0) {
            return bad("w_qdm", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// Checks that sequences from `task` fit a model shaped by `model`.
pub fn check_model_task(model: &ModelConfig, task: &TaskConfig) -> Result<()> {
    let d = model.backbone.d_model;
    if task.patch_dim != d {
        return Err(Error::Compatibility(format!(
            "task patch_dim {} differs from model d_model {d}",
            task.patch_dim
        )));
    }
    let wrap = if model.chat_wrap { 3 } else { 0 };
    let need = task.query_len().max(task.doc_len()) + wrap + model.k;
    let max = model.backbone.max_seq_len;
    if need > max {
        return Err(Error::Compatibility(format!(
            "encoding needs {need} positions, model holds {max}"
        )));
    }
    Ok(())
}

/// [`check_model_task`] plus the matching layout for `cfg.matching_mode`.
pub fn check_compatible(cfg: &TrainConfig, task: &TaskConfig) -> Result<()> {
    check_model_task(&cfg.model, task)?;
    if cfg.matching_mode != MatchingMode::Off {
        let inst = World::new(task)?.instance(0);
        let max = cfg.model.backbone.max_seq_len;
        assemble_with_slot(&inst.query, &inst.positive, &inst.hard_negative, cfg.matching_mode, max, Slot::One)
            .map_err(|e| Error::Compatibility(format!("matching layout: {e}")))?;
    }
    Ok(())
}

/// Linear warmup to `lr_peak`, then half-cosine decay reaching 0 at `steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.steps;
    let warm = ((cfg.schedule.warmup_fraction * total as f64).round() as u64).min(total.saturating_sub(1));
    let step = step.min(total);
    if step < warm {
        return cfg.lr_peak * step as f64 / warm as f64;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    cfg.lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// `cl + w_orth * orth + w_qdm * qdm`, with the matching term absent when
/// matching is off.
pub fn combine(cl: f64, orth: f64, qdm: Option<f64>, cfg: &TrainConfig) -> f64 {
    cl + cfg.w_orth * orth + qdm.map_or(0.0, |q| cfg.w_qdm * q)
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cl: Var,
    pub orth: Var,
    pub qdm: Option<Var>,
}

/// Records the full objective for one batch. `slot_seed` drives the
/// positive-slot draws of the matching layouts.
pub fn total_loss_graph<T: Scalar>(
    sess: &mut Session<'_, T>,
    cfg: &TrainConfig,
    batch: &[&TrainingInstance],
    slot_seed: u64,
) -> Result<LossVars> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut items = Vec::with_capacity(3 * b);
    items.extend(batch.iter().map(|i| (&i.query, Side::Query)));
    items.extend(batch.iter().map(|i| (&i.positive, Side::Document)));
    items.extend(batch.iter().map(|i| (&i.hard_negative, Side::Document)));
    let enc = encode_batch(sess, &cfg.model, &items)?;

    let tape = &mut sess.tape;
    let q = tape.slice_rows(enc.fused, 0, b)?;
    let p = tape.slice_rows(enc.fused, b, b)?;
    let n = tape.slice_rows(enc.fused, 2 * b, b)?;
    let cl = info_nce_graph(tape, q, p, n, cfg.temperature)?;
    let orth = orth_penalty(tape, enc.rows, cfg.model.k)?;
    let weighted_orth = tape.scale(orth, T::of(cfg.w_orth));
    let mut total = tape.add(cl, weighted_orth)?;

    let mut qdm = None;
    if cfg.matching_mode != MatchingMode::Off {
        let z = project(sess, enc.fused)?;
        let mut rng = keyed_rng(cfg.seed, domain::SLOTS, slot_seed);
        let max = cfg.model.backbone.max_seq_len;
        let mut layouts = Vec::with_capacity(b);
        let mut inputs = Vec::with_capacity(b);
        for (i, inst) in batch.iter().enumerate() {
            let layout = assemble(&inst.query, &inst.positive, &inst.hard_negative, cfg.matching_mode, max, &mut rng)?;
            inputs.push(layout_input(&layout, |f| {
                let row = match f {
                    FeatureRef::Query => i,
                    FeatureRef::Positive => b + i,
                    FeatureRef::Negative => 2 * b + i,
                };
                InputElem::Row(z, row)
            })?);
            layouts.push(layout);
        }
        let logits = answer_logits(sess, &cfg.model.backbone, &layouts, &inputs)?;
        let labels: Vec<_> = layouts.iter().flat_map(|l| l.labels.iter().copied()).collect();
        let loss = qdm_loss_graph(&mut sess.tape, logits, &labels)?;
        let weighted = sess.tape.scale(loss, T::of(cfg.w_qdm));
        total = sess.tape.add(total, weighted)?;
        qdm = Some(loss);
    }
    Ok(LossVars { total, cl, orth, qdm })
}

/// Per-step record; serialized as one metrics CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cl: f64,
    pub loss_orth: f64,
    pub loss_qdm: Option<f64>,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_cl,loss_orth,loss_qdm,grad_norm";

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        let qdm = self.loss_qdm.map(|q| q.to_string()).unwrap_or_default();
        write!(
            s,
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.loss_total, self.loss_cl, self.loss_orth, qdm, self.grad_norm
        )
        .unwrap();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    /// Fingerprint of the task the model is trained on, once known.
    pub task_fingerprint: Option<String>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate("train")?;
        let model = Model::init(config.model.clone(), config.seed ^ domain::INIT.rotate_left(32))?;
        let adam = Adam::new(&model.params);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            task_fingerprint: None,
        })
    }

    /// Seed that identifies the batch of step `step`, for diagnostics.
    pub fn batch_seed(&self, step: u64) -> u64 {
        self.config.seed.rotate_left(17) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Dataset indices for 1-based `step`: consecutive slices of per-epoch
/// seeded permutations.
pub fn batch_indices(cfg: &TrainConfig, n_train: usize, step: u64) -> Vec<usize> {
    let n = n_train as u64;
    let mut out = Vec::with_capacity(cfg.batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..cfg.batch_size as u64 {
        let g = (step - 1) * cfg.batch_size as u64 + b;
        let epoch = g / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n_train).collect();
            perm.shuffle(&mut keyed_rng(cfg.seed, domain::EPOCH, epoch));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(g % n) as usize]);
    }
    out
}

/// Losses and gradients of one batch without updating anything.
pub fn evaluate_batch(
    model: &Model,
    cfg: &TrainConfig,
    batch: &[&TrainingInstance],
    slot_seed: u64,
) -> Result<(f64, f64, f64, Option<f64>, crate::autodiff::GradientSet<f32>)> {
    let mut sess = Session::new(&model.params);
    let vars = total_loss_graph(&mut sess, cfg, batch, slot_seed)?;
    let value = |v: Var| sess.tape.value(v).item() as f64;
    let (total, cl, orth) = (value(vars.total), value(vars.cl), value(vars.orth));
    let qdm = vars.qdm.map(value);
    let grads = sess.tape.backward(vars.total)?.into_params();
    Ok((total, cl, orth, qdm, grads))
}

/// One optimizer update on the batch of the next step.
pub fn train_step(state: &mut TrainState, data: &[TrainingInstance]) -> Result<StepMetrics> {
    if data.is_empty() {
        return Err(Error::Contract("no training instances".into()));
    }
    let step = state.step + 1;
    let idx = batch_indices(&state.config, data.len(), step);
    let batch: Vec<&TrainingInstance> = idx.iter().map(|&i| &data[i]).collect();
    let (total, cl, orth, qdm, grads) = evaluate_batch(&state.model, &state.config, &batch, step)?;
    let grad_norm = grads.global_norm();
    let finite = [total, cl, orth, qdm.unwrap_or(0.0), grad_norm].iter().all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            step,
            batch_seed: state.batch_seed(step),
            detail: format!(
                "loss_total={total} loss_cl={cl} loss_orth={orth} loss_qdm={qdm:?} grad_norm={grad_norm} batch={idx:?}"
            ),
        });
    }
    let lr = lr_at(step, &state.config);
    state.adam.step(&mut state.model.params, &grads, lr)?;
    state.step = step;
    Ok(StepMetrics {
        step,
        lr,
        loss_total: total,
        loss_cl: cl,
        loss_orth: orth,
        loss_qdm: qdm,
        grad_norm,
    })
}

/// Trains up to `until` completed steps, reporting each step.
pub fn run(
    state: &mut TrainState,
    data: &[TrainingInstance],
    until: u64,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<()> {
    while state.step < until.min(state.config.steps) {
        let m = train_step(state, data)?;
        on_step(state, &m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-3,
            ..TrainConfig::new(ModelConfig::default(), steps, 1)
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg(1000);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(30, &c), 1e-3);
        assert_eq!(lr_at(1000, &c), 0.0);
        assert!((lr_at(515, &c) - 5e-4).abs() < 1e-9);
        assert!((lr_at(15, &c) - 5e-4).abs() < 1e-12);
        let one = cfg(1);
        assert_eq!(lr_at(1, &one), 0.0);
        assert_eq!(lr_at(0, &one), 1e-3);
    }

    #[test]
    fn combine_weights() {
        let c = cfg(10);
        assert!((combine(1.0, 0.4, Some(2.0), &c) - 1.4).abs() < 1e-12);
        let z = TrainConfig {
            w_orth: 0.0,
            w_qdm: 0.0,
            ..c
        };
        assert_eq!(combine(0.7, 0.4, Some(2.0), &z), 0.7);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let c = TrainConfig {
            batch_size: 4,
            ..cfg(10)
        };
        let mut seen: Vec<usize> = (1..=3).flat_map(|s| batch_indices(&c, 12, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_eq!(batch_indices(&c, 12, 5), batch_indices(&c, 12, 5));
    }

    #[test]
    fn metrics_line() {
        let m = StepMetrics {
            step: 3,
            lr: 0.5,
            loss_total: 1.25,
            loss_cl: 1.0,
            loss_orth: 0.5,
            loss_qdm: None,
            grad_norm: 2.0,
        };
        assert_eq!(m.csv_line(), "3,0.5,1.25,1,0.5,,2");
        assert_eq!(METRICS_HEADER.split(',').count(), m.csv_line().split(',').count());
    }
}
