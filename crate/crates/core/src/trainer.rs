//! Toy supervised training: pre-training of the base model on a synthetic
//! task, and fine-tuning under a placement plan with linear warmup followed
//! by cosine decay.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::lora::{train_step_lora, Optimizer, OptimizerKind, PlacementPlan};
use crate::model::{GradientSet, ModelConfig, ModelParams};
use crate::probe::{loss_and_full_grad, probe_loss, ProbeSample};
use crate::tensor::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_ratio: 0.03,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidArgument(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "warmup_ratio must lie in (0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    /// `round(warmup_ratio · steps)`, clamped to `1..steps`.
    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_ratio * self.steps as f64).round() as usize).clamp(1, self.steps - 1)
    }
}

/// Learning rate at `step`: linear from 0 to `peak_lr` over the warmup
/// steps, then cosine decay to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.steps {
        return Err(Error::StepOutOfRange { step, steps: cfg.steps });
    }
    let warmup = cfg.warmup_steps();
    if step <= warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (cfg.steps - warmup) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: Task,
    pub train: Vec<ProbeSample>,
    pub eval: Vec<ProbeSample>,
}

impl TaskData {
    /// Train and eval sets drawn from disjoint splits of `seed`.
    pub fn generate(task: Task, config: &ModelConfig, n_train: usize, n_eval: usize, seed: u64) -> Result<Self> {
        task.check(config.vocab_size, config.max_seq_len)?;
        if n_train == 0 || n_eval == 0 {
            return Err(Error::InvalidArgument("train and eval sets must be nonempty".into()));
        }
        let rng = RngState::new(seed);
        Ok(Self {
            task,
            train: task.generate(n_train, config.vocab_size, &rng.split(1)),
            eval: task.generate(n_eval, config.vocab_size, &rng.split(2)),
        })
    }
}

/// Mean loss and mean full-model gradient over `batch`. Per-sample work may
/// run in parallel; the reduction runs in batch order.
pub fn batch_gradient(params: &ModelParams, batch: &[&ProbeSample]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let per_sample: Vec<(f64, ModelParams)> = batch
        .par_iter()
        .map(|s| loss_and_full_grad(params, s))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grad = ModelParams::zeros(params.config)?;
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        grad.axpy(1.0 / n, g);
    }
    Ok((loss / n, grad))
}

pub fn mean_loss(params: &ModelParams, samples: &[ProbeSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let losses: Vec<f64> = samples.par_iter().map(|s| probe_loss(params, s)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn sample_batch<'a>(train: &'a [ProbeSample], step: usize, cfg: &TrainConfig) -> Vec<&'a ProbeSample> {
    let mut rng = RngState::new(cfg.seed).split(step as u64);
    (0..cfg.batch_size).map(|_| &train[rng.below(train.len())]).collect()
}

/// Trains every parameter of `params` with AdamW. Returns the per-step
/// batch losses.
pub fn pretrain(params: &mut ModelParams, cfg: &TrainConfig, train: &[ProbeSample]) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    let mut opt = Optimizer::new(OptimizerKind::adamw());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)?;
        let batch = sample_batch(train, step, cfg);
        let (loss, grad) = batch_gradient(params, &batch)?;
        curve.push(loss);
        opt.begin_step();
        for (slot, (p, g)) in params.tensors_mut().into_iter().zip(grad.tensors()).enumerate() {
            opt.update(slot, p.data_mut(), g.data(), lr);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("pre-trained parameters".into()));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub placement: String,
    pub rank: usize,
    pub alpha: f64,
    pub trainable_params: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
}

/// Fine-tunes `plan` on top of the frozen `base`. Returns the run record and
/// the trained plan; `base` itself is never written.
pub fn run_experiment(
    label: &str,
    base: &ModelParams,
    mut plan: PlacementPlan,
    cfg: &TrainConfig,
    data: &TaskData,
) -> Result<(RunRecord, PlacementPlan)> {
    cfg.validate()?;
    let targets = plan.trainable_modules();
    let trainable_params = plan.trainable_param_count();
    let initial_eval_loss = mean_loss(&plan.apply(base)?, &data.eval)?;
    let mut opt = Optimizer::new(OptimizerKind::adamw());
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg)?;
        let effective = plan.apply(base)?;
        let batch = sample_batch(&data.train, step, cfg);
        let (loss, grad) = batch_gradient(&effective, &batch)?;
        loss_curve.push(loss);
        let grads: GradientSet = targets
            .iter()
            .map(|&m| Ok((m, grad.projection(m)?.clone())))
            .collect::<Result<_>>()?;
        train_step_lora(&mut plan, &grads, &mut opt, lr)?;
    }
    let trained = plan.apply(base)?;
    let (rank, alpha) = plan.adapters.first().map_or((0, 0.0), |a| (a.rank, a.alpha));
    let record = RunRecord {
        label: label.to_string(),
        placement: plan.mode.to_string(),
        rank,
        alpha,
        trainable_params,
        steps: cfg.steps,
        seed: cfg.seed,
        loss_curve,
        initial_eval_loss,
        final_train_loss: mean_loss(&trained, &data.train)?,
        final_eval_loss: mean_loss(&trained, &data.eval)?,
    };
    Ok((record, plan))
}

/// Runs every plan under the same data order and seed.
pub fn placement_sweep(
    base: &ModelParams,
    plans: Vec<(String, PlacementPlan)>,
    cfg: &TrainConfig,
    data: &TaskData,
) -> Result<Vec<RunRecord>> {
    if plans.len() < 2 {
        return Err(Error::InvalidArgument(format!("a sweep needs at least 2 plans, got {}", plans.len())));
    }
    plans
        .into_iter()
        .map(|(label, plan)| Ok(run_experiment(&label, base, plan, cfg, data)?.0))
        .collect()
}

pub const COMPARISON_HEADER: &str = "plan,trainable_params,steps,final_train_loss,final_eval_loss,seed";

/// Comparison table, one row per run.
pub fn comparison_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label, r.trainable_params, r.steps, r.final_train_loss, r.final_eval_loss, r.seed
        );
    }
    out
}
