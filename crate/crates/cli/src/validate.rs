//! Property suites behind `page validate`. Each check reports what it
//! measured beside the tolerance it was held to.

use std::fmt::Write as _;

use page_core::data::Task;
use page_core::lora::{factor_gradients, LoraAdapter};
use page_core::model::{ModelConfig, ModelParams, ModuleId};
use page_core::oracle::{adapter_gradient_fd, projection_gradient_fd, relative_error};
use page_core::page::{
    closed_form_value, expected_ata_check, page_closed_form, page_monte_carlo, page_trace_map, select_dominant,
};
use page_core::probe::{fisher_trace_check, sample_gradient, ProbeSample};
use page_core::tensor::{Matrix, RngState};
use page_core::trainer::lr_at;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;
use crate::pipeline::Probe;

/// Deliberate defects for exercising the failure path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Negate the analytic adapter `B` gradient.
    GradBSign,
}

impl Fault {
    pub fn name(self) -> &'static str {
        match self {
            Fault::GradBSign => "grad-b-sign",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        (s == "grad-b-sign").then_some(Fault::GradBSign)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub module: String,
    pub closed_form: f64,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<Check>,
    pub monte_carlo: Vec<McRow>,
}

impl ValidationReport {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<26} measured {:.3e}  tolerance {:.3e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.detail
            );
        }
        let _ = writeln!(out, "{}", if self.passed { "all checks passed" } else { "validation FAILED" });
        out
    }
}

fn toy_config(i: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: if i.is_multiple_of(2) { 2 } else { 4 },
        d_ff: 12 + 4 * (i as usize % 3),
        vocab_size: 13,
        max_seq_len: 10,
    }
}

fn toy_samples(cfg: &ModelConfig, rng: &RngState) -> Vec<ProbeSample> {
    Task::Copy { len: 3 }.generate(2, cfg.vocab_size, rng)
}

fn mean_gradient(params: &ModelParams, set: &[ProbeSample], id: ModuleId) -> Result<Matrix, CliError> {
    let w = params.projection(id)?;
    let mut acc = Matrix::zeros(w.rows(), w.cols());
    for s in set {
        acc.axpy(1.0 / set.len() as f64, sample_gradient(params, s)?.require(id)?);
    }
    Ok(acc)
}

fn init_gradient_checks(cfg: &Config, rng: &RngState, fault: Option<Fault>) -> Result<Vec<Check>, CliError> {
    let v = &cfg.validate;
    let mut worst_a: f64 = 0.0;
    let mut worst_b = (0.0f64, String::new());
    for i in 0..v.init_models as u64 {
        let model_cfg = toy_config(i);
        let stream = rng.split(i);
        let base = ModelParams::init(model_cfg, &stream.split(0))?;
        let set = toy_samples(&model_cfg, &stream.split(1));
        let target = model_cfg.modules()[i as usize % model_cfg.modules().len()];
        let adapter = LoraAdapter::for_model(target, 3, 6.0, &model_cfg, &mut stream.split(2))?;

        let g = mean_gradient(&base, &set, target)?;
        let (grad_a, mut grad_b) = factor_gradients(&g, &adapter)?;
        if fault == Some(Fault::GradBSign) {
            grad_b = grad_b.scale(-1.0);
        }
        let (fd_a, fd_b) = adapter_gradient_fd(&base, &adapter, &set, v.fd_step)?;
        worst_a = worst_a.max(grad_a.max_abs()).max(fd_a.max_abs());
        let err = relative_error(&grad_b, &fd_b);
        if err >= worst_b.0 {
            worst_b = (err, format!("model {i} {target}"));
        }
    }
    Ok(vec![
        Check::at_most(
            "lora.grad_a_at_init",
            worst_a,
            1e-12,
            format!("max |grad A| at init over {} models, analytic and finite difference", v.init_models),
        ),
        Check::at_most(
            "lora.grad_b_at_init",
            worst_b.0,
            1e-5,
            format!("max relative error of s*G*A^T vs finite difference (worst: {})", worst_b.1),
        ),
    ])
}

fn moment_check(cfg: &Config, rng: &RngState) -> Result<Check, CliError> {
    let v = &cfg.validate;
    let ata = expected_ata_check(v.moment_rank, v.moment_d_in, v.moment_trials, rng)?;
    Ok(Check::at_most(
        "lora.init_second_moment",
        ata.max_z,
        5.0,
        format!(
            "max |mean - target|/stderr over {} draws, r={} d_in={}, target diagonal {:.6}, max abs deviation {:.2e}",
            ata.trials, v.moment_rank, v.moment_d_in, ata.target_diagonal, ata.max_abs_deviation
        ),
    ))
}

fn model_fd_check(cfg: &Config, rng: &RngState) -> Result<Check, CliError> {
    let model_cfg = toy_config(0);
    let params = ModelParams::init(model_cfg, &rng.split(0))?;
    let set = toy_samples(&model_cfg, &rng.split(1));
    let mut worst = (0.0f64, String::new());
    for id in model_cfg.modules() {
        let analytic = mean_gradient(&params, &set, id)?;
        let numeric = projection_gradient_fd(&params, &set, id, cfg.validate.fd_step)?;
        let err = relative_error(&analytic, &numeric);
        if err >= worst.0 {
            worst = (err, id.to_string());
        }
    }
    Ok(Check::at_most(
        "model.gradient_fd",
        worst.0,
        1e-5,
        format!("max relative error over all projections, h={} (worst: {})", cfg.validate.fd_step, worst.1),
    ))
}

fn schedule_check(cfg: &Config) -> Result<Check, CliError> {
    let t = cfg.train.schedule.train_config(0);
    let w = t.warmup_steps();
    let err = lr_at(0, &t)?
        .abs()
        .max((lr_at(w, &t)? - t.peak_lr).abs())
        .max(lr_at(t.steps, &t)?.abs());
    Ok(Check::at_most(
        "trainer.schedule",
        err,
        1e-12,
        format!("lr at 0, warmup step {w} and final step {} vs 0, peak, 0", t.steps),
    ))
}

fn page_checks(cfg: &Config, probe: &Probe, base: &ModelParams, rng: &RngState) -> Result<(Vec<Check>, Vec<McRow>), CliError> {
    let rank = cfg.lora.rank;
    let scale = cfg.lora.alpha / rank as f64;
    let d_in = base.config.d_in_map();
    let closed = page_closed_form(&probe.sensitivity, rank, scale, &d_in)?;
    let trace = page_trace_map(&probe.gradients, rank, scale)?;

    let mut trace_err: f64 = 0.0;
    let mut fisher_err: f64 = 0.0;
    let mut mc_z = (0.0f64, String::new());
    let mut rows = Vec::new();
    for (slot, (&id, &c)) in closed.values.iter().enumerate() {
        let t = trace.get(id).unwrap_or(f64::NAN);
        trace_err = trace_err.max((c - t).abs() / c.abs().max(f64::MIN_POSITIVE));
        let (fisher, s) = fisher_trace_check(&probe.gradients, id)?;
        fisher_err = fisher_err.max((fisher - s).abs() / s.abs().max(f64::MIN_POSITIVE));
        let mc = page_monte_carlo(&probe.gradients, id, rank, scale, cfg.validate.trials, &rng.split(slot as u64))?;
        let z = (mc.estimate - c).abs() / mc.stderr.max(f64::MIN_POSITIVE);
        if z >= mc_z.0 {
            mc_z = (z, id.to_string());
        }
        rows.push(McRow {
            module: id.to_string(),
            closed_form: c,
            estimate: mc.estimate,
            stderr: mc.stderr,
        });
    }
    let mean_rel_stderr = rows.iter().map(|r| r.stderr / r.closed_form).sum::<f64>() / rows.len() as f64;

    // Scale laws on the closed form: s -> 2s and r -> 2r, plus argmax
    // invariance under a positive rescaling of the whole map.
    let mut law_err: f64 = 0.0;
    for (&id, &c) in &closed.values {
        let s = probe.sensitivity.get(id).unwrap_or(f64::NAN);
        let d = d_in[&id];
        law_err = law_err
            .max((closed_form_value(s, rank, 2.0 * scale, d) - 4.0 * c).abs() / c)
            .max((closed_form_value(s, 2 * rank, scale, d) - 2.0 * c).abs() / c);
    }
    let restrict = cfg.probe.restrict();
    let stable = [0.37, 3.0, 1e6].iter().all(|&k| {
        select_dominant(&closed.map_values(|v| k * v), restrict).ok() == select_dominant(&closed, restrict).ok()
    });
    if !stable {
        law_err = f64::INFINITY;
    }

    let n = closed.values.len();
    let checks = vec![
        Check::at_most(
            "page.closed_vs_trace",
            trace_err,
            1e-12,
            format!("max relative difference over {n} modules"),
        ),
        Check::at_most(
            "page.monte_carlo",
            mc_z.0,
            4.0,
            format!(
                "max |estimate - closed|/stderr over {n} modules, {} trials (worst: {}), mean relative stderr {:.3e}",
                cfg.validate.trials, mc_z.1, mean_rel_stderr
            ),
        ),
        Check::at_most(
            "probe.fisher_trace",
            fisher_err,
            1e-12,
            format!("max relative difference over {n} modules, {} samples", probe.gradients.len()),
        ),
        Check::at_most(
            "page.scale_laws",
            law_err,
            0.0,
            "s->2s gives x4, r->2r gives x2, dominant unchanged by rescaling".into(),
        ),
    ];
    Ok((checks, rows))
}

pub fn run_validation(
    cfg: &Config,
    base: &ModelParams,
    probe: &Probe,
    rng: &RngState,
    fault: Option<Fault>,
) -> Result<ValidationReport, CliError> {
    let mut checks = init_gradient_checks(cfg, &rng.split(0), fault)?;
    checks.push(moment_check(cfg, &rng.split(1))?);
    let (page, monte_carlo) = page_checks(cfg, probe, base, &rng.split(2))?;
    checks.extend(page);
    checks.push(model_fd_check(cfg, &rng.split(3))?);
    checks.push(schedule_check(cfg)?);
    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        monte_carlo,
    })
}
