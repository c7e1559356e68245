//! Shared steps: building the base model, the probe set and the PAGE report.
//! Every random choice draws from a fixed stream of the run seed.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use page_core::model::{load_checkpoint, GradientSet, ModelConfig, ModelParams, ModuleId};
use page_core::page::page_closed_form;
use page_core::probe::{probe_gradients, read_probe_set, sensitivity_from_gradients, ProbeSample, SensitivityMap};
use page_core::report::PageReport;
use page_core::tensor::RngState;
use page_core::trainer::{pretrain, TaskData};

use crate::config::Config;
use crate::error::CliError;

/// Stream indices into the run seed.
pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const PRETRAIN_DATA: u64 = 2;
    pub const PRETRAIN_ORDER: u64 = 3;
    pub const PROBE_SET: u64 = 4;
    pub const TASK_DATA: u64 = 5;
    pub const TRAIN_ORDER: u64 = 6;
    pub const ADAPTER_INIT: u64 = 7;
    pub const VALIDATE: u64 = 8;
}

/// A 64-bit seed for APIs that take one, derived from the run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Files read by a command, recorded in its manifest.
#[derive(Debug, Default)]
pub struct Inputs(pub Vec<PathBuf>);

pub struct Base {
    pub params: ModelParams,
    /// Per-step pre-training losses; empty when loaded from a checkpoint.
    pub pretrain_curve: Vec<f64>,
}

/// The checkpoint named in `[model]`, or a fresh model pre-trained on the
/// `[pretrain]` task.
pub fn base_model(cfg: &Config, inputs: &mut Inputs) -> Result<Base, CliError> {
    if let Some(path) = &cfg.model.checkpoint {
        let params = load_checkpoint(path).map_err(|e| CliError::input(path, e))?;
        inputs.0.push(path.clone());
        return Ok(Base {
            params,
            pretrain_curve: Vec::new(),
        });
    }
    let dims = cfg.model.dims;
    let mut params = ModelParams::init(dims, &RngState::new(cfg.run.seed).split(stream::MODEL_INIT))?;
    let p = &cfg.pretrain;
    let task = p.task.task();
    task.check(dims.vocab_size, dims.max_seq_len)?;
    let train = task.generate(
        p.n_train,
        dims.vocab_size,
        &RngState::new(cfg.run.seed).split(stream::PRETRAIN_DATA),
    );
    let train_cfg = p.schedule.train_config(sub_seed(cfg.run.seed, stream::PRETRAIN_ORDER));
    let pretrain_curve = pretrain(&mut params, &train_cfg, &train)?;
    Ok(Base { params, pretrain_curve })
}

/// The probe set file from `[data]`, or a synthetic one from the data task.
pub fn probe_set(cfg: &Config, base: &ModelParams, inputs: &mut Inputs) -> Result<Vec<ProbeSample>, CliError> {
    if let Some(path) = &cfg.data.probe_set {
        let file = File::open(path).map_err(|e| CliError::input(path, e))?;
        let set = read_probe_set(BufReader::new(file)).map_err(|e| CliError::input(path, e))?;
        inputs.0.push(path.clone());
        if set.is_empty() {
            return Err(CliError::input(path, "probe set is empty"));
        }
        return Ok(set);
    }
    synthetic_probe_set(cfg, &base.config)
}

pub fn synthetic_probe_set(cfg: &Config, model: &ModelConfig) -> Result<Vec<ProbeSample>, CliError> {
    let task = cfg.data.task.task();
    task.check(model.vocab_size, model.max_seq_len)?;
    Ok(task.generate(
        cfg.data.probe_samples,
        model.vocab_size,
        &RngState::new(cfg.run.seed).split(stream::PROBE_SET),
    ))
}

pub fn task_data(cfg: &Config, model: &ModelConfig) -> Result<TaskData, CliError> {
    Ok(TaskData::generate(
        cfg.data.task.task(),
        model,
        cfg.data.n_train,
        cfg.data.n_eval,
        sub_seed(cfg.run.seed, stream::TASK_DATA),
    )?)
}

pub struct Probe {
    pub gradients: Vec<GradientSet>,
    pub sensitivity: SensitivityMap,
    pub report: PageReport,
}

impl Probe {
    pub fn dominant(&self) -> ModuleId {
        self.report.dominant().expect("report names a valid module")
    }
}

pub fn run_probe(cfg: &Config, base: &ModelParams, set: &[ProbeSample]) -> Result<Probe, CliError> {
    let gradients = probe_gradients(base, set)?;
    let sensitivity = sensitivity_from_gradients(&gradients)?;
    let scale = cfg.lora.alpha / cfg.lora.rank as f64;
    let d_in = base.config.d_in_map();
    let pm = page_closed_form(&sensitivity, cfg.lora.rank, scale, &d_in)?;
    let report = PageReport::build(&sensitivity, &pm, &d_in, cfg.probe.restrict())?;
    Ok(Probe {
        gradients,
        sensitivity,
        report,
    })
}
