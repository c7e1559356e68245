//! Subcommand bodies. Each one is a function of (config, seed, input files)
//! to the files it writes under the output directory.

use std::fs;
use std::path::Path;

use page_core::lora::{write_adapters, PlacementMode, PlacementPlan};
use page_core::model::write_checkpoint;
use page_core::probe::write_probe_set;
use page_core::tensor::RngState;
use page_core::trainer::{comparison_csv, placement_sweep, run_experiment};
use serde::Serialize;

use crate::config::{Config, ConfigError, ConfigErrors};
use crate::error::CliError;
use crate::manifest::{hash_file, Artifact, RunManifest, MANIFEST_FILE, TOOL_NAME, TOOL_VERSION};
use crate::pipeline::{self, stream, sub_seed, Inputs, Probe};
use crate::plan::PlanSpec;
use crate::validate::{run_validation, Fault};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    InitModel,
    GenData,
    Probe,
    Validate,
    Train,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::InitModel => "init-model",
            Command::GenData => "gen-data",
            Command::Probe => "probe",
            Command::Validate => "validate",
            Command::Train => "train",
            Command::Sweep => "sweep",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Command::InitModel,
            Command::GenData,
            Command::Probe,
            Command::Validate,
            Command::Train,
            Command::Sweep,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone)]
pub struct Job {
    pub command: Command,
    pub config: Config,
    pub config_path: Option<String>,
    pub fault: Option<Fault>,
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Outputs<'_> {
    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }
}

#[derive(Serialize)]
struct SensitivityRow {
    module: String,
    s_emp: f64,
}

#[derive(Serialize)]
struct SensitivityFile {
    n_samples: usize,
    modules: Vec<SensitivityRow>,
}

fn write_probe_outputs(out: &mut Outputs, probe: &Probe) -> Result<(), CliError> {
    let sens = SensitivityFile {
        n_samples: probe.sensitivity.n_samples,
        modules: probe
            .sensitivity
            .values
            .iter()
            .map(|(id, &s)| SensitivityRow {
                module: id.to_string(),
                s_emp: s,
            })
            .collect(),
    };
    out.json("sensitivity.json", &sens)?;
    out.json("page_report.json", &probe.report)?;
    out.bytes("page.csv", probe.report.to_csv().as_bytes())?;
    out.bytes("dominant.txt", format!("{}\n", probe.report.dominant).as_bytes())
}

fn config_error(message: String) -> CliError {
    CliError::Config(ConfigErrors(vec![ConfigError { line: None, message }]))
}

/// Outcome of a run that completed and wrote its outputs.
pub struct Finished {
    pub manifest: RunManifest,
    /// Set when a check inside the run failed; outputs are still written.
    pub check_failure: Option<String>,
}

pub fn execute(job: &Job, out_dir: &Path) -> Result<Finished, CliError> {
    fs::create_dir_all(out_dir)?;
    let mut out = Outputs {
        dir: out_dir,
        written: Vec::new(),
    };
    let mut inputs = Inputs::default();
    let cfg = &job.config;
    let seed = cfg.run.seed;
    let mut check_failure = None;

    match job.command {
        Command::InitModel => {
            let base = pipeline::base_model(cfg, &mut inputs)?;
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &base.params)?;
            out.bytes("base.ckpt", &buf)?;
            out.json("pretrain_curve.json", &base.pretrain_curve)?;
            println!("base model: {} parameters", base.params.param_count());
        }
        Command::GenData => {
            let dims = cfg.model.dims;
            let mut buf = Vec::new();
            write_probe_set(&mut buf, &pipeline::synthetic_probe_set(cfg, &dims)?)?;
            out.bytes("probe.jsonl", &buf)?;
            let data = pipeline::task_data(cfg, &dims)?;
            for (name, set) in [("train.jsonl", &data.train), ("eval.jsonl", &data.eval)] {
                let mut buf = Vec::new();
                write_probe_set(&mut buf, set)?;
                out.bytes(name, &buf)?;
            }
        }
        Command::Probe => {
            let base = pipeline::base_model(cfg, &mut inputs)?;
            let set = pipeline::probe_set(cfg, &base.params, &mut inputs)?;
            let probe = pipeline::run_probe(cfg, &base.params, &set)?;
            write_probe_outputs(&mut out, &probe)?;
            println!(
                "dominant module {} ({:.1}% of total PAGE)",
                probe.report.dominant,
                100.0 * probe.report.dominant_share_of_total
            );
        }
        Command::Validate => {
            let base = pipeline::base_model(cfg, &mut inputs)?;
            let set = pipeline::probe_set(cfg, &base.params, &mut inputs)?;
            let probe = pipeline::run_probe(cfg, &base.params, &set)?;
            let rng = RngState::new(seed).split(stream::VALIDATE);
            let report = run_validation(cfg, &base.params, &probe, &rng, job.fault)?;
            let text = report.to_text();
            out.json("validation.json", &report)?;
            out.bytes("validation.txt", text.as_bytes())?;
            print!("{text}");
            if !report.passed {
                check_failure = Some(format!("failed checks: {}", report.failed().join(", ")));
            }
        }
        Command::Train => {
            let spec = PlanSpec::parse(&cfg.train.mode).map_err(|e| config_error(format!("[train] mode: {e}")))?;
            let base = pipeline::base_model(cfg, &mut inputs)?;
            let dominant = if spec.needs_dominant() {
                let set = pipeline::probe_set(cfg, &base.params, &mut inputs)?;
                let probe = pipeline::run_probe(cfg, &base.params, &set)?;
                write_probe_outputs(&mut out, &probe)?;
                Some(probe.dominant())
            } else {
                None
            };
            let mode = spec
                .resolve(&base.params.config, dominant)
                .map_err(|e| config_error(format!("[train] mode: {e}")))?;
            let plan = PlacementPlan::new(
                mode,
                &base.params,
                cfg.lora.rank,
                cfg.lora.alpha,
                &RngState::new(seed).split(stream::ADAPTER_INIT),
            )?;
            let data = pipeline::task_data(cfg, &base.params.config)?;
            let train_cfg = cfg.train.schedule.train_config(sub_seed(seed, stream::TRAIN_ORDER));
            let (record, trained) = run_experiment(&cfg.train.mode, &base.params, plan, &train_cfg, &data)?;
            out.json("run_record.json", &record)?;
            if trained.adapters.is_empty() {
                let mut buf = Vec::new();
                write_checkpoint(&mut buf, &trained.apply(&base.params)?)?;
                out.bytes("trained.ckpt", &buf)?;
            } else {
                let mut buf = Vec::new();
                write_adapters(&mut buf, &trained.adapters)?;
                out.bytes("adapters.lora", &buf)?;
            }
            println!(
                "{}: {} trainable parameters, eval loss {:.4} -> {:.4}",
                record.placement, record.trainable_params, record.initial_eval_loss, record.final_eval_loss
            );
        }
        Command::Sweep => sweep(cfg, &mut out, &mut inputs)?,
    }

    let manifest = RunManifest {
        tool: TOOL_NAME.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        command: job.command.name().to_string(),
        config_path: job.config_path.clone(),
        seed,
        config_snapshot: cfg.snapshot(),
        inject_fault: job.fault.map(|f| f.name().to_string()),
        inputs: inputs
            .0
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.display().to_string(),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<Result<_, CliError>>()?,
        outputs: out
            .written
            .iter()
            .map(|name| {
                Ok(Artifact {
                    path: name.clone(),
                    sha256: hash_file(&out_dir.join(name))?,
                })
            })
            .collect::<Result<_, CliError>>()?,
    };
    manifest.write(out_dir)?;
    Ok(Finished {
        manifest,
        check_failure,
    })
}

#[derive(Serialize)]
struct SweepSummary {
    dominant: Option<String>,
    all_trainable_params: usize,
    dominant_only_trainable_params: Option<usize>,
    /// Dominant-only over all-modules trainable parameters at the `[lora]` rank.
    dominant_only_ratio: Option<f64>,
}

fn sweep(cfg: &Config, out: &mut Outputs, inputs: &mut Inputs) -> Result<(), CliError> {
    let sw = &cfg.sweep;
    if sw.plans.is_empty() {
        return Err(config_error("[sweep] plans: the plan list is empty".into()));
    }
    if sw.plans.len() + sw.ranks.len() < 2 {
        return Err(config_error("[sweep] a sweep needs at least 2 rows across plans and ranks".into()));
    }
    let specs = sw
        .plans
        .iter()
        .map(|p| PlanSpec::parse(p).map_err(|e| config_error(format!("[sweep] plans: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let base = pipeline::base_model(cfg, inputs)?;
    let model_cfg = base.params.config;
    let dominant = if specs.iter().any(PlanSpec::needs_dominant) || !sw.ranks.is_empty() {
        let set = pipeline::probe_set(cfg, &base.params, inputs)?;
        let probe = pipeline::run_probe(cfg, &base.params, &set)?;
        write_probe_outputs(out, &probe)?;
        Some(probe.dominant())
    } else {
        None
    };

    let rng = RngState::new(cfg.run.seed).split(stream::ADAPTER_INIT);
    let (rank, alpha) = (cfg.lora.rank, cfg.lora.alpha);
    let mut plans = Vec::new();
    for (label, spec) in sw.plans.iter().zip(&specs) {
        let mode = spec
            .resolve(&model_cfg, dominant)
            .map_err(|e| config_error(format!("[sweep] plans: {e}")))?;
        plans.push((label.clone(), PlacementPlan::new(mode, &base.params, rank, alpha, &rng)?));
    }
    if let Some(dom) = dominant {
        for &r in &sw.ranks {
            let mode = PlacementMode::DominantOnly(dom);
            plans.push((format!("dominant-only@r{r}"), PlacementPlan::new(mode, &base.params, r, 2.0 * r as f64, &rng)?));
        }
    }

    let all_params = PlacementPlan::new(PlacementMode::All, &base.params, rank, alpha, &rng)?.trainable_param_count();
    let dom_params = dominant
        .map(|d| PlacementPlan::new(PlacementMode::DominantOnly(d), &base.params, rank, alpha, &rng))
        .transpose()?
        .map(|p| p.trainable_param_count());
    let summary = SweepSummary {
        dominant: dominant.map(|d| d.to_string()),
        all_trainable_params: all_params,
        dominant_only_trainable_params: dom_params,
        dominant_only_ratio: dom_params.map(|d| d as f64 / all_params as f64),
    };

    let data = pipeline::task_data(cfg, &model_cfg)?;
    let train_cfg = cfg.train.schedule.train_config(sub_seed(cfg.run.seed, stream::TRAIN_ORDER));
    let records = placement_sweep(&base.params, plans, &train_cfg, &data)?;
    let csv = comparison_csv(&records);
    out.bytes("sweep.csv", csv.as_bytes())?;
    out.json("runs.json", &records)?;
    out.json("sweep_summary.json", &summary)?;
    print!("{csv}");
    if let Some(ratio) = summary.dominant_only_ratio {
        println!("dominant-only / all trainable parameters: {:.4}%", 100.0 * ratio);
    }
    Ok(())
}

/// One output file compared during replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayDiff {
    pub path: String,
    pub matches: bool,
}

/// Reruns the command recorded in `manifest_path` into `out_dir` and
/// compares every output, the manifest included, byte for byte.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<Vec<ReplayDiff>, CliError> {
    let recorded = RunManifest::read(manifest_path)?;
    let command = Command::from_name(&recorded.command)
        .ok_or_else(|| CliError::input(manifest_path, format!("unknown command {:?}", recorded.command)))?;
    let fault = match &recorded.inject_fault {
        Some(name) => Some(
            Fault::from_name(name).ok_or_else(|| CliError::input(manifest_path, format!("unknown fault {name:?}")))?,
        ),
        None => None,
    };
    for input in &recorded.inputs {
        let now = hash_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::CheckFailed(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let job = Job {
        command,
        config: Config::from_snapshot(&recorded.config_snapshot)?,
        config_path: recorded.config_path.clone(),
        fault,
    };
    let recorded_manifest = fs::read(manifest_path)?;
    let finished = execute(&job, out_dir)?;

    let mut diffs: Vec<ReplayDiff> = recorded
        .outputs
        .iter()
        .map(|a| {
            let fresh = finished.manifest.outputs.iter().find(|b| b.path == a.path);
            ReplayDiff {
                path: a.path.clone(),
                matches: fresh.is_some_and(|b| b.sha256 == a.sha256),
            }
        })
        .collect();
    for b in &finished.manifest.outputs {
        if !recorded.outputs.iter().any(|a| a.path == b.path) {
            diffs.push(ReplayDiff {
                path: b.path.clone(),
                matches: false,
            });
        }
    }
    let fresh_manifest = fs::read(out_dir.join(MANIFEST_FILE))?;
    diffs.push(ReplayDiff {
        path: MANIFEST_FILE.to_string(),
        matches: fresh_manifest == recorded_manifest,
    });
    Ok(diffs)
}
