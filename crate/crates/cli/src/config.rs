//! Run configuration: one TOML file with sections. Unknown keys and type
//! errors are collected and reported together, each with its line number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use page_core::data::Task;
use page_core::model::{ModelConfig, ProjKind};
use page_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Spanned, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(flatten)]
    pub dims: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSection {
    pub task: String,
    pub copy_len: usize,
    pub modulus: usize,
}

impl TaskSection {
    pub fn task(&self) -> Task {
        match self.task.as_str() {
            "copy" => Task::Copy { len: self.copy_len },
            _ => Task::ModAdd { modulus: self.modulus },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
}

impl ScheduleSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_ratio: self.warmup_ratio,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    #[serde(flatten)]
    pub task: TaskSection,
    #[serde(flatten)]
    pub schedule: ScheduleSection,
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(flatten)]
    pub task: TaskSection,
    pub n_train: usize,
    pub n_eval: usize,
    pub probe_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_set: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    /// `"down"` or another kind name; `"none"` for unrestricted selection.
    pub restrict_kind: String,
}

impl ProbeSection {
    pub fn restrict(&self) -> Option<ProjKind> {
        self.restrict_kind.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub mode: String,
    #[serde(flatten)]
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub plans: Vec<String>,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateSection {
    pub trials: usize,
    pub moment_trials: usize,
    pub moment_rank: usize,
    pub moment_d_in: usize,
    pub init_models: usize,
    pub fd_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub run: RunSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub data: DataSection,
    pub lora: LoraSection,
    pub probe: ProbeSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub validate: ValidateSection,
}

pub const DEFAULT_SWEEP_PLANS: [&str; 8] = [
    "all", "down@dom", "up@dom", "gate@dom", "ffn@dom", "attn@dom", "down@mid", "down@last",
];

impl Default for Config {
    fn default() -> Self {
        Self {
            run: RunSection { seed: 0 },
            model: ModelSection {
                dims: ModelConfig::default(),
                checkpoint: None,
            },
            pretrain: PretrainSection {
                task: TaskSection {
                    task: "copy".into(),
                    copy_len: 6,
                    modulus: 16,
                },
                schedule: ScheduleSection {
                    steps: 300,
                    batch_size: 16,
                    peak_lr: 3e-3,
                    warmup_ratio: 0.03,
                },
                n_train: 512,
            },
            data: DataSection {
                task: TaskSection {
                    task: "modadd".into(),
                    copy_len: 6,
                    modulus: 16,
                },
                n_train: 256,
                n_eval: 64,
                probe_samples: page_core::probe::DEFAULT_PROBE_SAMPLES,
                probe_set: None,
            },
            lora: LoraSection {
                rank: page_core::lora::DEFAULT_RANK,
                alpha: page_core::lora::DEFAULT_ALPHA,
            },
            probe: ProbeSection {
                restrict_kind: "down".into(),
            },
            train: TrainSection {
                mode: "dominant-only".into(),
                schedule: ScheduleSection {
                    steps: 200,
                    batch_size: 8,
                    peak_lr: 1e-3,
                    warmup_ratio: 0.03,
                },
            },
            sweep: SweepSection {
                plans: DEFAULT_SWEEP_PLANS.iter().map(|s| s.to_string()).collect(),
                ranks: vec![16, 32, 64],
            },
            validate: ValidateSection {
                trials: 10_000,
                moment_trials: 1_000_000,
                moment_rank: 4,
                moment_d_in: 12,
                init_models: 20,
                fd_step: 1e-4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every problem found in one config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

type Doc = BTreeMap<Spanned<String>, BTreeMap<Spanned<String>, Spanned<Value>>>;

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

struct Reader<'a> {
    src: &'a str,
    doc: Doc,
    known: BTreeSet<(String, String)>,
    errors: Vec<ConfigError>,
    base_dir: PathBuf,
}

impl Reader<'_> {
    fn lookup(&mut self, section: &str, key: &str) -> Option<(Value, usize)> {
        self.known.insert((section.to_string(), key.to_string()));
        let sec = self.doc.iter().find(|(k, _)| k.get_ref() == section)?.1;
        let (k, v) = sec.iter().find(|(k, _)| k.get_ref() == key)?;
        Some((v.get_ref().clone(), line_of(self.src, k.span().start)))
    }

    fn error(&mut self, line: usize, section: &str, key: &str, msg: impl fmt::Display) {
        self.errors.push(ConfigError {
            line: Some(line),
            message: format!("[{section}] {key}: {msg}"),
        });
    }

    fn int(&mut self, section: &str, key: &str, slot: &mut usize, min: usize) {
        let Some((v, line)) = self.lookup(section, key) else { return };
        match v.as_integer() {
            Some(i) if i >= min as i64 => *slot = i as usize,
            Some(i) => self.error(line, section, key, format!("must be at least {min}, got {i}")),
            None => self.error(line, section, key, format!("expected an integer, got {}", v.type_str())),
        }
    }

    fn seed(&mut self, section: &str, key: &str, slot: &mut u64) {
        let Some((v, line)) = self.lookup(section, key) else { return };
        match v.as_integer() {
            Some(i) if i >= 0 => *slot = i as u64,
            _ => self.error(line, section, key, "expected a nonnegative integer"),
        }
    }

    fn float(&mut self, section: &str, key: &str, slot: &mut f64, check: impl Fn(f64) -> Option<&'static str>) {
        let Some((v, line)) = self.lookup(section, key) else { return };
        let x = match v {
            Value::Float(x) => x,
            Value::Integer(i) => i as f64,
            other => return self.error(line, section, key, format!("expected a number, got {}", other.type_str())),
        };
        match check(x) {
            None => *slot = x,
            Some(msg) => self.error(line, section, key, format!("{msg}, got {x}")),
        }
    }

    fn string(&mut self, section: &str, key: &str, slot: &mut String, allowed: &[&str]) {
        let Some((v, line)) = self.lookup(section, key) else { return };
        match v.as_str() {
            Some(s) if allowed.is_empty() || allowed.contains(&s) => *slot = s.to_string(),
            Some(s) => self.error(line, section, key, format!("{s:?} is not one of {allowed:?}")),
            None => self.error(line, section, key, format!("expected a string, got {}", v.type_str())),
        }
    }

    fn path(&mut self, section: &str, key: &str, slot: &mut Option<PathBuf>) {
        let mut s = String::new();
        let before = self.errors.len();
        self.string(section, key, &mut s, &[]);
        if self.errors.len() == before && !s.is_empty() {
            *slot = Some(self.base_dir.join(s));
        }
    }

    fn string_list(&mut self, section: &str, key: &str, slot: &mut Vec<String>) {
        let Some((v, line)) = self.lookup(section, key) else { return };
        match v.as_array().map(|a| a.iter().map(|x| x.as_str().map(str::to_string)).collect::<Option<Vec<_>>>()) {
            Some(Some(list)) => *slot = list,
            _ => self.error(line, section, key, "expected an array of strings"),
        }
    }

    fn int_list(&mut self, section: &str, key: &str, slot: &mut Vec<usize>) {
        let Some((v, line)) = self.lookup(section, key) else { return };
        let parsed = v.as_array().map(|a| {
            a.iter()
                .map(|x| x.as_integer().filter(|&i| i >= 1).map(|i| i as usize))
                .collect::<Option<Vec<_>>>()
        });
        match parsed {
            Some(Some(list)) => *slot = list,
            _ => self.error(line, section, key, "expected an array of positive integers"),
        }
    }

    fn task(&mut self, section: &str, t: &mut TaskSection) {
        self.string(section, "task", &mut t.task, &["copy", "modadd"]);
        self.int(section, "copy_len", &mut t.copy_len, 1);
        self.int(section, "modulus", &mut t.modulus, 2);
    }

    fn schedule(&mut self, section: &str, s: &mut ScheduleSection) {
        self.int(section, "steps", &mut s.steps, 2);
        self.int(section, "batch_size", &mut s.batch_size, 1);
        self.float(section, "peak_lr", &mut s.peak_lr, |x| (x <= 0.0).then_some("must be positive"));
        self.float(section, "warmup_ratio", &mut s.warmup_ratio, |x| {
            (x <= 0.0 || x >= 1.0).then_some("must lie strictly between 0 and 1")
        });
    }

    fn unknown_keys(&mut self) {
        let mut extra = Vec::new();
        for (sec, keys) in &self.doc {
            for key in keys.keys() {
                if !self.known.contains(&(sec.get_ref().clone(), key.get_ref().clone())) {
                    let what = if self.known.iter().any(|(s, _)| s == sec.get_ref()) {
                        format!("[{}] {}: unknown key", sec.get_ref(), key.get_ref())
                    } else {
                        format!("[{}]: unknown section", sec.get_ref())
                    };
                    extra.push(ConfigError {
                        line: Some(line_of(self.src, key.span().start)),
                        message: what,
                    });
                }
            }
            if keys.is_empty() && !self.known.iter().any(|(s, _)| s == sec.get_ref()) {
                extra.push(ConfigError {
                    line: Some(line_of(self.src, sec.span().start)),
                    message: format!("[{}]: unknown section", sec.get_ref()),
                });
            }
        }
        extra.dedup();
        self.errors.extend(extra);
    }
}

impl Config {
    /// Parses `src`. Relative paths inside resolve against `base_dir`.
    pub fn parse(src: &str, base_dir: &Path) -> Result<Config, ConfigErrors> {
        let doc: Doc = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of(src, s.start));
            let message = if e.message().contains("expected a map") {
                "every key must live inside a [section]".to_string()
            } else {
                e.message().trim().to_string()
            };
            ConfigErrors(vec![ConfigError { line, message }])
        })?;
        let mut r = Reader {
            src,
            doc,
            known: BTreeSet::new(),
            errors: Vec::new(),
            base_dir: base_dir.to_path_buf(),
        };
        let mut c = Config::default();

        r.seed("run", "seed", &mut c.run.seed);

        let m = &mut c.model.dims;
        r.int("model", "n_layers", &mut m.n_layers, 1);
        r.int("model", "d_model", &mut m.d_model, 1);
        r.int("model", "n_heads", &mut m.n_heads, 1);
        r.int("model", "d_ff", &mut m.d_ff, 1);
        r.int("model", "vocab_size", &mut m.vocab_size, 3);
        r.int("model", "max_seq_len", &mut m.max_seq_len, 2);
        r.path("model", "checkpoint", &mut c.model.checkpoint);

        r.task("pretrain", &mut c.pretrain.task);
        r.schedule("pretrain", &mut c.pretrain.schedule);
        r.int("pretrain", "n_train", &mut c.pretrain.n_train, 1);

        r.task("data", &mut c.data.task);
        r.int("data", "n_train", &mut c.data.n_train, 1);
        r.int("data", "n_eval", &mut c.data.n_eval, 1);
        r.int("data", "probe_samples", &mut c.data.probe_samples, 1);
        r.path("data", "probe_set", &mut c.data.probe_set);

        r.int("lora", "rank", &mut c.lora.rank, 1);
        let mut alpha = f64::NAN;
        r.float("lora", "alpha", &mut alpha, |x| (x <= 0.0).then_some("must be positive"));
        c.lora.alpha = if alpha.is_nan() { 2.0 * c.lora.rank as f64 } else { alpha };

        let mut kinds: Vec<&str> = ProjKind::ALL.iter().map(|k| k.name()).collect();
        kinds.push("none");
        r.string("probe", "restrict_kind", &mut c.probe.restrict_kind, &kinds);

        r.string("train", "mode", &mut c.train.mode, &[]);
        r.schedule("train", &mut c.train.schedule);

        r.string_list("sweep", "plans", &mut c.sweep.plans);
        r.int_list("sweep", "ranks", &mut c.sweep.ranks);

        r.int("validate", "trials", &mut c.validate.trials, 2);
        r.int("validate", "moment_trials", &mut c.validate.moment_trials, 2);
        r.int("validate", "moment_rank", &mut c.validate.moment_rank, 1);
        r.int("validate", "moment_d_in", &mut c.validate.moment_d_in, 1);
        r.int("validate", "init_models", &mut c.validate.init_models, 1);
        r.float("validate", "fd_step", &mut c.validate.fd_step, |x| {
            (x <= 0.0 || x >= 1.0).then_some("must lie strictly between 0 and 1")
        });

        r.unknown_keys();
        let mut errors = r.errors;
        if errors.is_empty() {
            errors.extend(c.semantic_errors());
        }
        if errors.is_empty() {
            Ok(c)
        } else {
            errors.sort_by_key(|e| e.line.unwrap_or(usize::MAX));
            Err(ConfigErrors(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Config, ConfigErrors> {
        let src = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![ConfigError {
                line: None,
                message: format!("cannot read {}: {e}", path.display()),
            }])
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&src, &base)
    }

    /// Cross-field checks that need the whole config.
    fn semantic_errors(&self) -> Vec<ConfigError> {
        let mut errs = Vec::new();
        let mut push = |msg: String| errs.push(ConfigError { line: None, message: msg });
        let dims = &self.model.dims;
        if let Err(e) = dims.validate() {
            push(format!("[model] {e}"));
            return errs;
        }
        for (name, t) in [("pretrain", &self.pretrain.task), ("data", &self.data.task)] {
            if let Err(e) = t.task().check(dims.vocab_size, dims.max_seq_len) {
                push(format!("[{name}] {e}"));
            }
        }
        if let Err(e) = crate::plan::PlanSpec::parse(&self.train.mode) {
            push(format!("[train] mode: {e}"));
        }
        for p in &self.sweep.plans {
            if let Err(e) = crate::plan::PlanSpec::parse(p) {
                push(format!("[sweep] plans: {e}"));
            }
        }
        errs
    }

    /// Resolved configuration as TOML, for manifests.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_snapshot(src: &str) -> Result<Config, ConfigErrors> {
        Config::parse(src, Path::new(""))
    }
}
