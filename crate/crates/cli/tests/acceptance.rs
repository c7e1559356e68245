//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use page_core::data::Task;
use page_core::lora::{factor_gradients, LoraAdapter, PlacementMode, PlacementPlan};
use page_core::model::{GradientSet, ModelConfig, ModelParams, ModuleId, ProjKind};
use page_core::oracle::{adapter_gradient_fd, projection_gradient_fd, relative_error};
use page_core::page::{
    closed_form_value, expected_ata_check, page_closed_form, page_monte_carlo, page_trace_map, select_dominant,
};
use page_core::probe::{fisher_trace_check, probe_gradients, sample_gradient, sensitivity_from_gradients, ProbeSample};
use page_core::tensor::{Matrix, RngState};
use page_core::trainer::{lr_at, pretrain, run_experiment, TaskData, TrainConfig};
use serde_json::Value;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn toy(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: if seed.is_multiple_of(2) { 2 } else { 4 },
        d_ff: 12 + 4 * (seed as usize % 3),
        vocab_size: 13,
        max_seq_len: 10,
    }
}

fn toy_samples(cfg: &ModelConfig, seed: u64) -> Vec<ProbeSample> {
    Task::Copy { len: 3 }.generate(2, cfg.vocab_size, &RngState::new(seed ^ 0x5EED))
}

fn mean_gradient(params: &ModelParams, set: &[ProbeSample], id: ModuleId) -> Matrix {
    let w = params.projection(id).unwrap();
    let mut acc = Matrix::zeros(w.rows(), w.cols());
    for s in set {
        acc.axpy(1.0 / set.len() as f64, sample_gradient(params, s).unwrap().get(id).unwrap());
    }
    acc
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut worst_a, mut worst_b) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let cfg = toy(seed);
        let base = ModelParams::init(cfg, &RngState::new(1000 + seed)).unwrap();
        let set = toy_samples(&cfg, seed);
        let target = cfg.modules()[seed as usize % 14];
        let adapter = LoraAdapter::for_model(target, 4, 8.0, &cfg, &mut RngState::new(seed)).unwrap();
        let g = mean_gradient(&base, &set, target);
        let (_, grad_b) = factor_gradients(&g, &adapter).unwrap();
        let expected_b = g.matmul_t(&adapter.a).scale(adapter.scale());
        let (fd_a, fd_b) = adapter_gradient_fd(&base, &adapter, &set, 1e-4).unwrap();
        worst_a = worst_a.max(fd_a.max_abs());
        worst_b = worst_b.max(relative_error(&expected_b, &fd_b)).max(relative_error(&grad_b, &fd_b));
    }
    let t = start.elapsed();
    outcome(
        worst_a < 1e-12 && worst_b < 1e-5 && t < Duration::from_secs(60),
        format!("20 models: max |dA| {worst_a:.1e} (< 1e-12), max rel err dB {worst_b:.2e} (< 1e-5), {t:.1?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let check = expected_ata_check(4, 12, 1_000_000, &RngState::new(2)).unwrap();
    let t = start.elapsed();
    let target_ok = (check.target_diagonal - 1.0 / 9.0).abs() < 1e-15;
    outcome(
        check.max_z < 5.0 && target_ok && t < Duration::from_secs(60),
        format!(
            "1e6 draws r=4 d_in=12: max z {:.2} (< 5) against diagonal {:.6} and off-diagonal 0, {t:.1?}",
            check.max_z, check.target_diagonal
        ),
    )
}

fn pretrained_default() -> (ModelParams, Vec<ProbeSample>) {
    let cfg = ModelConfig::default();
    let mut base = ModelParams::init(cfg, &RngState::new(3)).unwrap();
    let copy = TaskData::generate(Task::Copy { len: 6 }, &cfg, 256, 16, 4).unwrap();
    let pre = TrainConfig {
        steps: 100,
        batch_size: 8,
        peak_lr: 3e-3,
        warmup_ratio: 0.03,
        seed: 5,
    };
    pretrain(&mut base, &pre, &copy.train).unwrap();
    let probe = Task::ModAdd { modulus: 16 }.generate(32, cfg.vocab_size, &RngState::new(6));
    (base, probe)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (base, probe) = pretrained_default();
    let grads = probe_gradients(&base, &probe).unwrap();
    let sens = sensitivity_from_gradients(&grads).unwrap();
    let (rank, scale) = (64, 2.0);
    let closed = page_closed_form(&sens, rank, scale, &base.config.d_in_map()).unwrap();
    let trace = page_trace_map(&grads, rank, scale).unwrap();
    let (mut rel, mut max_z) = (0.0f64, 0.0f64);
    for (i, (&id, &c)) in closed.values.iter().enumerate() {
        rel = rel.max((c - trace.get(id).unwrap()).abs() / c);
        let mc = page_monte_carlo(&grads, id, rank, scale, 10_000, &RngState::new(7).split(i as u64)).unwrap();
        max_z = max_z.max((mc.estimate - c).abs() / mc.stderr);
    }
    let t = start.elapsed();
    outcome(
        closed.values.len() == 28 && rel <= 1e-12 && max_z <= 4.0 && t < Duration::from_secs(300),
        format!(
            "{} modules: closed vs trace {rel:.1e} (<= 1e-12), Monte Carlo 1e4 trials max z {max_z:.2} (<= 4), {t:.1?}",
            closed.values.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = RngState::new(40 + seed);
        let ids: Vec<ModuleId> = ModelConfig::default().modules();
        let sets: Vec<GradientSet> = (0..8)
            .map(|_| {
                ids.iter()
                    .map(|&id| {
                        let scale = 10f64.powf(rng.uniform(-3.0, 3.0));
                        (id, Matrix::from_fn(5, 7, |_, _| scale * rng.uniform(-1.0, 1.0)))
                    })
                    .collect()
            })
            .collect();
        let sens = sensitivity_from_gradients(&sets).unwrap();
        for &id in &ids {
            let (fisher, _) = fisher_trace_check(&sets, id).unwrap();
            let s = sens.get(id).unwrap();
            worst = worst.max((fisher - s).abs() / s);
        }
    }
    outcome(worst <= 1e-12, format!("10 random gradient sets x 28 modules: max rel diff {worst:.1e} (<= 1e-12)"))
}

fn criterion_5() -> Outcome {
    let cfg = toy(0);
    let params = ModelParams::init(cfg, &RngState::new(8)).unwrap();
    let set = toy_samples(&cfg, 8);
    let mut worst = (0.0f64, String::new());
    for kind in ProjKind::ALL {
        for layer in 0..cfg.n_layers {
            let id = ModuleId::new(layer, kind);
            let err = relative_error(
                &mean_gradient(&params, &set, id),
                &projection_gradient_fd(&params, &set, id, 1e-4).unwrap(),
            );
            if err >= worst.0 {
                worst = (err, id.to_string());
            }
        }
    }
    outcome(
        worst.0 < 1e-5,
        format!("2-layer d_model=8, all 7 kinds, h=1e-4: max rel err {:.2e} at {} (< 1e-5)", worst.0, worst.1),
    )
}

fn criterion_6() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 48,
        vocab_size: 20,
        max_seq_len: 12,
    };
    let base = ModelParams::init(cfg, &RngState::new(9)).unwrap();
    let data = TaskData::generate(Task::ModAdd { modulus: 7 }, &cfg, 64, 16, 10).unwrap();
    let train = TrainConfig {
        steps: 200,
        batch_size: 4,
        peak_lr: 5e-3,
        warmup_ratio: 0.03,
        seed: 11,
    };
    let target = ModuleId::new(1, ProjKind::Down);
    let mut changed_outside = 0;
    let mut target_moved = true;
    for mode in [PlacementMode::DominantOnly(target), PlacementMode::FullWeightDominant(target)] {
        let plan = PlacementPlan::new(mode, &base, 8, 16.0, &RngState::new(12)).unwrap();
        let (_, trained) = run_experiment("freeze", &base, plan, &train, &data).unwrap();
        let after = trained.apply(&base).unwrap();
        for ((name, a), b) in base.tensor_names().iter().zip(base.tensors()).zip(after.tensors()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if *name == target.to_string() {
                target_moved &= !same;
            } else if !same {
                changed_outside += 1;
            }
        }
    }
    outcome(
        changed_outside == 0 && target_moved,
        format!("dominant-only and full-dominant, 200 steps: {changed_outside} non-target tensors changed, target trained: {target_moved}"),
    )
}

fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for (steps, ratio, peak) in [(200, 0.03, 2e-4), (1000, 0.03, 1e-3), (37, 0.1, 5e-5)] {
        let cfg = TrainConfig {
            steps,
            batch_size: 1,
            peak_lr: peak,
            warmup_ratio: ratio,
            seed: 0,
        };
        let w = cfg.warmup_steps();
        worst = worst
            .max(lr_at(0, &cfg).unwrap().abs())
            .max((lr_at(w, &cfg).unwrap() - peak).abs())
            .max(lr_at(steps, &cfg).unwrap().abs());
    }
    outcome(worst <= 1e-12, format!("lr(0)=0, lr(warmup)=peak, lr(final)=0: max error {worst:.1e} (<= 1e-12)"))
}

fn criterion_8() -> Outcome {
    let cfg = ModelConfig::default();
    let mut rng = RngState::new(13);
    let values = cfg.modules().into_iter().map(|m| (m, 10f64.powf(rng.uniform(-2.0, 2.0)))).collect();
    let sens = page_core::probe::SensitivityMap { values, n_samples: 32 };
    let d_in = cfg.d_in_map();
    let mut exact = true;
    for (&id, &s) in &sens.values {
        let d = d_in[&id];
        for (r, sc) in [(16, 2.0), (64, 2.0), (8, 0.5)] {
            let base = closed_form_value(s, r, sc, d);
            for c in [2.0, 3.0, 0.1] {
                let scaled = closed_form_value(s, r, c * sc, d);
                exact &= (scaled - c * c * base).abs() <= 1e-15 * scaled;
            }
            exact &= closed_form_value(s, 2 * r, sc, d) == 2.0 * base;
            exact &= (closed_form_value(s, 3 * r, sc, d) - 3.0 * base).abs() <= 1e-15 * base;
        }
    }
    let pm = page_closed_form(&sens, 64, 2.0, &d_in).unwrap();
    let mut invariant = true;
    for restrict in [None, Some(ProjKind::Down)] {
        let d0 = select_dominant(&pm, restrict).unwrap();
        for k in [1e-9, 0.5, 7.0, 1e9] {
            invariant &= select_dominant(&pm.map_values(|v| k * v), restrict).unwrap() == d0;
        }
    }
    outcome(
        exact && invariant,
        format!("c^2 scaling in s and linear scaling in r hold: {exact}; argmax invariant under rescaling: {invariant}"),
    )
}

fn page_bin(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_page"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("page binary runs")
}

fn criterion_9(dir: &Path) -> Outcome {
    let start = Instant::now();
    // Six layers: at four, one Down adapter is exactly 1/20 of the
    // all-modules count, so the comparison against 5% would be a tie.
    fs::write(
        dir.join("sweep.toml"),
        "[model]\nn_layers = 6\n\n[sweep]\nplans = [\"all\", \"down@dom\", \"up@dom\", \"gate@dom\", \"ffn@dom\", \"attn@dom\", \"down@mid\", \"down@last\"]\nranks = [16, 32, 64]\n",
    )
    .unwrap();
    let out = page_bin(dir, &["sweep", "--config", "sweep.toml", "--out-dir", "sweep"]);
    if !out.status.success() {
        return outcome(false, format!("sweep failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let csv = fs::read_to_string(dir.join("sweep/sweep.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let kind_rows = ["down@dom", "up@dom", "gate@dom", "ffn@dom", "attn@dom"]
        .iter()
        .filter(|l| labels.contains(l))
        .count();
    let layer_rows = ["down@mid", "down@last"].iter().filter(|l| labels.contains(l)).count();
    let runs: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.join("sweep/runs.json")).unwrap()).unwrap();
    let rank_rows = runs
        .iter()
        .filter(|r| r["label"].as_str().unwrap().starts_with("dominant-only@r"))
        .filter(|r| r["alpha"].as_f64().unwrap() == 2.0 * r["rank"].as_f64().unwrap())
        .map(|r| r["rank"].as_u64().unwrap())
        .collect::<Vec<_>>();
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.join("sweep/sweep_summary.json")).unwrap()).unwrap();
    let ratio = summary["dominant_only_ratio"].as_f64().unwrap();
    let t = start.elapsed();
    outcome(
        kind_rows == 5 && layer_rows == 2 && rank_rows == [16, 32, 64] && ratio < 0.05 && t < Duration::from_secs(900),
        format!(
            "{kind_rows} kind rows, {layer_rows} layer rows, rank rows {rank_rows:?} with alpha=2r; dominant-only/all params {:.2}% (< 5%), {t:.1?}",
            100.0 * ratio
        ),
    )
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    if names != other {
        return Err(format!("file sets differ: {names:?} vs {other:?}"));
    }
    for n in &names {
        if fs::read(a.join(n)).unwrap() != fs::read(b.join(n)).unwrap() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn criterion_10(dir: &Path) -> Outcome {
    fs::write(dir.join("small.toml"), "[pretrain]\nsteps = 40\n\n[train]\nsteps = 30\n").unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for cmd in ["probe", "train", "gen-data", "init-model"] {
        let first = format!("{cmd}-first");
        let again = format!("{cmd}-again");
        let run = page_bin(dir, &[cmd, "--config", "small.toml", "--out-dir", &first]);
        let replay = page_bin(dir, &["replay", "--manifest", &format!("{first}/manifest.json"), "--out-dir", &again]);
        match (run.status.success(), replay.status.success(), same_tree(&dir.join(&first), &dir.join(&again))) {
            (true, true, Ok(n)) => notes.push(format!("{cmd} {n} files")),
            (_, _, res) => {
                ok = false;
                notes.push(format!("{cmd} failed ({res:?})"));
            }
        }
    }
    // The sweep from criterion 9 replays as well.
    let replay = page_bin(dir, &["replay", "--manifest", "sweep/manifest.json", "--out-dir", "sweep-again"]);
    match (replay.status.success(), same_tree(&dir.join("sweep"), &dir.join("sweep-again"))) {
        (true, Ok(n)) => notes.push(format!("sweep {n} files")),
        (_, res) => {
            ok = false;
            notes.push(format!("sweep failed ({res:?})"));
        }
    }
    outcome(ok, format!("replayed byte for byte: {}", notes.join(", ")))
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path();
    let criteria: Vec<Criterion> = vec![
        ("adapter gradients at init", Box::new(criterion_1)),
        ("A^T A second moment", Box::new(criterion_2)),
        ("PAGE closed/trace/Monte Carlo agreement", Box::new(criterion_3)),
        ("sensitivity equals Fisher trace", Box::new(criterion_4)),
        ("model gradient oracle", Box::new(criterion_5)),
        ("freeze integrity", Box::new(criterion_6)),
        ("learning-rate schedule", Box::new(criterion_7)),
        ("scale and selection laws", Box::new(criterion_8)),
        ("sweep structure", Box::new(move || criterion_9(dir))),
        ("replay determinism", Box::new(move || criterion_10(dir))),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.passed {
            failures += 1;
        }
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
