use page_core::data::Task;
use page_core::lora::{PlacementMode, PlacementPlan};
use page_core::model::{ModelConfig, ModelParams, ModuleId, ProjKind};
use page_core::tensor::RngState;
use page_core::trainer::{mean_loss, placement_sweep, pretrain, run_experiment, TaskData, TrainConfig};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 48,
        vocab_size: 20,
        max_seq_len: 12,
    }
}

fn setup() -> (ModelParams, TaskData) {
    let cfg = small_cfg();
    let mut base = ModelParams::init(cfg, &RngState::new(1)).unwrap();
    let copy = TaskData::generate(Task::Copy { len: 3 }, &cfg, 128, 16, 2).unwrap();
    let pre = TrainConfig {
        steps: 60,
        batch_size: 8,
        peak_lr: 3e-3,
        warmup_ratio: 0.05,
        seed: 3,
    };
    let curve = pretrain(&mut base, &pre, &copy.train).unwrap();
    assert!(curve.last().unwrap() < &curve[0]);
    let data = TaskData::generate(Task::ModAdd { modulus: 7 }, &cfg, 128, 32, 4).unwrap();
    (base, data)
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        peak_lr: 5e-3,
        warmup_ratio: 0.03,
        seed: 11,
    }
}

fn assert_frozen_except(base: &ModelParams, trained: &ModelParams, target: ModuleId) {
    let names = base.tensor_names();
    for ((name, a), b) in names.iter().zip(base.tensors()).zip(trained.tensors()) {
        if *name == target.to_string() {
            assert_ne!(a, b, "{name} should have been trained");
            continue;
        }
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} changed");
    }
}

#[test]
fn dominant_only_and_full_weight_freeze_everything_else() {
    let (base, data) = setup();
    let snapshot = base.clone();
    let target = ModuleId::new(1, ProjKind::Down);
    let rng = RngState::new(5);
    for mode in [PlacementMode::DominantOnly(target), PlacementMode::FullWeightDominant(target)] {
        let plan = PlacementPlan::new(mode, &base, 4, 8.0, &rng).unwrap();
        let (record, trained) = run_experiment("x", &base, plan, &train_cfg(10), &data).unwrap();
        assert_eq!(record.loss_curve.len(), 10);
        assert_frozen_except(&base, &trained.apply(&base).unwrap(), target);
    }
    assert_eq!(base, snapshot);
}

#[test]
fn dominant_only_reduces_loss_and_is_deterministic() {
    let (base, data) = setup();
    let target = ModuleId::new(0, ProjKind::Down);
    let plan = PlacementPlan::new(PlacementMode::DominantOnly(target), &base, 8, 16.0, &RngState::new(5)).unwrap();
    let cfg = train_cfg(200);
    let (a, _) = run_experiment("dom", &base, plan.clone(), &cfg, &data).unwrap();
    assert_eq!(a.trainable_params, 8 * (16 + 48));
    let baseline = mean_loss(&base, &data.train).unwrap();
    assert!(a.final_train_loss < baseline, "{} vs {baseline}", a.final_train_loss);
    assert!(a.final_eval_loss < a.initial_eval_loss);
    let (b, _) = run_experiment("dom", &base, plan, &cfg, &data).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_shares_data_order_and_counts_params() {
    let (base, data) = setup();
    let rng = RngState::new(5);
    let dom = ModuleId::new(2, ProjKind::Down);
    let plans = vec![
        ("all".to_string(), PlacementPlan::new(PlacementMode::All, &base, 4, 8.0, &rng).unwrap()),
        ("dom".to_string(), PlacementPlan::new(PlacementMode::DominantOnly(dom), &base, 4, 8.0, &rng).unwrap()),
    ];
    let records = placement_sweep(&base, plans, &train_cfg(5), &data).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records[0].trainable_params > records[1].trainable_params);
    // Same batches and zero-init adapters: identical first-step loss.
    assert_eq!(records[0].loss_curve[0], records[1].loss_curve[0]);
    let single = vec![("dom".to_string(), PlacementPlan::new(PlacementMode::DominantOnly(dom), &base, 4, 8.0, &rng).unwrap())];
    assert!(placement_sweep(&base, single, &train_cfg(5), &data).is_err());
}
