//! LoRA adapters (`W = W⁰ + s·B·A`, `s = α/r`), their factor gradients,
//! placement plans, and the optimizer step that trains only what a plan
//! marks trainable.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{read_matrix, read_name, read_u64, write_matrix, write_name, write_u64};
use crate::model::{GradientSet, ModelConfig, ModelParams, ModuleId, ProjKind};
use crate::tensor::{kaiming_uniform_init, Matrix, RngState};

pub const DEFAULT_RANK: usize = 64;
pub const DEFAULT_ALPHA: f64 = 128.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: ModuleId,
    pub rank: usize,
    pub alpha: f64,
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
}

impl LoraAdapter {
    /// Fresh adapter: `B = 0`, `A` Kaiming-uniform.
    pub fn new(target: ModuleId, rank: usize, alpha: f64, d_in: usize, d_out: usize, rng: &mut RngState) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            target,
            rank,
            alpha,
            a: kaiming_uniform_init(rng, rank, d_in)?,
            b: Matrix::zeros(d_out, rank),
        })
    }

    pub fn for_model(target: ModuleId, rank: usize, alpha: f64, config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        if !config.contains(target) {
            return Err(Error::MissingModule(target.to_string()));
        }
        Self::new(target, rank, alpha, config.d_in(target.kind), config.d_out(target.kind), rng)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }

    fn check_shapes(&self, rows: usize, cols: usize) -> Result<()> {
        let name = self.target.to_string();
        self.a.ensure_shape(self.rank, cols, &format!("{name} A"))?;
        self.b.ensure_shape(rows, self.rank, &format!("{name} B"))
    }
}

/// `W⁰ + (α/r)·B·A`.
pub fn effective_weight(base: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    adapter.check_shapes(base.rows(), base.cols())?;
    let mut w = base.clone();
    w.axpy(adapter.scale(), &adapter.b.matmul(&adapter.a));
    Ok(w)
}

/// Chain-rule factor gradients from the effective-weight gradient `G`:
/// `∇A = s·Bᵀ·G`, `∇B = s·G·Aᵀ`. Returns `(∇A, ∇B)`.
pub fn factor_gradients(full_grad: &Matrix, adapter: &LoraAdapter) -> Result<(Matrix, Matrix)> {
    adapter.check_shapes(full_grad.rows(), full_grad.cols())?;
    let s = adapter.scale();
    let grad_a = adapter.b.t_matmul(full_grad).scale(s);
    let grad_b = full_grad.matmul_t(&adapter.a).scale(s);
    Ok((grad_a, grad_b))
}

/// Which modules receive trainable updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "sites")]
pub enum PlacementMode {
    /// Adapters on every projection of every layer.
    All,
    /// Adapters on every projection of the listed layers.
    LayerSubset(Vec<usize>),
    /// Adapters on the listed kinds in every layer.
    KindSubset(Vec<ProjKind>),
    /// Adapters on an explicit module list (ablations).
    Modules(Vec<ModuleId>),
    /// A single adapter on the dominant module.
    DominantOnly(ModuleId),
    /// No adapters; the dominant projection itself is trained.
    FullWeightDominant(ModuleId),
}

impl PlacementMode {
    pub fn targets(&self, config: &ModelConfig) -> Result<Vec<ModuleId>> {
        let all = config.modules();
        let targets: Vec<ModuleId> = match self {
            PlacementMode::All => all,
            PlacementMode::LayerSubset(layers) => {
                if let Some(l) = layers.iter().find(|&&l| l >= config.n_layers) {
                    return Err(Error::MissingModule(format!("layer {l}")));
                }
                all.into_iter().filter(|m| layers.contains(&m.layer)).collect()
            }
            PlacementMode::KindSubset(kinds) => all.into_iter().filter(|m| kinds.contains(&m.kind)).collect(),
            PlacementMode::Modules(mods) => {
                let mut mods = mods.clone();
                mods.sort();
                mods.dedup();
                mods
            }
            PlacementMode::DominantOnly(m) | PlacementMode::FullWeightDominant(m) => vec![*m],
        };
        if targets.is_empty() {
            return Err(Error::InvalidArgument(format!("placement {self} selects no modules")));
        }
        if let Some(m) = targets.iter().find(|m| !config.contains(**m)) {
            return Err(Error::MissingModule(m.to_string()));
        }
        Ok(targets)
    }
}

impl std::fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fn join<T: std::fmt::Display>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("+")
        }
        match self {
            PlacementMode::All => write!(f, "all"),
            PlacementMode::LayerSubset(ls) => write!(f, "layers[{}]", join(ls)),
            PlacementMode::KindSubset(ks) => write!(f, "kinds[{}]", join(ks)),
            PlacementMode::Modules(ms) => write!(f, "modules[{}]", join(ms)),
            PlacementMode::DominantOnly(m) => write!(f, "dominant-only[{m}]"),
            PlacementMode::FullWeightDominant(m) => write!(f, "full-dominant[{m}]"),
        }
    }
}

/// The trainable state of a run: adapters, or whole projections for
/// [`PlacementMode::FullWeightDominant`]. The base parameters are never
/// modified; [`PlacementPlan::apply`] builds the effective model.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub mode: PlacementMode,
    pub adapters: Vec<LoraAdapter>,
    pub full_weights: Vec<(ModuleId, Matrix)>,
}

fn module_slot(id: ModuleId) -> u64 {
    (id.layer * ProjKind::ALL.len() + id.kind as usize) as u64
}

impl PlacementPlan {
    /// Builds fresh adapters for `mode`. The `A` factor of the adapter on
    /// module `m` always comes from the same split of `rng`, whichever plan
    /// it belongs to.
    pub fn new(mode: PlacementMode, base: &ModelParams, rank: usize, alpha: f64, rng: &RngState) -> Result<Self> {
        let targets = mode.targets(&base.config)?;
        if let PlacementMode::FullWeightDominant(m) = mode {
            let w = base.projection(m)?.clone();
            return Ok(Self {
                mode,
                adapters: Vec::new(),
                full_weights: vec![(m, w)],
            });
        }
        let adapters = targets
            .iter()
            .map(|&m| LoraAdapter::for_model(m, rank, alpha, &base.config, &mut rng.split(module_slot(m))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            adapters,
            full_weights: Vec::new(),
        })
    }

    pub fn trainable_modules(&self) -> Vec<ModuleId> {
        self.adapters
            .iter()
            .map(|a| a.target)
            .chain(self.full_weights.iter().map(|(m, _)| *m))
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum::<usize>()
            + self.full_weights.iter().map(|(_, w)| w.data().len()).sum::<usize>()
    }

    /// Effective model: base weights with adapters merged and trained full
    /// weights substituted.
    pub fn apply(&self, base: &ModelParams) -> Result<ModelParams> {
        let mut params = base.clone();
        for adapter in &self.adapters {
            let w = params.projection_mut(adapter.target)?;
            *w = effective_weight(w, adapter)?;
        }
        for (m, weight) in &self.full_weights {
            let w = params.projection_mut(*m)?;
            weight.ensure_shape(w.rows(), w.cols(), &m.to_string())?;
            *w = weight.clone();
        }
        Ok(params)
    }
}

/// Update rule. AdamW uses the standard bias-corrected moments:
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// p ← p − lr·( m/(1−β₁ᵗ) / (√(v/(1−β₂ᵗ)) + ε) + λ·p )
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state keyed by integer parameter slots.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once per training step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len(), "optimizer slot {slot} length");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.moments.len() <= slot {
                    self.moments.resize_with(slot + 1, Default::default);
                }
                let (m, v) = &mut self.moments[slot];
                if m.is_empty() {
                    *m = vec![0.0; params.len()];
                    *v = vec![0.0; params.len()];
                }
                let t = self.step.max(1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps) + weight_decay * params[i];
                    params[i] -= lr * step;
                }
            }
        }
    }
}

/// One optimizer step on the plan's trainable state, from effective-weight
/// gradients `grads`. Adapter factors get the chain-rule gradients of
/// [`factor_gradients`]; full weights get `G` directly.
pub fn train_step_lora(plan: &mut PlacementPlan, grads: &GradientSet, optimizer: &mut Optimizer, lr: f64) -> Result<()> {
    for m in plan.trainable_modules() {
        grads.require(m)?;
    }
    optimizer.begin_step();
    for (i, adapter) in plan.adapters.iter_mut().enumerate() {
        let (grad_a, grad_b) = factor_gradients(grads.require(adapter.target)?, adapter)?;
        optimizer.update(2 * i, adapter.a.data_mut(), grad_a.data(), lr);
        optimizer.update(2 * i + 1, adapter.b.data_mut(), grad_b.data(), lr);
    }
    let offset = 2 * plan.adapters.len();
    for (j, (m, w)) in plan.full_weights.iter_mut().enumerate() {
        optimizer.update(offset + j, w.data_mut(), grads.require(*m)?.data(), lr);
    }
    Ok(())
}

const ADAPTER_MAGIC: &[u8; 8] = b"PGLORA01";

/// Adapter checkpoint: magic `PGLORA01`, `u32` adapter count, then per
/// adapter the target name, `u64` rank, `f64` alpha, and the `A` and `B`
/// matrices in the parameter-checkpoint matrix encoding. Little-endian.
pub fn write_adapters(w: &mut impl Write, adapters: &[LoraAdapter]) -> Result<()> {
    w.write_all(ADAPTER_MAGIC)?;
    w.write_all(&(adapters.len() as u32).to_le_bytes())?;
    for a in adapters {
        write_name(w, &a.target.to_string())?;
        write_u64(w, a.rank as u64)?;
        w.write_all(&a.alpha.to_le_bytes())?;
        write_matrix(w, &a.a)?;
        write_matrix(w, &a.b)?;
    }
    Ok(())
}

pub fn read_adapters(r: &mut impl Read) -> Result<Vec<LoraAdapter>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ADAPTER_MAGIC {
        return Err(Error::Format("not an adapter checkpoint (bad magic)".into()));
    }
    let mut count = [0u8; 4];
    r.read_exact(&mut count)?;
    (0..u32::from_le_bytes(count))
        .map(|_| {
            let target: ModuleId = read_name(r)?.parse()?;
            let rank = read_u64(r)? as usize;
            let mut alpha = [0u8; 8];
            r.read_exact(&mut alpha)?;
            let a = read_matrix(r)?;
            let b = read_matrix(r)?;
            let adapter = LoraAdapter {
                target,
                rank,
                alpha: f64::from_le_bytes(alpha),
                a,
                b,
            };
            adapter.check_shapes(adapter.b.rows(), adapter.a.cols())?;
            Ok(adapter)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> ModuleId {
        ModuleId::new(0, ProjKind::Down)
    }

    #[test]
    fn fresh_adapter_preserves_base() {
        let mut rng = RngState::new(1);
        let base = Matrix::from_fn(5, 7, |r, c| (r * 7 + c) as f64 * 0.1 - 1.0);
        let ad = LoraAdapter::new(target(), 3, 6.0, 7, 5, &mut rng).unwrap();
        assert_eq!(ad.scale(), 2.0);
        assert_eq!(effective_weight(&base, &ad).unwrap(), base);
    }

    #[test]
    fn effective_weight_hand_example() {
        let ad = LoraAdapter {
            target: target(),
            rank: 1,
            alpha: 1.0,
            a: Matrix::from_rows(&[&[2.0, 0.0, 0.0]]),
            b: Matrix::from_rows(&[&[1.0], &[0.0]]),
        };
        let base = Matrix::zeros(2, 3);
        assert_eq!(
            effective_weight(&base, &ad).unwrap(),
            Matrix::from_rows(&[&[2.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])
        );
        let doubled = LoraAdapter { alpha: 2.0, ..ad.clone() };
        let d1 = effective_weight(&base, &ad).unwrap();
        let d2 = effective_weight(&base, &doubled).unwrap();
        assert_eq!(d2, d1.scale(2.0));
        assert!(effective_weight(&Matrix::zeros(3, 3), &ad).is_err());
    }

    #[test]
    fn adapter_gradients_at_init() {
        let mut rng = RngState::new(4);
        let ad = LoraAdapter::new(target(), 4, 8.0, 6, 5, &mut rng).unwrap();
        let g = Matrix::from_fn(5, 6, |_, _| rng.uniform(-1.0, 1.0));
        let (ga, gb) = factor_gradients(&g, &ad).unwrap();
        assert!(ga.data().iter().all(|&x| x == 0.0));
        let want = g.matmul(&ad.a.transpose()).scale(2.0);
        assert!(gb.max_abs_diff(&want) < 1e-14);
        let (za, zb) = factor_gradients(&Matrix::zeros(5, 6), &ad).unwrap();
        assert!(za.data().iter().chain(zb.data()).all(|&x| x == 0.0));
        assert!(factor_gradients(&Matrix::zeros(6, 5), &ad).is_err());
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        // Scalar surrogate f(A, B) = ⟨G, s·B·A⟩.
        let mut rng = RngState::new(21);
        let mut ad = LoraAdapter::new(target(), 3, 4.5, 5, 4, &mut rng).unwrap();
        ad.b = Matrix::from_fn(4, 3, |_, _| rng.uniform(-1.0, 1.0));
        let g = Matrix::from_fn(4, 5, |_, _| rng.uniform(-1.0, 1.0));
        let f = |a: &LoraAdapter| {
            let u = a.b.matmul(&a.a).scale(a.scale());
            g.data().iter().zip(u.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let (ga, gb) = factor_gradients(&g, &ad).unwrap();
        let h = 1e-5;
        for (which, analytic) in [(0, &ga), (1, &gb)] {
            for idx in 0..analytic.data().len() {
                let mut plus = ad.clone();
                let mut minus = ad.clone();
                let (p, m) = if which == 0 {
                    (&mut plus.a, &mut minus.a)
                } else {
                    (&mut plus.b, &mut minus.b)
                };
                p.data_mut()[idx] += h;
                m.data_mut()[idx] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = analytic.data()[idx];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{which}/{idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn placement_targets() {
        let cfg = ModelConfig::default();
        assert_eq!(PlacementMode::All.targets(&cfg).unwrap().len(), 28);
        assert_eq!(PlacementMode::LayerSubset(vec![1]).targets(&cfg).unwrap().len(), 7);
        assert_eq!(
            PlacementMode::KindSubset(vec![ProjKind::Down, ProjKind::Q]).targets(&cfg).unwrap().len(),
            8
        );
        assert!(PlacementMode::LayerSubset(vec![9]).targets(&cfg).is_err());
        assert!(PlacementMode::Modules(vec![]).targets(&cfg).is_err());
    }

    #[test]
    fn plan_invariants_and_counts() {
        let cfg = ModelConfig::default();
        let base = ModelParams::init(cfg, &RngState::new(1)).unwrap();
        let rng = RngState::new(2);
        let dom = ModuleId::new(1, ProjKind::Down);
        let p = PlacementPlan::new(PlacementMode::DominantOnly(dom), &base, 16, 32.0, &rng).unwrap();
        assert_eq!(p.adapters.len(), 1);
        assert_eq!(p.trainable_param_count(), 16 * (32 + 96));
        assert_eq!(p.trainable_param_count(), 2048);
        let f = PlacementPlan::new(PlacementMode::FullWeightDominant(dom), &base, 16, 32.0, &rng).unwrap();
        assert!(f.adapters.is_empty());
        assert_eq!(f.trainable_modules(), vec![dom]);
        assert_eq!(f.trainable_param_count(), 32 * 96);
        let all = PlacementPlan::new(PlacementMode::All, &base, 16, 32.0, &rng).unwrap();
        assert!(all.trainable_param_count() > p.trainable_param_count());
        // Same module, same A regardless of plan.
        let in_all = all.adapters.iter().find(|a| a.target == dom).unwrap();
        assert_eq!(in_all.a, p.adapters[0].a);
        // Zero-init adapters leave the model unchanged.
        assert_eq!(all.apply(&base).unwrap(), base);
    }

    #[test]
    fn sgd_step_from_init_matches_hand_rule() {
        let cfg = ModelConfig::default();
        let base = ModelParams::init(cfg, &RngState::new(1)).unwrap();
        let dom = ModuleId::new(2, ProjKind::Down);
        let mut plan = PlacementPlan::new(PlacementMode::DominantOnly(dom), &base, 4, 8.0, &RngState::new(3)).unwrap();
        let a0 = plan.adapters[0].a.clone();
        let mut rng = RngState::new(5);
        let g = Matrix::from_fn(32, 96, |_, _| rng.uniform(-1.0, 1.0));
        let grads: GradientSet = [(dom, g.clone())].into_iter().collect();
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let lr = 0.1;
        train_step_lora(&mut plan, &grads, &mut opt, lr).unwrap();
        assert_eq!(plan.adapters[0].a, a0);
        let want = g.matmul_t(&a0).scale(-lr * 2.0);
        assert!(plan.adapters[0].b.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = ModelConfig::default();
        let base = ModelParams::init(cfg, &RngState::new(1)).unwrap();
        let mut plan = PlacementPlan::new(PlacementMode::All, &base, 4, 8.0, &RngState::new(3)).unwrap();
        let mut rng = RngState::new(5);
        let grads: GradientSet = cfg
            .modules()
            .into_iter()
            .map(|m| (m, Matrix::from_fn(cfg.d_out(m.kind), cfg.d_in(m.kind), |_, _| rng.uniform(-1.0, 1.0))))
            .collect();
        let before = plan.clone();
        let mut opt = Optimizer::new(OptimizerKind::adamw());
        for _ in 0..3 {
            train_step_lora(&mut plan, &grads, &mut opt, 0.0).unwrap();
        }
        assert_eq!(plan, before);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let base = ModelParams::init(ModelConfig::default(), &RngState::new(1)).unwrap();
        let dom = ModuleId::new(0, ProjKind::Down);
        let mut plan = PlacementPlan::new(PlacementMode::DominantOnly(dom), &base, 4, 8.0, &RngState::new(3)).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let err = train_step_lora(&mut plan, &GradientSet::new(), &mut opt, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingModule(_)));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let mut rng = RngState::new(8);
        let mut ad = LoraAdapter::new(ModuleId::new(3, ProjKind::Gate), 5, 10.0, 32, 96, &mut rng).unwrap();
        ad.b = Matrix::from_fn(96, 5, |_, _| rng.uniform(-1.0, 1.0));
        let mut buf = Vec::new();
        write_adapters(&mut buf, std::slice::from_ref(&ad)).unwrap();
        assert_eq!(read_adapters(&mut buf.as_slice()).unwrap(), vec![ad]);
        buf[3] = 0;
        assert!(read_adapters(&mut buf.as_slice()).is_err());
    }
}
