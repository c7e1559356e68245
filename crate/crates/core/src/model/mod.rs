//! Miniature decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention
//! (Q, K, V, O projections), and a gated SiLU feed-forward network
//! (Up, Gate, Down). No biases. Learned absolute position embeddings.
//!
//! Projection weights are stored `d_out × d_in` and applied to row vectors,
//! `y = x Wᵀ`, so the gradient of a projection has the weight's shape.

pub(crate) mod checkpoint;
mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use transformer::{backward, backward_projection_grads, forward, ForwardCache};

/// Epsilon inside the RMS normalization square root.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 96,
            vocab_size: 64,
            max_seq_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every candidate adapter site, layer-major, kinds in canonical order.
    pub fn modules(&self) -> Vec<ModuleId> {
        (0..self.n_layers)
            .flat_map(|layer| ProjKind::ALL.iter().map(move |&kind| ModuleId { layer, kind }))
            .collect()
    }

    pub fn d_in(&self, kind: ProjKind) -> usize {
        match kind {
            ProjKind::Down => self.d_ff,
            _ => self.d_model,
        }
    }

    pub fn d_out(&self, kind: ProjKind) -> usize {
        match kind {
            ProjKind::Up | ProjKind::Gate => self.d_ff,
            _ => self.d_model,
        }
    }

    pub fn d_in_map(&self) -> BTreeMap<ModuleId, usize> {
        self.modules().into_iter().map(|m| (m, self.d_in(m.kind))).collect()
    }

    pub fn contains(&self, id: ModuleId) -> bool {
        id.layer < self.n_layers
    }
}

/// Projection kind inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::Q,
        ProjKind::K,
        ProjKind::V,
        ProjKind::O,
        ProjKind::Up,
        ProjKind::Gate,
        ProjKind::Down,
    ];
    pub const ATTENTION: [ProjKind; 4] = [ProjKind::Q, ProjKind::K, ProjKind::V, ProjKind::O];
    pub const FFN: [ProjKind; 3] = [ProjKind::Up, ProjKind::Gate, ProjKind::Down];

    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Q => "q",
            ProjKind::K => "k",
            ProjKind::V => "v",
            ProjKind::O => "o",
            ProjKind::Up => "up",
            ProjKind::Gate => "gate",
            ProjKind::Down => "down",
        }
    }
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProjKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown projection kind {s:?}")))
    }
}

/// One candidate adapter site, `(layer, kind)`. Displays as `L{layer}.{kind}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ProjKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ProjKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("module id {s:?} is not of the form L<layer>.<kind>"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, kind) = rest.split_once('.').ok_or_else(bad)?;
        Ok(ModuleId {
            layer: layer.parse().map_err(|_| bad())?,
            kind: kind.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub ffn_norm: Matrix,
    pub up: Matrix,
    pub gate: Matrix,
    pub down: Matrix,
}

impl LayerParams {
    fn projection(&self, kind: ProjKind) -> &Matrix {
        match kind {
            ProjKind::Q => &self.q,
            ProjKind::K => &self.k,
            ProjKind::V => &self.v,
            ProjKind::O => &self.o,
            ProjKind::Up => &self.up,
            ProjKind::Gate => &self.gate,
            ProjKind::Down => &self.down,
        }
    }

    fn projection_mut(&mut self, kind: ProjKind) -> &mut Matrix {
        match kind {
            ProjKind::Q => &mut self.q,
            ProjKind::K => &mut self.k,
            ProjKind::V => &mut self.v,
            ProjKind::O => &mut self.o,
            ProjKind::Up => &mut self.up,
            ProjKind::Gate => &mut self.gate,
            ProjKind::Down => &mut self.down,
        }
    }
}

/// All model parameters. Also used as the container for full-model
/// gradients, which have identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix,
    pub unembed: Matrix,
}

impl ModelParams {
    /// All-zero parameters, normalization gains included.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = || LayerParams {
            attn_norm: Matrix::zeros(1, d),
            q: Matrix::zeros(d, d),
            k: Matrix::zeros(d, d),
            v: Matrix::zeros(d, d),
            o: Matrix::zeros(d, d),
            ffn_norm: Matrix::zeros(1, d),
            up: Matrix::zeros(config.d_ff, d),
            gate: Matrix::zeros(config.d_ff, d),
            down: Matrix::zeros(d, config.d_ff),
        };
        Ok(Self {
            config,
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_norm: Matrix::zeros(1, d),
            unembed: Matrix::zeros(config.vocab_size, d),
        })
    }

    /// Random initialization: projections `U(−1/√d_in, 1/√d_in)`, embeddings
    /// `U(−0.5, 0.5)`, normalization gains 1. Each tensor draws from its own
    /// split of `rng`, keyed by its position in [`ModelParams::tensor_names`].
    pub fn init(config: ModelConfig, rng: &RngState) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let names = params.tensor_names();
        for (slot, (name, tensor)) in names.iter().zip(params.tensors_mut()).enumerate() {
            let mut stream = rng.split(slot as u64);
            if name.ends_with("norm") {
                tensor.data_mut().fill(1.0);
                continue;
            }
            let bound = if name.ends_with("emb") {
                0.5
            } else {
                1.0 / (tensor.cols() as f64).sqrt()
            };
            for x in tensor.data_mut() {
                *x = stream.uniform(-bound, bound);
            }
        }
        Ok(params)
    }

    pub fn projection(&self, id: ModuleId) -> Result<&Matrix> {
        self.layers
            .get(id.layer)
            .map(|l| l.projection(id.kind))
            .ok_or_else(|| Error::MissingModule(id.to_string()))
    }

    pub fn projection_mut(&mut self, id: ModuleId) -> Result<&mut Matrix> {
        self.layers
            .get_mut(id.layer)
            .map(|l| l.projection_mut(id.kind))
            .ok_or_else(|| Error::MissingModule(id.to_string()))
    }

    /// Tensor names in canonical order; matches [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.layers.len() {
            names.push(format!("L{l}.attn_norm"));
            for kind in ProjKind::ATTENTION {
                names.push(ModuleId::new(l, kind).to_string());
            }
            names.push(format!("L{l}.ffn_norm"));
            for kind in ProjKind::FFN {
                names.push(ModuleId::new(l, kind).to_string());
            }
        }
        names.push("final_norm".to_string());
        names.push("unembed".to_string());
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.attn_norm, &l.q, &l.k, &l.v, &l.o, &l.ffn_norm, &l.up, &l.gate, &l.down]);
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.q,
                &mut l.k,
                &mut l.v,
                &mut l.o,
                &mut l.ffn_norm,
                &mut l.up,
                &mut l.gate,
                &mut l.down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Per-module projection gradients, `G = ∇_W loss`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet(BTreeMap<ModuleId, Matrix>);

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ModuleId, grad: Matrix) {
        self.0.insert(id, grad);
    }

    pub fn get(&self, id: ModuleId) -> Option<&Matrix> {
        self.0.get(&id)
    }

    pub fn require(&self, id: ModuleId) -> Result<&Matrix> {
        self.get(id).ok_or_else(|| Error::MissingModule(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModuleId, &Matrix)> {
        self.0.iter()
    }

    pub fn modules(&self) -> impl Iterator<Item = ModuleId> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scale(&self, c: f64) -> GradientSet {
        GradientSet(self.0.iter().map(|(k, m)| (*k, m.scale(c))).collect())
    }
}

impl FromIterator<(ModuleId, Matrix)> for GradientSet {
    fn from_iter<I: IntoIterator<Item = (ModuleId, Matrix)>>(iter: I) -> Self {
        GradientSet(iter.into_iter().collect())
    }
}
