//! Projected adapter gradient energy (PAGE): the expected squared norm of
//! the initial `B` gradient of a freshly initialized adapter,
//! `E_A[(1/N) Σ ‖s·G_i·Aᵀ‖²_F]`.
//!
//! Three independent evaluations are provided:
//!
//! * closed form, `s²·r/(3·d_in) · S_emp`;
//! * trace form, `(s²/N) Σ tr(G_iᵀG_i · E[AᵀA])` with `E[AᵀA] = r/(3·d_in)·I`
//!   built as an explicit matrix;
//! * Monte Carlo over Kaiming-uniform draws of `A`, which uses neither of
//!   the above.
//!
//! Plus dominant-module selection and concentration shares.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, ModuleId, ProjKind};
use crate::probe::SensitivityMap;
use crate::tensor::{kaiming_uniform_init, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum Provenance {
    ClosedForm,
    TraceForm,
    MonteCarlo { trials: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageMap {
    pub values: BTreeMap<ModuleId, f64>,
    pub rank: usize,
    pub scale: f64,
    pub provenance: Provenance,
}

impl PageMap {
    pub fn get(&self, id: ModuleId) -> Option<f64> {
        self.values.get(&id).copied()
    }

    pub fn total(&self) -> f64 {
        self.values.values().sum()
    }

    /// Same map with every value passed through `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> PageMap {
        PageMap {
            values: self.values.iter().map(|(k, v)| (*k, f(*v))).collect(),
            ..self.clone()
        }
    }
}

/// `s²·r/(3·d_in) · S_emp` for every module of `sens`.
pub fn page_closed_form(sens: &SensitivityMap, rank: usize, scale: f64, d_in: &BTreeMap<ModuleId, usize>) -> Result<PageMap> {
    let values = sens
        .values
        .iter()
        .map(|(&id, &s)| {
            let d = *d_in.get(&id).ok_or_else(|| Error::MissingModule(id.to_string()))?;
            if d == 0 {
                return Err(Error::InvalidArgument(format!("d_in of {id} is zero")));
            }
            Ok((id, closed_form_value(s, rank, scale, d)))
        })
        .collect::<Result<_>>()?;
    Ok(PageMap {
        values,
        rank,
        scale,
        provenance: Provenance::ClosedForm,
    })
}

pub fn closed_form_value(sensitivity: f64, rank: usize, scale: f64, d_in: usize) -> f64 {
    scale * scale * rank as f64 / (3.0 * d_in as f64) * sensitivity
}

fn module_grads(grads: &[GradientSet], module: ModuleId) -> Result<Vec<&Matrix>> {
    let first = grads.first().ok_or(Error::EmptyProbeSet)?.require(module)?;
    let (rows, cols) = first.shape();
    grads
        .iter()
        .map(|g| {
            let m = g.require(module)?;
            m.ensure_shape(rows, cols, &module.to_string())?;
            Ok(m)
        })
        .collect()
}

/// `(s²/N) Σ_i tr(G_iᵀG_i · E)` with `E = r/(3·d_in)·I_{d_in}`.
pub fn page_trace_form(grads: &[GradientSet], module: ModuleId, rank: usize, scale: f64) -> Result<f64> {
    let gs = module_grads(grads, module)?;
    let d_in = gs[0].cols();
    let expected = Matrix::identity(d_in).scale(rank as f64 / (3.0 * d_in as f64));
    let mut total = 0.0;
    for g in &gs {
        let gram = g.t_matmul(g);
        // tr(X·Y) = Σ_{p,q} X[p,q]·Y[q,p]
        let mut tr = 0.0;
        for p in 0..d_in {
            for q in 0..d_in {
                tr += gram.get(p, q) * expected.get(q, p);
            }
        }
        total += tr;
    }
    Ok(scale * scale * total / gs.len() as f64)
}

/// Trace-form PAGE for every module present in the gradient sets.
pub fn page_trace_map(grads: &[GradientSet], rank: usize, scale: f64) -> Result<PageMap> {
    let first = grads.first().ok_or(Error::EmptyProbeSet)?;
    let values = first
        .modules()
        .map(|id| Ok((id, page_trace_form(grads, id, rank, scale)?)))
        .collect::<Result<_>>()?;
    Ok(PageMap {
        values,
        rank,
        scale,
        provenance: Provenance::TraceForm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Trials are split into a fixed number of chunks that depends only on
/// `trials`; chunk `c` draws from `rng.split(c)`. Partial sums are combined
/// in chunk order, so results do not depend on the worker count.
const MC_CHUNKS: usize = 64;

fn chunk_bounds(trials: usize) -> Vec<(usize, usize)> {
    let chunks = MC_CHUNKS.min(trials);
    (0..chunks)
        .map(|c| (c * trials / chunks, (c + 1) * trials / chunks))
        .collect()
}

/// Sample mean and standard error of `(1/N) Σ_i ‖s·G_i·Aᵀ‖²_F` over
/// independent Kaiming-uniform draws of `A`.
///
/// Each trial evaluates the sample average through the Gram matrix
/// `M = (1/N) Σ G_iᵀG_i` as `s² Σ_j a_jᵀ M a_j` over the rows `a_j` of `A`;
/// this is the same quantity, not an expectation.
pub fn page_monte_carlo(
    grads: &[GradientSet],
    module: ModuleId,
    rank: usize,
    scale: f64,
    trials: usize,
    rng: &RngState,
) -> Result<MonteCarloEstimate> {
    if trials < 2 {
        return Err(Error::InvalidArgument(format!("Monte Carlo needs at least 2 trials, got {trials}")));
    }
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let gs = module_grads(grads, module)?;
    let d_in = gs[0].cols();
    let n = gs.len() as f64;
    let mut gram = Matrix::zeros(d_in, d_in);
    for g in &gs {
        gram.axpy(1.0 / n, &g.t_matmul(g));
    }
    let s2 = scale * scale;

    let partials: Vec<(f64, f64)> = chunk_bounds(trials)
        .into_par_iter()
        .enumerate()
        .map(|(c, (lo, hi))| {
            let mut stream = rng.split(c as u64);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            let mut ma = vec![0.0; d_in];
            for _ in lo..hi {
                let a = kaiming_uniform_init(&mut stream, rank, d_in).expect("positive dims");
                let mut energy = 0.0;
                for j in 0..rank {
                    let row = a.row(j);
                    for (p, slot) in ma.iter_mut().enumerate() {
                        *slot = crate::tensor::dot(gram.row(p), row);
                    }
                    energy += crate::tensor::dot(row, &ma);
                }
                let value = s2 * energy;
                sum += value;
                sum_sq += value * value;
            }
            (sum, sum_sq)
        })
        .collect();

    let (sum, sum_sq) = partials.iter().fold((0.0, 0.0), |(a, b), (s, q)| (a + s, b + q));
    let t = trials as f64;
    let mean = sum / t;
    let var = ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0);
    Ok(MonteCarloEstimate {
        estimate: mean,
        stderr: (var / t).sqrt(),
        trials,
    })
}

/// Empirical `E[AᵀA]` versus its target `r/(3·d_in)·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtaCheck {
    pub mean: Matrix,
    pub stderr: Matrix,
    pub target_diagonal: f64,
    pub max_abs_deviation: f64,
    /// Largest `|mean − target| / stderr` over all entries.
    pub max_z: f64,
    pub trials: usize,
}

pub fn expected_ata_check(rank: usize, d_in: usize, trials: usize, rng: &RngState) -> Result<AtaCheck> {
    if trials < 2 {
        return Err(Error::InvalidArgument(format!("Monte Carlo needs at least 2 trials, got {trials}")));
    }
    if rank == 0 || d_in == 0 {
        return Err(Error::InvalidArgument("rank and d_in must be positive".into()));
    }
    let cells = d_in * d_in;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = chunk_bounds(trials)
        .into_par_iter()
        .enumerate()
        .map(|(c, (lo, hi))| {
            let mut stream = rng.split(c as u64);
            let mut sum = vec![0.0; cells];
            let mut sum_sq = vec![0.0; cells];
            for _ in lo..hi {
                let a = kaiming_uniform_init(&mut stream, rank, d_in).expect("positive dims");
                let ata = a.t_matmul(&a);
                for ((s, q), &x) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(ata.data()) {
                    *s += x;
                    *q += x * x;
                }
            }
            (sum, sum_sq)
        })
        .collect();

    let mut sum = vec![0.0; cells];
    let mut sum_sq = vec![0.0; cells];
    for (s, q) in &partials {
        for i in 0..cells {
            sum[i] += s[i];
            sum_sq[i] += q[i];
        }
    }
    let t = trials as f64;
    let target_diagonal = rank as f64 / (3.0 * d_in as f64);
    let mut mean = Matrix::zeros(d_in, d_in);
    let mut stderr = Matrix::zeros(d_in, d_in);
    let mut max_abs_deviation = 0.0_f64;
    let mut max_z = 0.0_f64;
    for p in 0..d_in {
        for q in 0..d_in {
            let i = p * d_in + q;
            let m = sum[i] / t;
            let var = ((sum_sq[i] - t * m * m) / (t - 1.0)).max(0.0);
            let se = (var / t).sqrt();
            let target = if p == q { target_diagonal } else { 0.0 };
            let dev = (m - target).abs();
            mean.set(p, q, m);
            stderr.set(p, q, se);
            max_abs_deviation = max_abs_deviation.max(dev);
            max_z = max_z.max(if se > 0.0 { dev / se } else if dev == 0.0 { 0.0 } else { f64::INFINITY });
        }
    }
    Ok(AtaCheck {
        mean,
        stderr,
        target_diagonal,
        max_abs_deviation,
        max_z,
        trials,
    })
}

/// Module with the largest PAGE, optionally restricted to one kind. Ties go
/// to the lowest layer (then the earlier kind in canonical order).
pub fn select_dominant(pm: &PageMap, restrict_kind: Option<ProjKind>) -> Result<ModuleId> {
    let mut best: Option<(ModuleId, f64)> = None;
    for (&id, &v) in &pm.values {
        if restrict_kind.is_some_and(|k| k != id.kind) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    }
    best.map(|(id, _)| id).ok_or_else(|| {
        Error::InvalidArgument(match restrict_kind {
            Some(k) => format!("PAGE map has no {k} modules"),
            None => "PAGE map is empty".into(),
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub dominant: ModuleId,
    pub share_of_total: f64,
    pub share_among_down: f64,
}

/// Share of the dominant Down module's PAGE in the total and among Down
/// modules.
pub fn concentration_report(pm: &PageMap) -> Result<Concentration> {
    let total = pm.total();
    let down_total: f64 = pm
        .values
        .iter()
        .filter(|(id, _)| id.kind == ProjKind::Down)
        .map(|(_, v)| v)
        .sum();
    if !(total > 0.0 && down_total > 0.0) {
        return Err(Error::InvalidArgument("PAGE total is zero".into()));
    }
    let dominant = select_dominant(pm, Some(ProjKind::Down))?;
    let v = pm.values[&dominant];
    Ok(Concentration {
        dominant,
        share_of_total: v / total,
        share_among_down: v / down_total,
    })
}
