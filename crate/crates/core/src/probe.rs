//! Response-masked probe loss, sample-wise projection gradients, and module
//! sensitivity `S_emp = (1/N) Σ_i ‖G_i‖²_F`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, GradientSet, ModelParams, ModuleId};
use crate::tensor::{frobenius_sq, Matrix};

/// Default probe-set size.
pub const DEFAULT_PROBE_SAMPLES: usize = 32;

/// A token sequence and the positions whose tokens are supervised.
///
/// Position `t` is predicted from the logits at `t − 1`, so position 0 can
/// never be supervised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub tokens: Vec<u32>,
    pub response_mask: Vec<bool>,
}

impl ProbeSample {
    pub fn new(tokens: Vec<u32>, response_mask: Vec<bool>) -> Result<Self> {
        let s = Self { tokens, response_mask };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.response_mask.len() {
            return Err(Error::InvalidSample(format!(
                "{} tokens but {} mask entries",
                self.tokens.len(),
                self.response_mask.len()
            )));
        }
        if self.response_mask.first() == Some(&true) {
            return Err(Error::InvalidSample("position 0 has no context and cannot be supervised".into()));
        }
        if self.response_count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }

    pub fn response_count(&self) -> usize {
        self.response_mask.iter().filter(|&&m| m).count()
    }

    pub fn response_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.response_mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| t)
    }
}

/// Mean cross-entropy over the supervised positions, and its gradient with
/// respect to the logits.
pub fn masked_cross_entropy(logits: &Matrix, sample: &ProbeSample) -> Result<(f64, Matrix)> {
    sample.validate()?;
    logits.ensure_shape(sample.tokens.len(), logits.cols(), "logits")?;
    let n = sample.response_count() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for t in sample.response_positions() {
        let row = logits.row(t - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_z = max + total.ln();
        let target = sample.tokens[t] as usize;
        loss += log_z - row[target];
        let g = grad.row_mut(t - 1);
        for (gv, &x) in g.iter_mut().zip(row) {
            *gv += (x - log_z).exp() / n;
        }
        g[target] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Probe loss of one sample.
pub fn probe_loss(params: &ModelParams, sample: &ProbeSample) -> Result<f64> {
    sample.validate()?;
    let (logits, _) = model::forward(params, &sample.tokens)?;
    Ok(masked_cross_entropy(&logits, sample)?.0)
}

/// Loss and full-model gradient of one sample.
pub fn loss_and_full_grad(params: &ModelParams, sample: &ProbeSample) -> Result<(f64, ModelParams)> {
    sample.validate()?;
    let (logits, cache) = model::forward(params, &sample.tokens)?;
    let (loss, dlogits) = masked_cross_entropy(&logits, sample)?;
    Ok((loss, model::backward(params, &cache, &dlogits)?))
}

/// Gradient of the probe loss w.r.t. every candidate projection, evaluated
/// at `params` as given. Callers probe the pretrained weights; adapters are
/// never merged in here.
pub fn sample_gradient(params: &ModelParams, sample: &ProbeSample) -> Result<GradientSet> {
    sample_gradient_for(params, sample, &params.config.modules())
}

pub fn sample_gradient_for(params: &ModelParams, sample: &ProbeSample, wanted: &[ModuleId]) -> Result<GradientSet> {
    sample.validate()?;
    let (logits, cache) = model::forward(params, &sample.tokens)?;
    let (_, dlogits) = masked_cross_entropy(&logits, sample)?;
    model::backward_projection_grads(params, &cache, &dlogits, wanted)
}

/// Sample gradients for a whole probe set, in probe-set order.
pub fn probe_gradients(params: &ModelParams, probe_set: &[ProbeSample]) -> Result<Vec<GradientSet>> {
    if probe_set.is_empty() {
        return Err(Error::EmptyProbeSet);
    }
    probe_set.par_iter().map(|s| sample_gradient(params, s)).collect()
}

/// Per-module empirical sensitivity over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub values: BTreeMap<ModuleId, f64>,
    pub n_samples: usize,
}

impl SensitivityMap {
    pub fn get(&self, id: ModuleId) -> Option<f64> {
        self.values.get(&id).copied()
    }
}

/// `S_emp` for every candidate module of `params` over `probe_set`.
pub fn module_sensitivity(params: &ModelParams, probe_set: &[ProbeSample]) -> Result<SensitivityMap> {
    sensitivity_from_gradients(&probe_gradients(params, probe_set)?)
}

/// `S_emp` from precomputed sample gradients. Sums run in sample order.
pub fn sensitivity_from_gradients(grads: &[GradientSet]) -> Result<SensitivityMap> {
    let first = grads.first().ok_or(Error::EmptyProbeSet)?;
    let n = grads.len() as f64;
    let mut values = BTreeMap::new();
    for id in first.modules() {
        let mut total = 0.0;
        for g in grads {
            total += frobenius_sq(g.require(id)?);
        }
        values.insert(id, total / n);
    }
    Ok(SensitivityMap {
        values,
        n_samples: grads.len(),
    })
}

/// Empirical Fisher block trace for `module`, built coordinate by coordinate
/// from the vectorized gradients, returned beside the sensitivity value.
pub fn fisher_trace_check(gradients: &[GradientSet], module: ModuleId) -> Result<(f64, f64)> {
    let first = gradients.first().ok_or(Error::EmptyProbeSet)?.require(module)?;
    let (rows, cols) = first.shape();
    let vecs = gradients
        .iter()
        .map(|g| {
            let m = g.require(module)?;
            m.ensure_shape(rows, cols, &module.to_string())?;
            Ok(m.vectorize())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = vecs.len() as f64;
    // diag((1/N) Σ v vᵀ)_j = (1/N) Σ_i v_ij²
    let trace: f64 = (0..rows * cols)
        .map(|j| vecs.iter().map(|v| v[j] * v[j]).sum::<f64>() / n)
        .sum();
    let sensitivity = gradients.iter().map(|g| frobenius_sq(g.require(module).unwrap())).sum::<f64>() / n;
    Ok((trace, sensitivity))
}

/// Reads a probe set: one JSON object per line with `tokens` and
/// `response_mask` arrays. Blank lines are skipped.
pub fn read_probe_set(r: impl BufRead) -> Result<Vec<ProbeSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: ProbeSample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("probe set line {}: {e}", i + 1)))?;
        sample
            .validate()
            .map_err(|e| Error::Format(format!("probe set line {}: {e}", i + 1)))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_probe_set(w: &mut impl Write, samples: &[ProbeSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
