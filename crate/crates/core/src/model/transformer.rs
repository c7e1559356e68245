#![allow(clippy::needless_range_loop)]
use super::{GradientSet, LayerParams, ModelConfig, ModelParams, ModuleId, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

struct LayerCache {
    x_in: Matrix,
    inv_rms_attn: Vec<f64>,
    normed_attn: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities per head, `T × T`, zero above the diagonal.
    probs: Vec<Matrix>,
    attn: Matrix,
    x_mid: Matrix,
    inv_rms_ffn: Vec<f64>,
    normed_ffn: Matrix,
    up: Matrix,
    gate: Matrix,
    hidden: Matrix,
}

/// Activations recorded by [`forward`], sufficient for an exact backward pass.
pub struct ForwardCache {
    config: ModelConfig,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Matrix,
    inv_rms_final: Vec<f64>,
    normed_final: Matrix,
}

impl ForwardCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }
}

fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let row = x.row(t);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (mean_sq + NORM_EPS).sqrt();
        inv.push(r);
        for ((o, &v), &g) in out.row_mut(t).iter_mut().zip(row).zip(gain.data()) {
            *o = v * r * g;
        }
    }
    (out, inv)
}

/// Returns `dx`; accumulates into `dgain`.
fn rms_norm_backward(dy: &Matrix, x: &Matrix, gain: &Matrix, inv: &[f64], dgain: &mut Matrix) -> Matrix {
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let (xr, dyr, r) = (x.row(t), dy.row(t), inv[t]);
        let mut proj = 0.0;
        for j in 0..d {
            let gdy = gain.data()[j] * dyr[j];
            proj += gdy * xr[j];
            dgain.data_mut()[j] += dyr[j] * xr[j] * r;
        }
        let coef = r * r * r * proj / d as f64;
        for (j, o) in dx.row_mut(t).iter_mut().enumerate() {
            *o = r * gain.data()[j] * dyr[j] - xr[j] * coef;
        }
    }
    dx
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some((position, &token)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= config.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            token,
            position,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

fn attention_forward(cfg: &ModelConfig, q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Vec<Matrix>) {
    let t_len = q.rows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Matrix::zeros(t_len, cfg.d_model);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(t_len, t_len);
        for t in 0..t_len {
            let qt = &q.row(t)[cols.clone()];
            let row = p.row_mut(t);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=t {
                let s = crate::tensor::dot(qt, &k.row(j)[cols.clone()]) * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for x in &mut row[..=t] {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in &mut row[..=t] {
                *x /= total;
            }
            let o = &mut out.row_mut(t)[cols.clone()];
            for j in 0..=t {
                let pj = p.get(t, j);
                for (oc, &vc) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *oc += pj * vc;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
fn attention_backward(
    cfg: &ModelConfig,
    d_out: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
) -> (Matrix, Matrix, Matrix) {
    let t_len = q.rows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(t_len, cfg.d_model);
    let mut dk = Matrix::zeros(t_len, cfg.d_model);
    let mut dv = Matrix::zeros(t_len, cfg.d_model);
    let mut dp = vec![0.0; t_len];
    for (h, p) in probs.iter().enumerate() {
        let c0 = h * hd;
        for t in 0..t_len {
            let dot_row = &d_out.row(t)[c0..c0 + hd];
            let mut weighted = 0.0;
            for j in 0..=t {
                let pj = p.get(t, j);
                dp[j] = crate::tensor::dot(dot_row, &v.row(j)[c0..c0 + hd]);
                weighted += pj * dp[j];
                for (dvc, &g) in dv.row_mut(j)[c0..c0 + hd].iter_mut().zip(dot_row) {
                    *dvc += pj * g;
                }
            }
            for j in 0..=t {
                let ds = p.get(t, j) * (dp[j] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in c0..c0 + hd {
                    let dqv = ds * k.get(j, c);
                    let dkv = ds * q.get(t, c);
                    dq.row_mut(t)[c] += dqv;
                    dk.row_mut(j)[c] += dkv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Runs the model over `tokens`, returning `seq_len × vocab_size` logits and
/// the activation cache.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<(Matrix, ForwardCache)> {
    let cfg = params.config;
    check_tokens(&cfg, tokens)?;
    let t_len = tokens.len();

    let mut x = Matrix::zeros(t_len, cfg.d_model);
    for (t, &tok) in tokens.iter().enumerate() {
        let emb = params.tok_emb.row(tok as usize);
        let pos = params.pos_emb.row(t);
        for ((o, &e), &p) in x.row_mut(t).iter_mut().zip(emb).zip(pos) {
            *o = e + p;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (normed_attn, inv_rms_attn) = rms_norm(&x, &lp.attn_norm);
        let q = normed_attn.matmul_t(&lp.q);
        let k = normed_attn.matmul_t(&lp.k);
        let v = normed_attn.matmul_t(&lp.v);
        let (attn, probs) = attention_forward(&cfg, &q, &k, &v);
        let x_mid = x.add(&attn.matmul_t(&lp.o));

        let (normed_ffn, inv_rms_ffn) = rms_norm(&x_mid, &lp.ffn_norm);
        let up = normed_ffn.matmul_t(&lp.up);
        let gate = normed_ffn.matmul_t(&lp.gate);
        let hidden = Matrix::from_fn(t_len, cfg.d_ff, |r, c| silu(gate.get(r, c)) * up.get(r, c));
        let x_out = x_mid.add(&hidden.matmul_t(&lp.down));

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            inv_rms_attn,
            normed_attn,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            inv_rms_ffn,
            normed_ffn,
            up,
            gate,
            hidden,
        });
    }

    let (normed_final, inv_rms_final) = rms_norm(&x, &params.final_norm);
    let logits = normed_final.matmul_t(&params.unembed);
    let cache = ForwardCache {
        config: cfg,
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        inv_rms_final,
        normed_final,
    };
    Ok((logits, cache))
}

fn layer_backward(
    cfg: &ModelConfig,
    lp: &LayerParams,
    lc: &LayerCache,
    dx_out: Matrix,
    grads: &mut LayerParams,
) -> Matrix {
    // FFN sublayer: x_out = x_mid + (silu(gate) ⊙ up) Downᵀ
    let d_ffn = &dx_out;
    grads.down.axpy(1.0, &d_ffn.t_matmul(&lc.hidden));
    let d_hidden = d_ffn.matmul(&lp.down);
    let t_len = d_hidden.rows();
    let d_up = Matrix::from_fn(t_len, cfg.d_ff, |r, c| d_hidden.get(r, c) * silu(lc.gate.get(r, c)));
    let d_gate = Matrix::from_fn(t_len, cfg.d_ff, |r, c| {
        d_hidden.get(r, c) * lc.up.get(r, c) * silu_grad(lc.gate.get(r, c))
    });
    grads.up.axpy(1.0, &d_up.t_matmul(&lc.normed_ffn));
    grads.gate.axpy(1.0, &d_gate.t_matmul(&lc.normed_ffn));
    let mut d_normed = d_up.matmul(&lp.up);
    d_normed.axpy(1.0, &d_gate.matmul(&lp.gate));
    let mut dx_mid = rms_norm_backward(&d_normed, &lc.x_mid, &lp.ffn_norm, &lc.inv_rms_ffn, &mut grads.ffn_norm);
    dx_mid.axpy(1.0, &dx_out);

    // Attention sublayer: x_mid = x_in + attn Oᵀ
    grads.o.axpy(1.0, &dx_mid.t_matmul(&lc.attn));
    let d_attn = dx_mid.matmul(&lp.o);
    let (dq, dk, dv) = attention_backward(cfg, &d_attn, &lc.q, &lc.k, &lc.v, &lc.probs);
    grads.q.axpy(1.0, &dq.t_matmul(&lc.normed_attn));
    grads.k.axpy(1.0, &dk.t_matmul(&lc.normed_attn));
    grads.v.axpy(1.0, &dv.t_matmul(&lc.normed_attn));
    let mut d_normed = dq.matmul(&lp.q);
    d_normed.axpy(1.0, &dk.matmul(&lp.k));
    d_normed.axpy(1.0, &dv.matmul(&lp.v));
    let mut dx_in = rms_norm_backward(&d_normed, &lc.x_in, &lp.attn_norm, &lc.inv_rms_attn, &mut grads.attn_norm);
    dx_in.axpy(1.0, &dx_mid);
    dx_in
}

/// Full backward pass: gradient of the scalar loss whose logit gradient is
/// `loss_grad` with respect to every parameter tensor.
pub fn backward(params: &ModelParams, cache: &ForwardCache, loss_grad: &Matrix) -> Result<ModelParams> {
    let cfg = params.config;
    if cache.config != cfg {
        return Err(Error::CacheMismatch("model config differs".into()));
    }
    if cache.layers.len() != params.layers.len() {
        return Err(Error::CacheMismatch("layer count differs".into()));
    }
    loss_grad.ensure_shape(cache.seq_len(), cfg.vocab_size, "loss gradient")?;

    let mut grads = ModelParams::zeros(cfg)?;
    grads.unembed = loss_grad.t_matmul(&cache.normed_final);
    let d_normed = loss_grad.matmul(&params.unembed);
    let mut dx = rms_norm_backward(
        &d_normed,
        &cache.x_final,
        &params.final_norm,
        &cache.inv_rms_final,
        &mut grads.final_norm,
    );

    for (l, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        dx = layer_backward(&cfg, lp, lc, dx, &mut grads.layers[l]);
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = dx.row(t);
        for (g, &d) in grads.tok_emb.row_mut(tok as usize).iter_mut().zip(row) {
            *g += d;
        }
        for (g, &d) in grads.pos_emb.row_mut(t).iter_mut().zip(row) {
            *g += d;
        }
    }
    Ok(grads)
}

/// Projection-weight gradients for the `wanted` modules only.
pub fn backward_projection_grads(
    params: &ModelParams,
    cache: &ForwardCache,
    loss_grad: &Matrix,
    wanted: &[ModuleId],
) -> Result<GradientSet> {
    for id in wanted {
        if !params.config.contains(*id) {
            return Err(Error::MissingModule(id.to_string()));
        }
    }
    let full = backward(params, cache, loss_grad)?;
    wanted
        .iter()
        .map(|&id| Ok((id, full.projection(id)?.clone())))
        .collect()
}
