//! Multi-head self-attention over each anchor's neighbor tokens, with the
//! angular encoding of every key token fused into the attention logits as
//! a learned per-head additive bias.
//!
//! For anchor `i` with token stack `X` (`k x 2F`) and encoding `E` (`k x 2L`):
//!
//! ```text
//! T      = X · W_in                                  k x D
//! Q,K,V  = T_h · W_q[h], T_h · W_k[h], T_h · W_v[h]  per head slice of T
//! S      = Q Kᵀ / sqrt(D/H) + 1 · (E w_θ[h] + b_θ[h])ᵀ
//! O_h    = softmax_rows(S) · V
//! f_g[i] = mean_rows(concat_h(O_h) · W_o)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor3;

pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_MODEL_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite {tensor} value at {index:?}")]
    NonFinite { tensor: &'static str, index: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    /// Width of one aggregated token, `2F`.
    pub input_dim: usize,
    /// Width of one angular encoding, `2L`.
    pub encoding_dim: usize,
    pub seed: u64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let dims = [self.heads, self.model_dim, self.input_dim, self.encoding_dim];
        if dims.contains(&0) {
            return Err(AttentionError::InvalidConfig("all dimensions must be at least 1".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(AttentionError::InvalidConfig(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `2F x D`.
    pub w_in: DMatrix<f64>,
    /// Per head, `D/H x D/H`.
    pub w_q: Vec<DMatrix<f64>>,
    pub w_k: Vec<DMatrix<f64>>,
    pub w_v: Vec<DMatrix<f64>>,
    /// `D x D`.
    pub w_o: DMatrix<f64>,
    /// `H x 2L`; row `h` maps an angular encoding to head `h`'s logit bias.
    pub w_theta: DMatrix<f64>,
    pub b_theta: DVector<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> DMatrix<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    // Fill in row-major order so the stream layout is independent of storage.
    let mut m = DMatrix::zeros(fan_in, fan_out);
    for r in 0..fan_in {
        for c in 0..fan_out {
            m[(r, c)] = rng.random_range(-bound..=bound);
        }
    }
    m
}

impl AttentionParams {
    /// Seeded Xavier-uniform projections; the angular bias starts at zero.
    pub fn init(config: &AttentionConfig) -> Result<Self, AttentionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let dh = config.head_dim();
        let w_in = xavier(&mut rng, config.input_dim, d);
        let mut per_head = || (0..config.heads).map(|_| xavier(&mut rng, dh, dh)).collect::<Vec<_>>();
        let w_q = per_head();
        let w_k = per_head();
        let w_v = per_head();
        let w_o = xavier(&mut rng, d, d);
        Ok(Self {
            w_in,
            w_q,
            w_k,
            w_v,
            w_o,
            w_theta: DMatrix::zeros(config.heads, config.encoding_dim),
            b_theta: DVector::zeros(config.heads),
        })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn model_dim(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        Self {
            w_in: z(&self.w_in),
            w_q: self.w_q.iter().map(z).collect(),
            w_k: self.w_k.iter().map(z).collect(),
            w_v: self.w_v.iter().map(z).collect(),
            w_o: z(&self.w_o),
            w_theta: z(&self.w_theta),
            b_theta: DVector::zeros(self.b_theta.len()),
        }
    }

    /// Every parameter tensor as a named flat slice, in a fixed order.
    pub fn slices(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("w_in".to_string(), self.w_in.as_slice())];
        for (name, group) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            out.extend(group.iter().enumerate().map(|(h, m)| (format!("{name}[{h}]"), m.as_slice())));
        }
        out.push(("w_o".to_string(), self.w_o.as_slice()));
        out.push(("w_theta".to_string(), self.w_theta.as_slice()));
        out.push(("b_theta".to_string(), self.b_theta.as_slice()));
        out
    }

    /// Parameter tensor `t` in [`AttentionParams::slices`] order.
    pub fn tensor_mut(&mut self, t: usize) -> &mut [f64] {
        let h = self.heads();
        match t {
            0 => self.w_in.as_mut_slice(),
            t if t <= h => self.w_q[t - 1].as_mut_slice(),
            t if t <= 2 * h => self.w_k[t - 1 - h].as_mut_slice(),
            t if t <= 3 * h => self.w_v[t - 1 - 2 * h].as_mut_slice(),
            t if t == 3 * h + 1 => self.w_o.as_mut_slice(),
            t if t == 3 * h + 2 => self.w_theta.as_mut_slice(),
            t if t == 3 * h + 3 => self.b_theta.as_mut_slice(),
            _ => panic!("parameter tensor {t} out of range"),
        }
    }

    fn check_shapes(&self, agg: &Tensor3, enc: &Tensor3) -> Result<(), AttentionError> {
        let heads = self.heads();
        let d = self.model_dim();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(AttentionError::ShapeMismatch("model dim not divisible by head count".into()));
        }
        let dh = d / heads;
        let square = |m: &DMatrix<f64>, n: usize| m.nrows() == n && m.ncols() == n;
        let heads_ok = [&self.w_k, &self.w_v].iter().all(|g| g.len() == heads)
            && self.w_q.iter().chain(&self.w_k).chain(&self.w_v).all(|m| square(m, dh));
        if !heads_ok || !square(&self.w_o, d) || self.w_in.ncols() != d {
            return Err(AttentionError::ShapeMismatch("inconsistent projection shapes".into()));
        }
        if self.w_theta.nrows() != heads || self.b_theta.len() != heads {
            return Err(AttentionError::ShapeMismatch("angular bias needs one row per head".into()));
        }
        let [m, k, width] = agg.shape();
        if width != self.w_in.nrows() {
            return Err(AttentionError::ShapeMismatch(format!(
                "token width {width} does not match input projection rows {}",
                self.w_in.nrows()
            )));
        }
        let [em, ek, ewidth] = enc.shape();
        if (em, ek) != (m, k) || ewidth != self.w_theta.ncols() {
            return Err(AttentionError::ShapeMismatch(format!(
                "encoding shape {:?} does not match tokens {:?} with width {}",
                enc.shape(),
                agg.shape(),
                self.w_theta.ncols()
            )));
        }
        Ok(())
    }
}

struct HeadCache {
    tokens: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    weights: DMatrix<f64>,
}

struct AnchorCache {
    input: DMatrix<f64>,
    heads: Vec<HeadCache>,
    concat: DMatrix<f64>,
}

fn softmax_rows(scores: &mut DMatrix<f64>) {
    for mut row in scores.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn forward_anchor(i: usize, agg: &Tensor3, enc: &Tensor3, params: &AttentionParams) -> AnchorCache {
    let input = agg.slab(i);
    let encoding = enc.slab(i);
    let projected = &input * &params.w_in;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let tokens_n = input.nrows();
    let mut concat = DMatrix::zeros(tokens_n, params.model_dim());
    let mut heads = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let tokens = projected.columns(h * dh, dh).into_owned();
        let q = &tokens * &params.w_q[h];
        let k = &tokens * &params.w_k[h];
        let v = &tokens * &params.w_v[h];
        let bias = &encoding * params.w_theta.row(h).transpose();
        let mut weights = &q * k.transpose() * scale;
        for mut row in weights.row_iter_mut() {
            for (s, b) in row.iter_mut().zip(bias.iter()) {
                *s += b + params.b_theta[h];
            }
        }
        softmax_rows(&mut weights);
        concat.columns_mut(h * dh, dh).copy_from(&(&weights * &v));
        heads.push(HeadCache {
            tokens,
            q,
            k,
            v,
            weights,
        });
    }
    AnchorCache { input, heads, concat }
}

fn check_finite(agg: &Tensor3, enc: &Tensor3) -> Result<(), AttentionError> {
    if let Some((i, j, c)) = agg.first_non_finite() {
        return Err(AttentionError::NonFinite {
            tensor: "features",
            index: [i, j, c],
        });
    }
    if let Some((i, j, c)) = enc.first_non_finite() {
        return Err(AttentionError::NonFinite {
            tensor: "encoding",
            index: [i, j, c],
        });
    }
    Ok(())
}

/// Per-anchor refined features `f_g`, shape `M x D`.
pub fn attention_forward(agg: &Tensor3, enc: &Tensor3, params: &AttentionParams) -> Result<DMatrix<f64>, AttentionError> {
    params.check_shapes(agg, enc)?;
    check_finite(agg, enc)?;
    let [m, k, _] = agg.shape();
    let mut out = DMatrix::zeros(m, params.model_dim());
    for i in 0..m {
        let cache = forward_anchor(i, agg, enc, params);
        let mixed = &cache.concat * &params.w_o;
        out.row_mut(i).copy_from(&(mixed.row_sum() / k as f64));
    }
    Ok(out)
}

/// Attention weights of anchor `i`, one `k x k` row-stochastic matrix per head.
pub fn attention_weights(
    i: usize,
    agg: &Tensor3,
    enc: &Tensor3,
    params: &AttentionParams,
) -> Result<Vec<DMatrix<f64>>, AttentionError> {
    params.check_shapes(agg, enc)?;
    check_finite(agg, enc)?;
    if i >= agg.shape()[0] {
        return Err(AttentionError::ShapeMismatch(format!("anchor {i} out of range")));
    }
    Ok(forward_anchor(i, agg, enc, params).heads.into_iter().map(|h| h.weights).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradients {
    pub params: AttentionParams,
    /// Gradient with respect to the aggregated tokens, same shape as the input.
    pub inputs: Tensor3,
}

/// Gradients of `sum(upstream ⊙ f_g)` with respect to every parameter and
/// the aggregated input tokens.
pub fn attention_backward(
    agg: &Tensor3,
    enc: &Tensor3,
    params: &AttentionParams,
    upstream: &DMatrix<f64>,
) -> Result<AttentionGradients, AttentionError> {
    params.check_shapes(agg, enc)?;
    check_finite(agg, enc)?;
    let [m, k, _] = agg.shape();
    if upstream.shape() != (m, params.model_dim()) {
        return Err(AttentionError::ShapeMismatch(format!(
            "upstream is {:?}, expected ({m}, {})",
            upstream.shape(),
            params.model_dim()
        )));
    }
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = params.zeros_like();
    let mut d_inputs = Tensor3::zeros(agg.shape());

    for i in 0..m {
        let cache = forward_anchor(i, agg, enc, params);
        let encoding = enc.slab(i);
        let mut d_mixed = DMatrix::zeros(k, params.model_dim());
        let pooled = upstream.row(i) / k as f64;
        for mut row in d_mixed.row_iter_mut() {
            row.copy_from(&pooled);
        }
        grads.w_o += cache.concat.transpose() * &d_mixed;
        let d_concat = &d_mixed * params.w_o.transpose();
        let mut d_projected = DMatrix::zeros(k, params.model_dim());

        for (h, head) in cache.heads.iter().enumerate() {
            let d_out = d_concat.columns(h * dh, dh);
            let d_weights = d_out * head.v.transpose();
            let d_v = head.weights.transpose() * d_out;
            let mut d_scores = DMatrix::zeros(k, k);
            for r in 0..k {
                let dot: f64 = (0..k).map(|c| d_weights[(r, c)] * head.weights[(r, c)]).sum();
                for c in 0..k {
                    d_scores[(r, c)] = head.weights[(r, c)] * (d_weights[(r, c)] - dot);
                }
            }
            let d_bias = d_scores.row_sum();
            for (c, db) in d_bias.iter().enumerate() {
                grads.b_theta[h] += db;
                for e in 0..encoding.ncols() {
                    grads.w_theta[(h, e)] += db * encoding[(c, e)];
                }
            }
            let d_q = &d_scores * &head.k * scale;
            let d_k = d_scores.transpose() * &head.q * scale;
            let tokens_t = head.tokens.transpose();
            grads.w_q[h] += &tokens_t * &d_q;
            grads.w_k[h] += &tokens_t * &d_k;
            grads.w_v[h] += &tokens_t * &d_v;
            let d_tokens =
                d_q * params.w_q[h].transpose() + d_k * params.w_k[h].transpose() + d_v * params.w_v[h].transpose();
            d_projected.columns_mut(h * dh, dh).copy_from(&d_tokens);
        }
        grads.w_in += cache.input.transpose() * &d_projected;
        d_inputs.set_slab(i, &(d_projected * params.w_in.transpose()));
    }
    Ok(AttentionGradients {
        params: grads,
        inputs: d_inputs,
    })
}

/// Denominator floor for relative gradient errors; entries whose analytic and
/// numeric values are both below it are compared absolutely.
pub const GRADIENT_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Tensor name and flat offset of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

fn anchor_weighted_output(i: usize, agg: &Tensor3, enc: &Tensor3, params: &AttentionParams, upstream: &DMatrix<f64>) -> f64 {
    let cache = forward_anchor(i, agg, enc, params);
    let pooled = (&cache.concat * &params.w_o).row_sum() / agg.shape()[1] as f64;
    pooled.dot(&upstream.row(i))
}

fn weighted_output(agg: &Tensor3, enc: &Tensor3, params: &AttentionParams, upstream: &DMatrix<f64>) -> Result<f64, AttentionError> {
    Ok(attention_forward(agg, enc, params)?.component_mul(upstream).sum())
}

/// Compares [`attention_backward`] against central finite differences of the
/// forward pass for every parameter and input entry.
pub fn gradient_check(
    agg: &Tensor3,
    enc: &Tensor3,
    params: &AttentionParams,
    upstream: &DMatrix<f64>,
    step: f64,
) -> Result<GradientCheck, AttentionError> {
    let analytic = attention_backward(agg, enc, params, upstream)?;
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        worst: None,
        entries: 0,
    };
    let mut record = |name: &str, offset: usize, a: f64, n: f64| {
        let err = relative_error(a, n);
        report.entries += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((name.to_string(), offset));
        }
    };

    let mut probe = params.clone();
    let names: Vec<String> = params.slices().into_iter().map(|(n, _)| n).collect();
    let analytic_slices: Vec<Vec<f64>> = analytic.params.slices().into_iter().map(|(_, s)| s.to_vec()).collect();
    for (t, expected) in analytic_slices.iter().enumerate() {
        for (e, &a) in expected.iter().enumerate() {
            let original = probe.tensor_mut(t)[e];
            probe.tensor_mut(t)[e] = original + step;
            let plus = weighted_output(agg, enc, &probe, upstream)?;
            probe.tensor_mut(t)[e] = original - step;
            let minus = weighted_output(agg, enc, &probe, upstream)?;
            probe.tensor_mut(t)[e] = original;
            record(&names[t], e, a, (plus - minus) / (2.0 * step));
        }
    }

    // An input entry only reaches its own anchor's output row.
    let [m, k, width] = agg.shape();
    let mut tokens = agg.clone();
    for i in 0..m {
        for e in i * k * width..(i + 1) * k * width {
            let original = tokens.as_slice()[e];
            tokens.as_mut_slice()[e] = original + step;
            let plus = anchor_weighted_output(i, &tokens, enc, params, upstream);
            tokens.as_mut_slice()[e] = original - step;
            let minus = anchor_weighted_output(i, &tokens, enc, params, upstream);
            tokens.as_mut_slice()[e] = original;
            record("inputs", e, analytic.inputs.as_slice()[e], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
