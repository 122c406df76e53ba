//! Contextual layers: maps `(C, x) ↦ A(C, x)` that can also run on the query alone.
//!
//! Only the output at the query (last) position is produced. Two kinds exist:
//! multi-head softmax self-attention, and an exponential moving average over the
//! token sequence standing in for a recurrent layer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_slice, Matrix, Vector};

const RMS_EPS: f64 = 1e-8;

/// Context tokens followed by a query token, all of dimension `token_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMatrix {
    context: Vec<Vector>,
    query: Vector,
}

impl PromptMatrix {
    pub fn new(context: Vec<Vector>, query: Vector) -> Result<Self> {
        if let Some(bad) = context.iter().find(|c| c.dim() != query.dim()) {
            return Err(Error::shape("PromptMatrix::new", bad.dim(), query.dim()));
        }
        Ok(PromptMatrix { context, query })
    }

    /// Prompt with no context: the input of `A(x)`.
    pub fn query_only(query: Vector) -> Self {
        PromptMatrix {
            context: Vec::new(),
            query,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.query.dim()
    }

    pub fn context(&self) -> &[Vector] {
        &self.context
    }

    pub fn query(&self) -> &Vector {
        &self.query
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    /// All positions in order: context tokens, then the query.
    pub fn tokens(&self) -> impl Iterator<Item = &Vector> {
        self.context.iter().chain(std::iter::once(&self.query))
    }

    /// `C \ Y`: drops the 0-based context positions in `removed`, keeping the
    /// survivors in their original order.
    pub fn without(&self, removed: &[usize]) -> Result<PromptMatrix> {
        let removed = self.index_set(removed)?;
        let context = self
            .context
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, c)| c.clone())
            .collect();
        Ok(PromptMatrix {
            context,
            query: self.query.clone(),
        })
    }

    /// Prompt keeping only the first `len` context tokens.
    pub fn prefix(&self, len: usize) -> PromptMatrix {
        PromptMatrix {
            context: self.context[..len.min(self.context.len())].to_vec(),
            query: self.query.clone(),
        }
    }

    /// Prompt keeping context tokens from 0-based position `start` onwards.
    pub fn suffix(&self, start: usize) -> PromptMatrix {
        PromptMatrix {
            context: self.context[start.min(self.context.len())..].to_vec(),
            query: self.query.clone(),
        }
    }

    pub fn with_query(&self, query: Vector) -> Result<PromptMatrix> {
        PromptMatrix::new(self.context.clone(), query)
    }

    fn index_set(&self, removed: &[usize]) -> Result<BTreeSet<usize>> {
        let len = self.context.len();
        removed
            .iter()
            .map(|&index| {
                if index < len {
                    Ok(index)
                } else {
                    Err(Error::IndexOutOfRange { index, len })
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub n_heads: usize,
    /// Adds the raw query token to the attention output.
    pub use_residual: bool,
    /// RMS-normalises tokens before the query/key/value projections.
    #[serde(default)]
    pub pre_norm: bool,
}

impl AttentionParams {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix, n_heads: usize) -> Result<Self> {
        let p = AttentionParams {
            wq,
            wk,
            wv,
            wo,
            n_heads,
            use_residual: true,
            pre_norm: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn token_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.wq.rows();
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if m.shape() != (d, d) {
                return Err(Error::shape("AttentionParams", format!("{name} {}", m.shape_str()), format!("{d}x{d}")));
            }
        }
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads {} does not divide token_dim {d}",
                self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaParams {
    /// Decay in (0, 1).
    pub gamma: f64,
    pub use_residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextualLayer {
    SoftmaxAttention(AttentionParams),
    EmaRecurrent(EmaParams),
}

impl ContextualLayer {
    /// Token dimension the layer expects, when the layer pins one.
    pub fn token_dim(&self) -> Option<usize> {
        match self {
            ContextualLayer::SoftmaxAttention(p) => Some(p.token_dim()),
            ContextualLayer::EmaRecurrent(_) => None,
        }
    }

    pub fn attend(&self, prompt: &PromptMatrix) -> Result<Vector> {
        attend(self, prompt)
    }
}

/// Output of the contextual layer at the query position.
pub fn attend(layer: &ContextualLayer, prompt: &PromptMatrix) -> Result<Vector> {
    match layer {
        ContextualLayer::SoftmaxAttention(p) => Ok(attention_forward(p, prompt)?.output),
        ContextualLayer::EmaRecurrent(p) => ema_forward(p, prompt),
    }
}

/// `ΔA(Y) = A(C, x) − A(C \ Y, x)` for 0-based context positions `removed`.
pub fn context_vector(layer: &ContextualLayer, prompt: &PromptMatrix, removed: &[usize]) -> Result<Vector> {
    let reduced = prompt.without(removed)?;
    attend(layer, prompt)?.sub(&attend(layer, &reduced)?)
}

fn ema_forward(p: &EmaParams, prompt: &PromptMatrix) -> Result<Vector> {
    if !(p.gamma > 0.0 && p.gamma < 1.0) {
        return Err(Error::Config(format!("ema gamma {} outside (0, 1)", p.gamma)));
    }
    let dim = prompt.token_dim();
    let mut state = vec![0.0; dim];
    for token in prompt.tokens() {
        for (s, t) in state.iter_mut().zip(token.iter()) {
            *s = p.gamma * *s + (1.0 - p.gamma) * t;
        }
    }
    if p.use_residual {
        for (s, x) in state.iter_mut().zip(prompt.query().iter()) {
            *s += x;
        }
    }
    Ok(Vector::new(state))
}

/// Intermediate values of one attention forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    /// Possibly normalised tokens fed to the projections, query last.
    pub inputs: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Attention weights, one row per head over all positions.
    pub weights: Vec<Vec<f64>>,
    /// Concatenated head outputs before `wo`.
    pub heads: Vec<f64>,
    pub output: Vector,
}

fn rms_normalise(t: &[f64]) -> Vec<f64> {
    let ms = dot(t, t) / t.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    t.iter().map(|v| v * inv).collect()
}

pub(crate) fn attention_forward(p: &AttentionParams, prompt: &PromptMatrix) -> Result<AttentionCache> {
    let dim = p.token_dim();
    if prompt.token_dim() != dim {
        return Err(Error::shape("attend", format!("layer token_dim {dim}"), format!("prompt token_dim {}", prompt.token_dim())));
    }
    p.validate()?;
    let inputs: Vec<Vec<f64>> = prompt
        .tokens()
        .map(|t| {
            if p.pre_norm {
                rms_normalise(t.as_slice())
            } else {
                t.as_slice().to_vec()
            }
        })
        .collect();
    let project = |m: &Matrix, t: &[f64]| -> Vec<f64> { (0..dim).map(|i| dot(m.row_slice(i), t)).collect() };
    let q = project(&p.wq, inputs.last().expect("query position"));
    let keys: Vec<Vec<f64>> = inputs.iter().map(|t| project(&p.wk, t)).collect();
    let values: Vec<Vec<f64>> = inputs.iter().map(|t| project(&p.wv, t)).collect();

    let hd = p.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut weights = Vec::with_capacity(p.n_heads);
    let mut heads = vec![0.0; dim];
    for h in 0..p.n_heads {
        let r = h * hd..(h + 1) * hd;
        let logits: Vec<f64> = keys.iter().map(|k| dot(&q[r.clone()], &k[r.clone()]) * inv_sqrt).collect();
        let alpha = softmax_slice(&logits);
        for (a, v) in alpha.iter().zip(&values) {
            for (o, vj) in heads[r.clone()].iter_mut().zip(&v[r.clone()]) {
                *o += a * vj;
            }
        }
        weights.push(alpha);
    }
    let mut output: Vec<f64> = (0..dim).map(|i| dot(p.wo.row_slice(i), &heads)).collect();
    if p.use_residual {
        for (o, x) in output.iter_mut().zip(prompt.query().iter()) {
            *o += x;
        }
    }
    Ok(AttentionCache {
        inputs,
        q,
        keys,
        values,
        weights,
        heads,
        output: Vector::new(output),
    })
}

/// Parameter gradients of an attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionGrads {
    pub fn zeros(dim: usize) -> Self {
        AttentionGrads {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
        }
    }
}

/// Accumulates into `grads` the parameter gradients given `d_out = ∂L/∂A`.
///
/// The residual path carries no parameters, so it contributes nothing here.
pub(crate) fn attention_backward(p: &AttentionParams, cache: &AttentionCache, d_out: &[f64], grads: &mut AttentionGrads) {
    let dim = p.token_dim();
    let hd = p.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    grads.wo.add_outer(d_out, &cache.heads, 1.0);
    let d_heads = p.wo.tr_matvec(&Vector::new(d_out.to_vec())).expect("wo shape");

    let mut d_q = vec![0.0; dim];
    let n = cache.inputs.len();
    let mut d_keys = vec![vec![0.0; dim]; n];
    let mut d_values = vec![vec![0.0; dim]; n];
    for h in 0..p.n_heads {
        let r = h * hd..(h + 1) * hd;
        let alpha = &cache.weights[h];
        let dh = &d_heads.as_slice()[r.clone()];
        let d_alpha: Vec<f64> = cache.values.iter().map(|v| dot(dh, &v[r.clone()])).collect();
        let mean = dot(alpha, &d_alpha);
        for j in 0..n {
            for (dv, g) in d_values[j][r.clone()].iter_mut().zip(dh) {
                *dv += alpha[j] * g;
            }
            let d_logit = alpha[j] * (d_alpha[j] - mean) * inv_sqrt;
            for (k, (dqk, kk)) in d_q[r.clone()].iter_mut().zip(&cache.keys[j][r.clone()]).enumerate() {
                *dqk += d_logit * kk;
                d_keys[j][r.start + k] += d_logit * cache.q[r.start + k];
            }
        }
    }
    grads.wq.add_outer(&d_q, &cache.inputs[n - 1], 1.0);
    for j in 0..n {
        grads.wk.add_outer(&d_keys[j], &cache.inputs[j], 1.0);
        grads.wv.add_outer(&d_values[j], &cache.inputs[j], 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_gaussian, Rng};

    fn random_attention(rng: &mut Rng, dim: usize, heads: usize) -> AttentionParams {
        let mut m = || sample_gaussian(rng, dim, dim).scale(0.7);
        AttentionParams::new(m(), m(), m(), m(), heads).unwrap()
    }

    fn random_prompt(rng: &mut Rng, dim: usize, n: usize) -> PromptMatrix {
        let context = (0..n).map(|_| rng.normal_vector(dim)).collect();
        PromptMatrix::new(context, rng.normal_vector(dim)).unwrap()
    }

    /// Full `(n+1) × (n+1)` attention, read at the last row.
    fn full_attention_oracle(p: &AttentionParams, prompt: &PromptMatrix) -> Vec<f64> {
        let dim = p.token_dim();
        let hd = p.head_dim();
        let toks: Vec<&Vector> = prompt.tokens().collect();
        let n = toks.len();
        let q: Vec<Vector> = toks.iter().map(|t| p.wq.matvec(t).unwrap()).collect();
        let k: Vec<Vector> = toks.iter().map(|t| p.wk.matvec(t).unwrap()).collect();
        let v: Vec<Vector> = toks.iter().map(|t| p.wv.matvec(t).unwrap()).collect();
        let mut rows = vec![vec![0.0; dim]; n];
        for h in 0..p.n_heads {
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                scores.iter_mut().for_each(|s| *s = (*s - m).exp());
                let z: f64 = scores.iter().sum();
                for j in 0..n {
                    for c in 0..hd {
                        rows[i][h * hd + c] += scores[j] / z * v[j][h * hd + c];
                    }
                }
            }
        }
        let last = p.wo.matvec(&Vector::new(rows[n - 1].clone())).unwrap();
        last.add(prompt.query()).unwrap().into_inner()
    }

    #[test]
    fn empty_context_attends_to_itself() {
        let mut rng = Rng::new(1);
        let p = random_attention(&mut rng, 3, 1);
        let x = rng.normal_vector(3);
        let out = attend(&ContextualLayer::SoftmaxAttention(p.clone()), &PromptMatrix::query_only(x.clone())).unwrap();
        let want = p.wo.matvec(&p.wv.matvec(&x).unwrap()).unwrap().add(&x).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn zero_logits_average_uniformly() {
        let z = Matrix::zeros(3, 3);
        let mut p = AttentionParams::new(z.clone(), z, Matrix::identity(3), Matrix::identity(3), 1).unwrap();
        p.use_residual = false;
        let c = Vector::new(vec![1.0, 2.0, 3.0]);
        let x = Vector::new(vec![-1.0, 0.5, 4.0]);
        let out = attend(&ContextualLayer::SoftmaxAttention(p), &PromptMatrix::new(vec![c.clone()], x.clone()).unwrap()).unwrap();
        let mean = c.add(&x).unwrap().scale(0.5);
        assert!(out.max_abs_diff(&mean).unwrap() < 1e-15);
    }

    #[test]
    fn matches_full_attention_oracle() {
        let mut rng = Rng::new(3);
        for heads in [1, 3] {
            let p = random_attention(&mut rng, 3, heads);
            let prompt = random_prompt(&mut rng, 3, 5);
            let out = attend(&ContextualLayer::SoftmaxAttention(p.clone()), &prompt).unwrap();
            let want = full_attention_oracle(&p, &prompt);
            assert!(out.max_abs_diff(&Vector::new(want)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_token_dim() {
        let z = Matrix::zeros(3, 3);
        assert!(matches!(
            AttentionParams::new(z.clone(), z.clone(), z.clone(), z, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = Rng::new(4);
        let layer = ContextualLayer::SoftmaxAttention(random_attention(&mut rng, 3, 1));
        let prompt = random_prompt(&mut rng, 4, 2);
        assert!(matches!(attend(&layer, &prompt), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn context_vector_edge_cases() {
        let mut rng = Rng::new(5);
        let layer = ContextualLayer::SoftmaxAttention(random_attention(&mut rng, 3, 1));
        let prompt = random_prompt(&mut rng, 3, 4);
        assert_eq!(context_vector(&layer, &prompt, &[]).unwrap(), Vector::zeros(3));

        let full = context_vector(&layer, &prompt, &[0, 1, 2, 3]).unwrap();
        let want = attend(&layer, &prompt)
            .unwrap()
            .sub(&attend(&layer, &PromptMatrix::query_only(prompt.query().clone())).unwrap())
            .unwrap();
        assert_eq!(full, want);

        assert!(matches!(
            context_vector(&layer, &prompt, &[4]),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn ema_duplicate_token_closed_form() {
        let gamma = 0.6;
        let layer = ContextualLayer::EmaRecurrent(EmaParams { gamma, use_residual: false });
        let c = Vector::new(vec![1.0, -2.0, 0.5]);
        let x = Vector::new(vec![0.3, 0.0, 2.0]);
        let prompt = PromptMatrix::new(vec![c.clone(), c.clone()], x).unwrap();
        let got = context_vector(&layer, &prompt, &[0]).unwrap();
        // Full: (1−γ)(γ²c + γc + x); reduced: (1−γ)(γc + x).
        let want = c.scale((1.0 - gamma) * gamma * gamma);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn removal_plus_context_vector_is_exact() {
        let mut rng = Rng::new(6);
        let layer = ContextualLayer::SoftmaxAttention(random_attention(&mut rng, 3, 3));
        let prompt = random_prompt(&mut rng, 3, 7);
        let removed = [1, 4, 5];
        let reduced = attend(&layer, &prompt.without(&removed).unwrap()).unwrap();
        let delta = context_vector(&layer, &prompt, &removed).unwrap();
        let full = attend(&layer, &prompt).unwrap();
        // (a − b) + b need not round back to a, so compare at one ulp scale.
        let gap = reduced.add(&delta).unwrap().max_abs_diff(&full).unwrap();
        assert!(gap <= 4.0 * f64::EPSILON * full.iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }

    #[test]
    fn permuting_context_leaves_output_unchanged() {
        let mut rng = Rng::new(7);
        let layer = ContextualLayer::SoftmaxAttention(random_attention(&mut rng, 3, 1));
        let prompt = random_prompt(&mut rng, 3, 6);
        let mut ctx = prompt.context().to_vec();
        ctx.reverse();
        ctx.swap(0, 3);
        let permuted = PromptMatrix::new(ctx, prompt.query().clone()).unwrap();
        let a = attend(&layer, &prompt).unwrap();
        let b = attend(&layer, &permuted).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-13);
    }

    #[test]
    fn attend_is_pure() {
        let mut rng = Rng::new(8);
        let layer = ContextualLayer::SoftmaxAttention(random_attention(&mut rng, 3, 1));
        let prompt = random_prompt(&mut rng, 3, 6);
        let again = prompt.clone();
        assert_eq!(attend(&layer, &prompt).unwrap(), attend(&layer, &again).unwrap());
    }
}
