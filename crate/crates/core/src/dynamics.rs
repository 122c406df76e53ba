//! Implicit learning dynamics obtained by feeding the context to the weights
//! one token at a time.
//!
//! *Prefix* dynamics: `W_i = W₀ + ΔW₀(c₁..c_i)`, always based at `A(x)`. Each step
//! is a gradient step of size `h = 1/‖A(x)‖²` on the loss `trace(Δ_iᵀ W)`.
//!
//! *Suffix* dynamics: token `c_i` is moved into the weights while the tokens after
//! it stay in the prompt, giving `W_i = W_{i−1}(I + h_i A_i)` with an adaptive
//! rate `h_i` and a product formula for `W_n`.

use crate::contextual_block::BlockParams;
use crate::contextual_layer::{attend, PromptMatrix};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm_sq, matmul, outer, Matrix, Vector};
use crate::weight_transfer::{delta_w, SINGULAR_BASE_EPS};

#[derive(Clone, Debug)]
pub struct DynamicsTrace {
    /// `W₀ … W_n`.
    pub weights: Vec<Matrix>,
    /// `Δ_i = W₀ (A(c₁..c_i, x) − A(c₁..c_{i+1}, x)) A(x)ᵀ` for `i = 0..n−1`;
    /// `W_{i+1} = W_i − h Δ_i`.
    pub deltas: Vec<Matrix>,
    /// `h = 1/‖A(x)‖²`.
    pub step_size: f64,
    /// `‖(ΔW)_{i+1} − (ΔW)_i‖_F` for `i = 1..n−1`.
    pub grad_norms: Vec<f64>,
    /// `trace(Δ_iᵀ W_i)`: each step's loss before the step.
    pub losses_pre: Vec<f64>,
    /// `trace(Δ_iᵀ W_{i+1})`: each step's loss after the step.
    pub losses_post: Vec<f64>,
    /// Last-layer bias offsets `A(c₁..c_i, x) − A(x)` for `i = 0..n`, skip blocks only.
    pub bias_updates: Option<Vec<Vector>>,
    /// `‖T_{W_n}(x) − T_{W₀}(C, x)‖_max`.
    pub endpoint_gap: f64,
}

impl DynamicsTrace {
    pub fn context_len(&self) -> usize {
        self.weights.len() - 1
    }

    /// Block carrying the step-`i` weights (and bias offset, for skip blocks).
    pub fn block_at(&self, block: &BlockParams, i: usize) -> Result<BlockParams> {
        let mut out = block.clone();
        out.mlp.w = self.weights[i].clone();
        if let Some(b) = &self.bias_updates {
            out.mlp.b2 = block.mlp.b2.add(&b[i])?;
        }
        Ok(out)
    }
}

/// `trace(Δᵀ W)`, the per-step loss of the gradient-step realisation.
pub fn trace_loss(delta: &Matrix, w: &Matrix) -> Result<f64> {
    if delta.shape() != w.shape() {
        return Err(Error::shape("trace_loss", delta.shape_str(), w.shape_str()));
    }
    Ok(delta.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum())
}

/// Gradient of `W ↦ trace(Δᵀ W)`, which is `Δ` itself.
pub fn trace_loss_grad(delta: &Matrix) -> Matrix {
    delta.clone()
}

fn query_base(block: &BlockParams, prompt: &PromptMatrix) -> Result<Vector> {
    let a_x = attend(&block.layer, &PromptMatrix::query_only(prompt.query().clone()))?;
    let norm_sq = l2_norm_sq(&a_x);
    if norm_sq <= SINGULAR_BASE_EPS {
        return Err(Error::SingularBase { norm_sq });
    }
    Ok(a_x)
}

pub fn prefix_dynamics(block: &BlockParams, prompt: &PromptMatrix) -> Result<DynamicsTrace> {
    let n = prompt.context_len();
    if n == 0 {
        return Err(Error::Config("prefix dynamics needs at least one context token".into()));
    }
    let w0 = &block.mlp.w;
    let a_x = query_base(block, prompt)?;
    let step_size = 1.0 / l2_norm_sq(&a_x);

    // A(c₁..c_i, x) for i = 0..n; i = 0 is A(x).
    let mut outputs = Vec::with_capacity(n + 1);
    outputs.push(a_x.clone());
    for i in 1..=n {
        outputs.push(attend(&block.layer, &prompt.prefix(i))?);
    }

    let context_vecs: Vec<Vector> = outputs.iter().map(|a| a.sub(&a_x)).collect::<Result<_>>()?;
    let updates: Vec<Matrix> = context_vecs.iter().map(|da| delta_w(w0, da, &a_x)).collect::<Result<_>>()?;
    let weights: Vec<Matrix> = updates.iter().map(|u| w0.add(u)).collect::<Result<_>>()?;

    let mut deltas = Vec::with_capacity(n);
    let mut losses_pre = Vec::with_capacity(n);
    let mut losses_post = Vec::with_capacity(n);
    for i in 0..n {
        let step = outputs[i].sub(&outputs[i + 1])?;
        let delta = outer(&w0.matvec(&step)?, &a_x);
        losses_pre.push(trace_loss(&delta, &weights[i])?);
        losses_post.push(trace_loss(&delta, &weights[i + 1])?);
        deltas.push(delta);
    }
    let grad_norms = (1..n)
        .map(|i| Ok(updates[i + 1].sub(&updates[i])?.frobenius()))
        .collect::<Result<Vec<f64>>>()?;

    let mut trace = DynamicsTrace {
        weights,
        deltas,
        step_size,
        grad_norms,
        losses_pre,
        losses_post,
        bias_updates: block.mlp_skip.then_some(context_vecs),
        endpoint_gap: 0.0,
    };
    let end = trace.block_at(block, n)?;
    let moved = end.forward(&PromptMatrix::query_only(prompt.query().clone()))?;
    trace.endpoint_gap = moved.max_abs_diff(&block.forward(prompt)?)?;
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct SgdRealization {
    pub prefix: DynamicsTrace,
    /// Weights produced by iterating `W_{i+1} = W_i − h Δ_i` from `W₀`.
    pub sgd_weights: Vec<Matrix>,
    /// `max_i ‖W_{i+1} − (W_i − h Δ_i)‖_max` over the prefix weights.
    pub identity_gap: f64,
    /// `max_i ‖W_i^{sgd} − W_i‖_max`; includes accumulated rounding.
    pub recursion_gap: f64,
}

pub fn sgd_realization(block: &BlockParams, prompt: &PromptMatrix) -> Result<SgdRealization> {
    let prefix = prefix_dynamics(block, prompt)?;
    let h = prefix.step_size;
    let mut identity_gap = 0.0f64;
    let mut sgd_weights = vec![prefix.weights[0].clone()];
    for (i, delta) in prefix.deltas.iter().enumerate() {
        let stepped = prefix.weights[i].sub(&trace_loss_grad(delta).scale(h))?;
        identity_gap = identity_gap.max(prefix.weights[i + 1].max_abs_diff(&stepped)?);
        let prev = sgd_weights.last().expect("non-empty");
        sgd_weights.push(prev.sub(&delta.scale(h))?);
    }
    let recursion_gap = sgd_weights
        .iter()
        .zip(&prefix.weights)
        .map(|(a, b)| a.max_abs_diff(b))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(SgdRealization {
        prefix,
        sgd_weights,
        identity_gap,
        recursion_gap,
    })
}

#[derive(Clone, Debug)]
pub struct SuffixTrace {
    /// `W₀ … W_n`.
    pub weights: Vec<Matrix>,
    /// `h_i = 1/‖A(c_{i+1}..c_n, x)‖²` for `i = 1..n`.
    pub rate_list: Vec<f64>,
    /// `A_i = ΔA(c_i) A(c_{i+1}..c_n, x)ᵀ`.
    pub update_mats: Vec<Matrix>,
    /// `Π_i (I + h_i A_i)`.
    pub factor_product: Matrix,
    /// Cumulative last-layer bias offsets for `i = 0..n`, skip blocks only.
    pub bias_updates: Option<Vec<Vector>>,
    /// `‖T_{W_i}(c_{i+1}..c_n, x) − T_{W₀}(C, x)‖_max` for `i = 0..n`.
    pub invariance_gaps: Vec<f64>,
    /// `‖W_n − W₀ Π(I + h_i A_i)‖_max / ‖W_n‖_max`.
    pub factorization_rel_gap: f64,
}

pub fn suffix_dynamics(block: &BlockParams, prompt: &PromptMatrix) -> Result<SuffixTrace> {
    let n = prompt.context_len();
    if n == 0 {
        return Err(Error::Config("suffix dynamics needs at least one context token".into()));
    }
    let dim = prompt.token_dim();
    let reference = block.forward(prompt)?;

    let mut weights = vec![block.mlp.w.clone()];
    let mut rate_list = Vec::with_capacity(n);
    let mut update_mats = Vec::with_capacity(n);
    let mut factor_product = Matrix::identity(dim);
    let mut bias = Vector::zeros(dim);
    let mut bias_updates = vec![bias.clone()];
    let mut invariance_gaps = vec![0.0];

    let mut current = attend(&block.layer, prompt)?;
    for i in 1..=n {
        let rest = prompt.suffix(i);
        let base = attend(&block.layer, &rest)?;
        let norm_sq = l2_norm_sq(&base);
        if norm_sq <= SINGULAR_BASE_EPS {
            return Err(Error::SingularSuffixBase { step: i, norm_sq });
        }
        let context_vec = current.sub(&base)?;
        let prev = weights.last().expect("non-empty");
        let next = prev.add(&delta_w(prev, &context_vec, &base)?)?;

        let rate = 1.0 / norm_sq;
        let a_i = outer(&context_vec, &base);
        factor_product = matmul(&factor_product, &Matrix::identity(dim).add(&a_i.scale(rate))?)?;

        bias = bias.add(&context_vec)?;
        let mut stepped = block.clone();
        stepped.mlp.w = next.clone();
        if block.mlp_skip {
            stepped.mlp.b2 = block.mlp.b2.add(&bias)?;
        }
        invariance_gaps.push(stepped.forward(&rest)?.max_abs_diff(&reference)?);

        weights.push(next);
        rate_list.push(rate);
        update_mats.push(a_i);
        bias_updates.push(bias.clone());
        current = base;
    }

    let w_n = weights.last().expect("non-empty");
    let product = matmul(&block.mlp.w, &factor_product)?;
    let factorization_rel_gap = w_n.max_abs_diff(&product)? / w_n.max_abs().max(f64::MIN_POSITIVE);

    Ok(SuffixTrace {
        weights,
        rate_list,
        update_mats,
        factor_product,
        bias_updates: block.mlp_skip.then_some(bias_updates),
        invariance_gaps,
        factorization_rel_gap,
    })
}

/// `‖(ΔW)_{i+1} − (ΔW)_i‖_F` for `i = 1..n−1` along the prefix dynamics.
pub fn grad_norm_curve(block: &BlockParams, prompt: &PromptMatrix) -> Result<Vec<f64>> {
    if prompt.context_len() < 2 {
        return Err(Error::Config("gradient-norm curve needs at least two context tokens".into()));
    }
    Ok(prefix_dynamics(block, prompt)?.grad_norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contextual_block::{Activation, MlpParams};
    use crate::contextual_layer::{AttentionParams, ContextualLayer, EmaParams};
    use crate::numerics::{sample_gaussian, Rng};
    use crate::weight_transfer::transfer_full;

    fn mlp(rng: &mut Rng, dim: usize, hidden: usize) -> MlpParams {
        MlpParams {
            w: sample_gaussian(rng, hidden, dim),
            b: rng.normal_vector(hidden),
            w2: sample_gaussian(rng, dim, hidden).scale(0.4),
            b2: rng.normal_vector(dim),
            activation: Activation::Relu,
        }
    }

    fn attention_block(rng: &mut Rng, dim: usize, skip: bool) -> BlockParams {
        let mut sq = || sample_gaussian(rng, dim, dim).scale(0.6);
        let layer = ContextualLayer::SoftmaxAttention(AttentionParams::new(sq(), sq(), sq(), sq(), 1).unwrap());
        BlockParams {
            layer,
            mlp: mlp(rng, dim, 10),
            mlp_skip: skip,
        }
    }

    fn ema_block(rng: &mut Rng, dim: usize, gamma: f64) -> BlockParams {
        BlockParams {
            layer: ContextualLayer::EmaRecurrent(EmaParams { gamma, use_residual: false }),
            mlp: mlp(rng, dim, 10),
            mlp_skip: false,
        }
    }

    fn random_prompt(rng: &mut Rng, dim: usize, n: usize) -> PromptMatrix {
        PromptMatrix::new((0..n).map(|_| rng.normal_vector(dim)).collect(), rng.normal_vector(dim)).unwrap()
    }

    #[test]
    fn single_token_prefix_is_full_transfer() {
        let mut rng = Rng::new(30);
        let block = attention_block(&mut rng, 3, false);
        let prompt = random_prompt(&mut rng, 3, 1);
        let trace = prefix_dynamics(&block, &prompt).unwrap();
        let upd = transfer_full(&block, &prompt).unwrap();
        assert_eq!(trace.weights[1], block.mlp.w.add(&upd.delta_w).unwrap());
        assert!(trace.grad_norms.is_empty());
    }

    #[test]
    fn every_prefix_reproduces_the_forward_pass() {
        let mut rng = Rng::new(31);
        for skip in [false, true] {
            let block = attention_block(&mut rng, 3, skip);
            let prompt = random_prompt(&mut rng, 3, 20);
            let trace = prefix_dynamics(&block, &prompt).unwrap();
            let x_only = PromptMatrix::query_only(prompt.query().clone());
            for i in 0..=20 {
                let moved = trace.block_at(&block, i).unwrap().forward(&x_only).unwrap();
                let direct = block.forward(&prompt.prefix(i)).unwrap();
                assert!(moved.max_abs_diff(&direct).unwrap() <= 1e-10, "i = {i}");
            }
            assert!(trace.endpoint_gap <= 1e-10);
        }
    }

    /// Context whose token `k` equals the EMA state after the first `k` tokens.
    fn no_op_context(rng: &mut Rng, gamma: f64, dim: usize, k: usize) -> Vec<Vector> {
        let mut ctx: Vec<Vector> = (0..k).map(|_| rng.normal_vector(dim)).collect();
        let mut state = Vector::zeros(dim);
        for c in &ctx {
            state = state.scale(gamma).add(&c.scale(1.0 - gamma)).unwrap();
        }
        ctx.push(state);
        ctx.push(rng.normal_vector(dim));
        ctx
    }

    #[test]
    fn no_op_token_gives_no_update() {
        let mut rng = Rng::new(32);
        let gamma = 0.7;
        let block = ema_block(&mut rng, 3, gamma);
        let ctx = no_op_context(&mut rng, gamma, 3, 3);
        let prompt = PromptMatrix::new(ctx, rng.normal_vector(3)).unwrap();
        let sgd = sgd_realization(&block, &prompt).unwrap();
        let w = &sgd.prefix.weights;
        assert!(w[4].max_abs_diff(&w[3]).unwrap() <= 1e-12);
        assert!(sgd.prefix.deltas[3].max_abs() <= 1e-12);
        assert!(sgd.prefix.deltas[2].max_abs() > 1e-6);
    }

    #[test]
    fn sgd_identity_holds() {
        let mut rng = Rng::new(33);
        for skip in [false, true] {
            let block = attention_block(&mut rng, 3, skip);
            let prompt = random_prompt(&mut rng, 3, 12);
            let sgd = sgd_realization(&block, &prompt).unwrap();
            assert!(sgd.identity_gap <= 1e-12, "{}", sgd.identity_gap);
            assert!(sgd.recursion_gap <= 1e-10);
            assert_eq!(sgd.prefix.deltas.len(), 12);
            assert_eq!(sgd.prefix.weights.len(), 13);
            assert_eq!(sgd.prefix.grad_norms.len(), 11);
        }
    }

    #[test]
    fn trace_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(34);
        let delta = sample_gaussian(&mut rng, 5, 3);
        let w = sample_gaussian(&mut rng, 5, 3);
        let grad = trace_loss_grad(&delta);
        let eps = 1e-5;
        for k in 0..15 {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus.as_mut_slice()[k] += eps;
            minus.as_mut_slice()[k] -= eps;
            let fd = (trace_loss(&delta, &plus).unwrap() - trace_loss(&delta, &minus).unwrap()) / (2.0 * eps);
            assert!((fd - grad.as_slice()[k]).abs() <= 1e-6);
        }
    }

    #[test]
    fn suffix_invariance_and_factorization() {
        let mut rng = Rng::new(35);
        for skip in [false, true] {
            let block = attention_block(&mut rng, 3, skip);
            let prompt = random_prompt(&mut rng, 3, 9);
            let trace = suffix_dynamics(&block, &prompt).unwrap();
            assert_eq!(trace.weights.len(), 10);
            assert_eq!(trace.rate_list.len(), 9);
            assert!(trace.invariance_gaps.iter().all(|&g| g <= 1e-10), "{:?}", trace.invariance_gaps);
            assert!(trace.factorization_rel_gap <= 1e-9);
        }
    }

    #[test]
    fn single_token_suffix_matches_prefix() {
        let mut rng = Rng::new(36);
        let block = attention_block(&mut rng, 3, false);
        let prompt = random_prompt(&mut rng, 3, 1);
        let s = suffix_dynamics(&block, &prompt).unwrap();
        let p = prefix_dynamics(&block, &prompt).unwrap();
        assert_eq!(s.weights[1], p.weights[1]);
    }

    #[test]
    fn singular_suffix_base_names_the_step() {
        // Zero query and zero trailing token make A(c₃, x) vanish under a
        // residual-free EMA; the base for step 2 is singular.
        let mut rng = Rng::new(37);
        let block = ema_block(&mut rng, 3, 0.5);
        let ctx = vec![rng.normal_vector(3), rng.normal_vector(3), Vector::zeros(3)];
        let prompt = PromptMatrix::new(ctx, Vector::zeros(3)).unwrap();
        match suffix_dynamics(&block, &prompt) {
            Err(Error::SingularSuffixBase { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected singular suffix base, got {other:?}"),
        }
        assert!(matches!(prefix_dynamics(&block, &prompt), Err(Error::SingularBase { .. })));
    }

    #[test]
    fn repeated_tokens_decay_geometrically() {
        // EMA with a repeated token c: A(c^i, x) − A(x) = (γ − γ^{i+1}) c, so
        // ‖(ΔW)_{i+1} − (ΔW)_i‖ shrinks by exactly γ per step.
        let mut rng = Rng::new(38);
        let gamma = 0.8;
        let block = ema_block(&mut rng, 3, gamma);
        let c = rng.normal_vector(3);
        let prompt = PromptMatrix::new(vec![c; 10], rng.normal_vector(3)).unwrap();
        let curve = grad_norm_curve(&block, &prompt).unwrap();
        assert_eq!(curve.len(), 9);
        for pair in curve.windows(2) {
            assert!((pair[1] / pair[0] - gamma).abs() < 1e-9);
        }
    }

    #[test]
    fn two_token_curve_is_single_difference() {
        let mut rng = Rng::new(39);
        let block = attention_block(&mut rng, 3, false);
        let prompt = random_prompt(&mut rng, 3, 2);
        let trace = prefix_dynamics(&block, &prompt).unwrap();
        let curve = grad_norm_curve(&block, &prompt).unwrap();
        let want = trace.weights[2].sub(&trace.weights[1]).unwrap().frobenius();
        assert_eq!(curve.len(), 1);
        assert!((curve[0] - want).abs() <= 1e-14 * want.max(1.0));
        assert!(grad_norm_curve(&block, &prompt.prefix(1)).is_err());
    }
}
