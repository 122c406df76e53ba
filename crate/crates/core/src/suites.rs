//! Randomised invariant suites over blocks with arbitrary (untrained) weights.
//!
//! Each trial owns `Rng::new(seed).split(trial)`, so results do not depend on
//! scheduling and can be run in parallel.

use rayon::prelude::*;

use crate::contextual_block::{block_forward, Activation, BlockParams, MlpParams};
use crate::contextual_layer::{AttentionParams, ContextualLayer, EmaParams, PromptMatrix};
use crate::dynamics::{sgd_realization, suffix_dynamics, trace_loss, trace_loss_grad};
use crate::error::Result;
use crate::numerics::{Matrix, Rng, Vector};
use crate::tasks::sample_batch;
use crate::training::{batch_loss, flatten_params, init_block, loss_and_grads, set_params, LayerChoice, TrainConfig};
use crate::weight_transfer::{apply_to_block, rank_one_residual, transfer, WeightUpdate};

/// Half-width of the uniform distribution random block parameters are drawn from.
pub const PARAM_RANGE: f64 = 3.0;

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| PARAM_RANGE * (2.0 * rng.uniform() - 1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

fn uniform_vector(rng: &mut Rng, dim: usize) -> Vector {
    Vector::new((0..dim).map(|_| PARAM_RANGE * (2.0 * rng.uniform() - 1.0)).collect())
}

fn below(rng: &mut Rng, n: usize) -> usize {
    ((rng.uniform() * n as f64) as usize).min(n - 1)
}

/// Block on tokens of dimension `d + 1` with every parameter uniform in `[−3, 3]`.
///
/// The layer is softmax attention (random head count, optional pre-norm and
/// residual) except for one trial in ten, which uses an EMA layer.
pub fn random_block(rng: &mut Rng, d: usize, activation: Activation, mlp_skip: bool) -> BlockParams {
    let dim = d + 1;
    let hidden = 2 + below(rng, 7);
    let layer = if rng.uniform() < 0.1 {
        ContextualLayer::EmaRecurrent(EmaParams {
            gamma: 0.05 + 0.9 * rng.uniform(),
            use_residual: rng.uniform() < 0.5,
        })
    } else {
        let divisors: Vec<usize> = (1..=dim).filter(|h| dim.is_multiple_of(*h)).collect();
        let n_heads = divisors[below(rng, divisors.len())];
        ContextualLayer::SoftmaxAttention(AttentionParams {
            wq: uniform_matrix(rng, dim, dim),
            wk: uniform_matrix(rng, dim, dim),
            wv: uniform_matrix(rng, dim, dim),
            wo: uniform_matrix(rng, dim, dim),
            n_heads,
            use_residual: rng.uniform() < 0.5,
            pre_norm: rng.uniform() < 0.3,
        })
    };
    BlockParams {
        layer,
        mlp: MlpParams {
            w: uniform_matrix(rng, hidden, dim),
            b: uniform_vector(rng, hidden),
            w2: uniform_matrix(rng, dim, hidden),
            b2: uniform_vector(rng, dim),
            activation,
        },
        mlp_skip,
    }
}

/// `n` context tokens and a query, entries standard normal.
pub fn random_prompt(rng: &mut Rng, dim: usize, n: usize) -> PromptMatrix {
    let context = (0..n).map(|_| rng.normal_vector(dim)).collect();
    PromptMatrix::new(context, rng.normal_vector(dim)).expect("tokens share dimension")
}

/// Each position kept with probability 1/2; some trials remove nothing or everything.
fn random_subset(rng: &mut Rng, n: usize, trial: usize) -> Vec<usize> {
    match trial % 13 {
        0 => Vec::new(),
        1 => (0..n).collect(),
        _ => (0..n).filter(|_| rng.uniform() < 0.5).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremTrial {
    pub trial: usize,
    pub d: usize,
    pub n: usize,
    pub removed: usize,
    pub activation: Activation,
    pub mlp_skip: bool,
    pub ema: bool,
    /// Max-abs gap between the full-prompt and transferred outputs.
    pub gap: f64,
    pub rank_residual: f64,
    /// Largest output entry, for judging the gap against the output scale.
    pub output_scale: f64,
}

/// Context-to-weight transfer on random `(block, prompt, Y)` triples.
///
/// `d` alternates between 2 and 5, activations alternate in pairs and
/// `n ∈ 1..=20`. Any `corruption` other than `None` must produce large gaps.
pub fn theorem_suite(trials: usize, mlp_skip: bool, seed: u64, corruption: Corruption) -> Result<Vec<TheoremTrial>> {
    let root = Rng::new(seed);
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.split(k as u64);
            let d = if k % 2 == 0 { 2 } else { 5 };
            let activation = if (k / 2) % 2 == 0 { Activation::Relu } else { Activation::Gelu };
            let n = 1 + below(&mut rng, 20);
            let block = random_block(&mut rng, d, activation, mlp_skip);
            let prompt = random_prompt(&mut rng, d + 1, n);
            let removed = random_subset(&mut rng, n, k);
            let upd = transfer(&block, &prompt, &removed)?;
            let rank_residual = rank_one_residual(&upd.delta_w);
            let upd = corrupt(&upd, corruption);
            let full = block_forward(&block, &prompt)?;
            let reduced = block_forward(&apply_to_block(&block, &upd)?, &prompt.without(&removed)?)?;
            Ok(TheoremTrial {
                trial: k,
                d,
                n,
                removed: removed.len(),
                activation,
                mlp_skip,
                ema: matches!(block.layer, ContextualLayer::EmaRecurrent(_)),
                gap: full.max_abs_diff(&reduced)?,
                rank_residual,
                output_scale: full.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            })
        })
        .collect()
}

/// Deliberate defects injected into ΔW to check that verification catches them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    None,
    /// Every entry shifted by the given amount.
    Shift(f64),
    /// ΔW negated.
    FlipSign,
}

pub fn corrupt(upd: &WeightUpdate, corruption: Corruption) -> WeightUpdate {
    let delta_w = match corruption {
        Corruption::None => return upd.clone(),
        Corruption::Shift(eps) => {
            let (r, c) = upd.delta_w.shape();
            let shift = Matrix::from_vec(r, c, vec![eps; r * c]).expect("length matches shape");
            upd.delta_w.add(&shift).expect("same shape")
        }
        Corruption::FlipSign => upd.delta_w.scale(-1.0),
    };
    WeightUpdate { delta_w, ..upd.clone() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdTrial {
    pub trial: usize,
    /// `max_i ‖W_{i+1} − (W_i − hΔ_i)‖_max`.
    pub identity_gap: f64,
    /// Largest entrywise gap between `Δ_i` and the finite-difference gradient of `trace(Δ_iᵀ W)`.
    pub trace_fd_error: f64,
}

/// The prefix weights as SGD on `trace(Δ_iᵀ W)`, on random `(block, prompt)` pairs.
pub fn sgd_suite(trials: usize, seed: u64) -> Result<Vec<SgdTrial>> {
    let root = Rng::new(seed);
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.split(k as u64);
            let d = if k % 2 == 0 { 2 } else { 5 };
            let activation = if (k / 2) % 2 == 0 { Activation::Relu } else { Activation::Gelu };
            let n = 1 + below(&mut rng, 20);
            let block = random_block(&mut rng, d, activation, k % 3 == 0);
            let prompt = random_prompt(&mut rng, d + 1, n);
            let real = sgd_realization(&block, &prompt)?;
            let mut fd_err = 0.0f64;
            for (i, delta) in real.prefix.deltas.iter().enumerate() {
                fd_err = fd_err.max(trace_fd_error(delta, &real.prefix.weights[i])?);
                fd_err = fd_err.max(trace_loss_grad(delta).max_abs_diff(delta)?);
            }
            Ok(SgdTrial {
                trial: k,
                identity_gap: real.identity_gap,
                trace_fd_error: fd_err,
            })
        })
        .collect()
}

fn trace_fd_error(delta: &Matrix, w: &Matrix) -> Result<f64> {
    let (rows, cols) = w.shape();
    let step = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..rows {
        for j in 0..cols {
            let mut plus = w.clone();
            plus.as_mut_slice()[i * cols + j] += step;
            let mut minus = w.clone();
            minus.as_mut_slice()[i * cols + j] -= step;
            let fd = (trace_loss(delta, &plus)? - trace_loss(delta, &minus)?) / (2.0 * step);
            let scale = delta.max_abs().max(1.0);
            worst = worst.max((fd - delta[(i, j)]).abs() / scale);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuffixTrial {
    pub trial: usize,
    pub max_invariance_gap: f64,
    pub factorization_rel_gap: f64,
}

/// Suffix dynamics invariance and product factorisation on random pairs.
pub fn suffix_suite(trials: usize, seed: u64) -> Result<Vec<SuffixTrial>> {
    let root = Rng::new(seed);
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.split(k as u64);
            let d = if k % 2 == 0 { 2 } else { 5 };
            let activation = if (k / 2) % 2 == 0 { Activation::Relu } else { Activation::Gelu };
            let n = 1 + below(&mut rng, 20);
            let block = random_block(&mut rng, d, activation, k % 3 == 0);
            let prompt = random_prompt(&mut rng, d + 1, n);
            let trace = suffix_dynamics(&block, &prompt)?;
            Ok(SuffixTrial {
                trial: k,
                max_invariance_gap: trace.invariance_gaps.iter().fold(0.0f64, |m, g| m.max(*g)),
                factorization_rel_gap: trace.factorization_rel_gap,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckTrial {
    pub trial: usize,
    pub description: String,
    pub n_params: usize,
    /// Entries outside both the relative and the absolute tolerance.
    pub failures: usize,
    /// Worst `|analytic − numeric| / max(rel·scale, abs)` over entries; ≤ 1 passes.
    pub worst_ratio: f64,
}

pub const GRAD_FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_TOL: f64 = 1e-7;

/// Backpropagated batch-loss gradients against central finite differences.
///
/// Configurations cycle through both activations, both skip modes, head
/// counts, pre-norm and the EMA layer, on small blocks whose biases are
/// randomised as well.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckTrial>> {
    let root = Rng::new(seed);
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.split(k as u64);
            let d = 1 + k % 3;
            let dim = d + 1;
            let heads: Vec<usize> = (1..=dim).filter(|h| dim.is_multiple_of(*h)).collect();
            let config = TrainConfig {
                d,
                n: 1 + k % 4,
                batch_size: 2,
                hidden_dim: 3 + k % 3,
                activation: if k % 2 == 0 { Activation::Relu } else { Activation::Gelu },
                mlp_skip: (k / 2) % 2 == 1,
                n_heads: heads[(k / 4) % heads.len()],
                pre_norm: k % 5 == 3,
                use_residual: k % 7 != 6,
                layer: if k % 9 == 8 { LayerChoice::EmaRecurrent { gamma: 0.6 } } else { LayerChoice::SoftmaxAttention },
                ..TrainConfig::default()
            };
            let mut block = init_block(&config, &mut rng);
            let flat: Vec<f64> = flatten_params(&block).iter().map(|p| p + 0.3 * rng.normal()).collect();
            set_params(&mut block, &flat)?;
            let batch = sample_batch(config.d, config.n, config.batch_size, &rng.split(0));
            let (_, g) = loss_and_grads(&block, &batch)?;
            let analytic = g.flatten();
            let mut failures = 0;
            let mut worst = 0.0f64;
            let mut probe = block.clone();
            for (idx, a) in analytic.iter().enumerate() {
                let mut p = flat.clone();
                p[idx] = flat[idx] + GRAD_FD_STEP;
                set_params(&mut probe, &p)?;
                let up = batch_loss(&probe, &batch)?;
                p[idx] = flat[idx] - GRAD_FD_STEP;
                set_params(&mut probe, &p)?;
                let down = batch_loss(&probe, &batch)?;
                let numeric = (up - down) / (2.0 * GRAD_FD_STEP);
                let allowed = (GRAD_REL_TOL * a.abs().max(numeric.abs())).max(GRAD_ABS_TOL);
                let ratio = (a - numeric).abs() / allowed;
                if ratio > 1.0 {
                    failures += 1;
                }
                worst = worst.max(ratio);
            }
            Ok(GradCheckTrial {
                trial: k,
                description: format!(
                    "d={} heads={} act={:?} skip={} pre_norm={} residual={} layer={:?}",
                    config.d, config.n_heads, config.activation, config.mlp_skip, config.pre_norm, config.use_residual, config.layer
                ),
                n_params: analytic.len(),
                failures,
                worst_ratio: worst,
            })
        })
        .collect()
}
