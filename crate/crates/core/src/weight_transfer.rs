//! Moving context into weights.
//!
//! Removing a portion `Y` of the context and adding the rank-one matrix
//!
//! ```text
//! ΔW(Y) = (W ΔA(Y)) A(C\Y, x)ᵀ / ‖A(C\Y, x)‖²
//! ```
//!
//! to the first MLP layer leaves the block output unchanged. With skip
//! connections around the MLP the last-layer bias must also move by `ΔA(Y)`.

use crate::contextual_block::{block_forward, BlockParams, MlpParams};
use crate::contextual_layer::{attend, PromptMatrix};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm_sq, Matrix, Vector};

/// Squared norms of the base vector at or below this are rejected.
pub const SINGULAR_BASE_EPS: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate {
    pub delta_w: Matrix,
    /// Present only for blocks with MLP skip connections.
    pub delta_b2: Option<Vector>,
    /// `ΔA(Y)` that generated the update.
    pub context_vec: Vector,
    /// `‖A(C\Y, x)‖²`.
    pub base_norm_sq: f64,
}

impl WeightUpdate {
    pub fn negated(&self) -> WeightUpdate {
        WeightUpdate {
            delta_w: self.delta_w.scale(-1.0),
            delta_b2: self.delta_b2.as_ref().map(|b| b.scale(-1.0)),
            context_vec: self.context_vec.scale(-1.0),
            base_norm_sq: self.base_norm_sq,
        }
    }
}

/// `(W Δa) baseᵀ / ‖base‖²`.
pub fn delta_w(w: &Matrix, delta_a: &Vector, base: &Vector) -> Result<Matrix> {
    if w.cols() != delta_a.dim() || delta_a.dim() != base.dim() {
        return Err(Error::shape(
            "delta_w",
            format!("W {}", w.shape_str()),
            format!("delta_a {} / base {}", delta_a.dim(), base.dim()),
        ));
    }
    let norm_sq = l2_norm_sq(base);
    if norm_sq <= SINGULAR_BASE_EPS {
        return Err(Error::SingularBase { norm_sq });
    }
    let column = w.matvec(delta_a)?;
    let mut out = Matrix::zeros(w.rows(), base.dim());
    for i in 0..w.rows() {
        for j in 0..base.dim() {
            out[(i, j)] = column[i] * base[j] / norm_sq;
        }
    }
    Ok(out)
}

/// Update that moves the context positions `removed` (0-based) into the weights.
pub fn transfer(block: &BlockParams, prompt: &PromptMatrix, removed: &[usize]) -> Result<WeightUpdate> {
    let reduced = prompt.without(removed)?;
    let full_out = attend(&block.layer, prompt)?;
    let base = attend(&block.layer, &reduced)?;
    let context_vec = full_out.sub(&base)?;
    transfer_from_parts(block, context_vec, &base)
}

/// Update for the whole context: `C` moved into `W`, leaving only the query.
pub fn transfer_full(block: &BlockParams, prompt: &PromptMatrix) -> Result<WeightUpdate> {
    let all: Vec<usize> = (0..prompt.context_len()).collect();
    transfer(block, prompt, &all)
}

pub(crate) fn transfer_from_parts(block: &BlockParams, context_vec: Vector, base: &Vector) -> Result<WeightUpdate> {
    let delta = delta_w(&block.mlp.w, &context_vec, base)?;
    Ok(WeightUpdate {
        delta_w: delta,
        delta_b2: block.mlp_skip.then(|| context_vec.clone()),
        context_vec,
        base_norm_sq: l2_norm_sq(base),
    })
}

/// `W ← W + ΔW` and, when present, `b2 ← b2 + Δb2`.
pub fn apply_update(mlp: &MlpParams, upd: &WeightUpdate) -> Result<MlpParams> {
    let mut out = mlp.clone();
    out.w = mlp.w.add(&upd.delta_w)?;
    if let Some(db) = &upd.delta_b2 {
        out.b2 = mlp.b2.add(db)?;
    }
    Ok(out)
}

/// Block with its MLP replaced by the updated one.
pub fn apply_to_block(block: &BlockParams, upd: &WeightUpdate) -> Result<BlockParams> {
    Ok(BlockParams {
        layer: block.layer.clone(),
        mlp: apply_update(&block.mlp, upd)?,
        mlp_skip: block.mlp_skip,
    })
}

/// Max-abs gap between `T_W(C, x)` and `T_{W+ΔW(Y)}(C\Y, x)`.
pub fn verify_transfer(block: &BlockParams, prompt: &PromptMatrix, removed: &[usize]) -> Result<f64> {
    let upd = transfer(block, prompt, removed)?;
    let updated = apply_to_block(block, &upd)?;
    let full = block_forward(block, prompt)?;
    let reduced = block_forward(&updated, &prompt.without(removed)?)?;
    full.max_abs_diff(&reduced)
}

/// Largest 2×2 minor of `m` divided by the square of its largest entry.
///
/// Zero (up to rounding) exactly when `m` has rank at most one.
pub fn rank_one_residual(m: &Matrix) -> f64 {
    let scale = m.max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    let (rows, cols) = m.shape();
    let mut worst = 0.0f64;
    for i in 0..rows {
        for k in i + 1..rows {
            for j in 0..cols {
                for l in j + 1..cols {
                    let minor = m[(i, j)] * m[(k, l)] - m[(i, l)] * m[(k, j)];
                    worst = worst.max(minor.abs());
                }
            }
        }
    }
    worst / (scale * scale)
}
