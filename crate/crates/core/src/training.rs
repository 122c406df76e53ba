//! Pretraining the single block on in-context regression, plus the
//! MLP-weight-only finetuning baseline.
//!
//! Gradients are hand-derived reverse mode through the attention layer and
//! the MLP. They are checked against central finite differences in the tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contextual_block::{Activation, BlockParams, MlpParams};
use crate::contextual_layer::{
    attend, attention_backward, attention_forward, AttentionGrads, AttentionParams, ContextualLayer, EmaParams,
    PromptMatrix,
};
use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, Matrix, Rng, Vector};
use crate::tasks::{sample_batch, to_prompt, LinearTask, TaskBatch};
use crate::weight_transfer::{apply_to_block, transfer_full};

pub const DIVERGENCE_LIMIT: f64 = 1e6;

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerChoice {
    #[default]
    SoftmaxAttention,
    EmaRecurrent { gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub d: usize,
    /// Context length `N` of every training prompt.
    pub n: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub mlp_skip: bool,
    pub layer: LayerChoice,
    pub n_heads: usize,
    pub use_residual: bool,
    pub pre_norm: bool,
    pub val_tasks: usize,
    /// Seed of the held-out validation tasks, independent of `seed`.
    pub val_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 2,
            n: 50,
            batch_size: 64,
            steps: 20_000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 0,
            checkpoint_every: 1_000,
            hidden_dim: 64,
            activation: Activation::Relu,
            mlp_skip: false,
            layer: LayerChoice::SoftmaxAttention,
            n_heads: 3,
            use_residual: true,
            pre_norm: false,
            val_tasks: 512,
            val_seed: 1_000_003,
        }
    }
}

impl TrainConfig {
    pub fn token_dim(&self) -> usize {
        self.d + 1
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("n", self.n),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("val_tasks", self.val_tasks),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !self.token_dim().is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads {} does not divide token_dim {}",
                self.n_heads,
                self.token_dim()
            )));
        }
        if let LayerChoice::EmaRecurrent { gamma } = self.layer {
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::Config(format!("ema gamma {gamma} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Normal weights with standard deviation `1/√fan_in`, zero biases.
pub fn init_block(config: &TrainConfig, rng: &mut Rng) -> BlockParams {
    let dim = config.token_dim();
    let hidden = config.hidden_dim;
    let mut scaled = |rows: usize, cols: usize| sample_gaussian(rng, rows, cols).scale(1.0 / (cols as f64).sqrt());
    let layer = match config.layer {
        LayerChoice::SoftmaxAttention => {
            let (wq, wk, wv, wo) = (scaled(dim, dim), scaled(dim, dim), scaled(dim, dim), scaled(dim, dim));
            ContextualLayer::SoftmaxAttention(AttentionParams {
                wq,
                wk,
                wv,
                wo,
                n_heads: config.n_heads,
                use_residual: config.use_residual,
                pre_norm: config.pre_norm,
            })
        }
        LayerChoice::EmaRecurrent { gamma } => ContextualLayer::EmaRecurrent(EmaParams {
            gamma,
            use_residual: config.use_residual,
        }),
    };
    let w = scaled(hidden, dim);
    let w2 = scaled(dim, hidden);
    BlockParams {
        layer,
        mlp: MlpParams {
            w,
            b: Vector::zeros(hidden),
            w2,
            b2: Vector::zeros(dim),
            activation: config.activation,
        },
        mlp_skip: config.mlp_skip,
    }
}

/// Gradients mirroring the trainable parameters of a block. The EMA layer has
/// no trainable parameters, so `attention` is `None` for it.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub attention: Option<AttentionGrads>,
    pub w: Matrix,
    pub b: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl GradientSet {
    pub fn zeros_like(block: &BlockParams) -> Self {
        let mlp = &block.mlp;
        GradientSet {
            attention: match &block.layer {
                ContextualLayer::SoftmaxAttention(p) => Some(AttentionGrads::zeros(p.token_dim())),
                ContextualLayer::EmaRecurrent(_) => None,
            },
            w: Matrix::zeros(mlp.w.rows(), mlp.w.cols()),
            b: Vector::zeros(mlp.b.dim()),
            w2: Matrix::zeros(mlp.w2.rows(), mlp.w2.cols()),
            b2: Vector::zeros(mlp.b2.dim()),
        }
    }

    /// Flat view in the order of [`flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            for m in [&a.wq, &a.wk, &a.wv, &a.wo] {
                out.extend_from_slice(m.as_slice());
            }
        }
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(self.b2.as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &GradientSet) {
        fn acc(dst: &mut [f64], src: &[f64]) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if let (Some(a), Some(b)) = (&mut self.attention, &other.attention) {
            acc(a.wq.as_mut_slice(), b.wq.as_slice());
            acc(a.wk.as_mut_slice(), b.wk.as_slice());
            acc(a.wv.as_mut_slice(), b.wv.as_slice());
            acc(a.wo.as_mut_slice(), b.wo.as_slice());
        }
        acc(self.w.as_mut_slice(), other.w.as_slice());
        acc(self.b.as_mut_slice(), other.b.as_slice());
        acc(self.w2.as_mut_slice(), other.w2.as_slice());
        acc(self.b2.as_mut_slice(), other.b2.as_slice());
    }
}

/// Named trainable arrays of a block, in a fixed order.
pub fn param_arrays(block: &BlockParams) -> Vec<(&'static str, &[f64])> {
    let mut out: Vec<(&'static str, &[f64])> = Vec::new();
    if let ContextualLayer::SoftmaxAttention(p) = &block.layer {
        out.push(("attn.wq", p.wq.as_slice()));
        out.push(("attn.wk", p.wk.as_slice()));
        out.push(("attn.wv", p.wv.as_slice()));
        out.push(("attn.wo", p.wo.as_slice()));
    }
    out.push(("mlp.w", block.mlp.w.as_slice()));
    out.push(("mlp.b", block.mlp.b.as_slice()));
    out.push(("mlp.w2", block.mlp.w2.as_slice()));
    out.push(("mlp.b2", block.mlp.b2.as_slice()));
    out
}

fn param_arrays_mut(block: &mut BlockParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    if let ContextualLayer::SoftmaxAttention(p) = &mut block.layer {
        out.push(p.wq.as_mut_slice());
        out.push(p.wk.as_mut_slice());
        out.push(p.wv.as_mut_slice());
        out.push(p.wo.as_mut_slice());
    }
    let mlp = &mut block.mlp;
    out.push(mlp.w.as_mut_slice());
    out.push(mlp.b.as_mut_slice());
    out.push(mlp.w2.as_mut_slice());
    out.push(mlp.b2.as_mut_slice());
    out
}

pub fn flatten_params(block: &BlockParams) -> Vec<f64> {
    param_arrays(block).into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
}

/// Overwrites the trainable parameters from a flat vector in [`flatten_params`] order.
pub fn set_params(block: &mut BlockParams, flat: &[f64]) -> Result<()> {
    let total: usize = param_arrays(block).iter().map(|(_, s)| s.len()).sum();
    if total != flat.len() {
        return Err(Error::shape("set_params", total, flat.len()));
    }
    let mut offset = 0;
    for dst in param_arrays_mut(block) {
        let len = dst.len();
        dst.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    Ok(())
}

/// Prediction for one prompt and parameter gradients, with `error_of(ŷ) = ∂L/∂ŷ`.
fn backprop(block: &BlockParams, prompt: &PromptMatrix, error_of: impl FnOnce(f64) -> f64) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::zeros_like(block);
    let (a, cache) = match &block.layer {
        ContextualLayer::SoftmaxAttention(p) => {
            let cache = attention_forward(p, prompt)?;
            (cache.output.clone(), Some(cache))
        }
        ContextualLayer::EmaRecurrent(_) => (attend(&block.layer, prompt)?, None),
    };
    let mlp = &block.mlp;
    let mc = mlp.forward_cached(&a)?;
    let dim = block.token_dim();
    let last = dim - 1;
    let mut pred = mc.out[last];
    if block.mlp_skip {
        pred += prompt.query()[last] + a[last];
    }
    let d_pred = error_of(pred);

    // ∂ŷ/∂out is the last basis vector.
    grads.b2[last] = d_pred;
    let mut d_hidden = vec![0.0; mlp.hidden_dim()];
    for (k, dh) in d_hidden.iter_mut().enumerate() {
        grads.w2[(last, k)] = d_pred * mc.hidden[k];
        *dh = d_pred * mlp.w2[(last, k)];
    }
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(mc.pre.iter())
        .map(|(g, &z)| g * mlp.activation.derivative(z))
        .collect();
    grads.w.add_outer(&d_pre, a.as_slice(), 1.0);
    grads.b.as_mut_slice().copy_from_slice(&d_pre);

    if let (ContextualLayer::SoftmaxAttention(p), Some(cache), Some(ag)) = (&block.layer, cache, grads.attention.as_mut()) {
        let mut d_a = mlp.w.tr_matvec(&Vector::new(d_pre))?.into_inner();
        if block.mlp_skip {
            d_a[last] += d_pred;
        }
        attention_backward(p, &cache, &d_a, ag);
    }
    Ok((pred, grads))
}

/// `(1/2B) Σ_τ (ŷ_τ − ⟨w_τ, x_τ,query⟩)²`.
pub fn batch_loss(block: &BlockParams, batch: &TaskBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let residuals: Vec<f64> = batch
        .tasks
        .par_iter()
        .map(|t| Ok(block.predict(&to_prompt(t))? - t.target()))
        .collect::<Result<_>>()?;
    Ok(residuals.iter().map(|r| r * r).sum::<f64>() / (2.0 * batch.len() as f64))
}

/// Batch loss and its exact gradient. Per-task terms are reduced in task order.
pub fn loss_and_grads(block: &BlockParams, batch: &TaskBatch) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let per_task: Vec<(f64, GradientSet)> = batch
        .tasks
        .par_iter()
        .map(|t| {
            let target = t.target();
            backprop(block, &to_prompt(t), |pred| (pred - target) * inv_b)
                .map(|(pred, g)| ((pred - target) * (pred - target), g))
        })
        .collect::<Result<_>>()?;
    let mut total = GradientSet::zeros_like(block);
    let mut sq = 0.0;
    for (s, g) in &per_task {
        sq += s;
        total.add_assign(g);
    }
    Ok((sq * inv_b / 2.0, total))
}

pub fn grads(block: &BlockParams, batch: &TaskBatch) -> Result<GradientSet> {
    Ok(loss_and_grads(block, batch)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam { .. } => OptimizerState::Adam {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }
}

/// One optimizer update of `params` in place.
pub fn optimizer_step(kind: OptimizerKind, state: &mut OptimizerState, lr: f64, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer_step", params.len(), grads.len()));
    }
    match (kind, state) {
        (OptimizerKind::Sgd, OptimizerState::Sgd) => {
            params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
        }
        (OptimizerKind::Adam { beta1, beta2, eps }, OptimizerState::Adam { m, v, t }) => {
            if m.len() != params.len() {
                return Err(Error::shape("adam state", m.len(), params.len()));
            }
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        _ => return Err(Error::Config("optimizer state does not match optimizer kind".into())),
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub block: BlockParams,
    pub optimizer: OptimizerState,
    /// Training batches are drawn from this seed and the step index.
    pub rng_seed: u64,
    pub config: TrainConfig,
}

/// Validation loss computed on the full prompt and after moving the context into `W`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub loss_prompt: f64,
    pub loss_delta_w: f64,
    /// Largest `|T_W(C, x) − T_{W+ΔW}(x)|` over read-outs.
    pub max_gap: f64,
    /// Task index attaining `max_gap`.
    pub worst_task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Loss of the batch used for this step, before the update. `None` for step 0.
    pub train_loss: Option<f64>,
    pub validation: Option<ValidationRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

pub fn validation_tasks(config: &TrainConfig) -> Vec<LinearTask> {
    sample_batch(config.d, config.n, config.val_tasks, &Rng::new(config.val_seed)).tasks
}

/// Predictions on each task both ways: `(ŷ with prompt, ŷ with ΔW)`.
pub fn paired_predictions(block: &BlockParams, tasks: &[LinearTask]) -> Result<Vec<(f64, f64)>> {
    tasks
        .par_iter()
        .map(|t| {
            let prompt = to_prompt(t);
            let with_prompt = block.predict(&prompt)?;
            let moved = apply_to_block(block, &transfer_full(block, &prompt)?)?;
            let with_update = moved.predict(&PromptMatrix::query_only(prompt.query().clone()))?;
            Ok((with_prompt, with_update))
        })
        .collect()
}

pub fn validate(block: &BlockParams, tasks: &[LinearTask]) -> Result<ValidationRecord> {
    let preds = paired_predictions(block, tasks)?;
    let mut rec = ValidationRecord {
        loss_prompt: 0.0,
        loss_delta_w: 0.0,
        max_gap: 0.0,
        worst_task: 0,
    };
    for (i, (t, (p, q))) in tasks.iter().zip(&preds).enumerate() {
        let y = t.target();
        rec.loss_prompt += (p - y).powi(2);
        rec.loss_delta_w += (q - y).powi(2);
        let gap = (p - q).abs();
        if gap > rec.max_gap {
            rec.max_gap = gap;
            rec.worst_task = i;
        }
    }
    let denom = 2.0 * tasks.len() as f64;
    rec.loss_prompt /= denom;
    rec.loss_delta_w /= denom;
    Ok(rec)
}

/// Training loop state; `train` and checkpoint resumption share it.
pub struct Trainer {
    pub config: TrainConfig,
    pub block: BlockParams,
    pub optimizer: OptimizerState,
    pub step: usize,
    val: Vec<LinearTask>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let block = init_block(&config, &mut Rng::new(config.seed).split(INIT_STREAM));
        let optimizer = OptimizerState::new(config.optimizer, flatten_params(&block).len());
        let val = validation_tasks(&config);
        Ok(Trainer {
            config,
            block,
            optimizer,
            step: 0,
            val,
        })
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Trainer {
            config: ckpt.config.clone(),
            block: ckpt.block.clone(),
            optimizer: ckpt.optimizer.clone(),
            step: ckpt.step,
            val: validation_tasks(&ckpt.config),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            block: self.block.clone(),
            optimizer: self.optimizer.clone(),
            rng_seed: self.config.seed,
            config: self.config.clone(),
        }
    }

    pub fn batch_for_step(&self, step: usize) -> TaskBatch {
        let rng = Rng::new(self.config.seed).split(BATCH_STREAM).split(step as u64);
        sample_batch(self.config.d, self.config.n, self.config.batch_size, &rng)
    }

    /// Runs one optimizer step and returns the pre-update batch loss.
    pub fn step_once(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let batch = self.batch_for_step(step);
        let (loss, g) = loss_and_grads(&self.block, &batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { step, loss });
        }
        let mut flat = flatten_params(&self.block);
        optimizer_step(self.config.optimizer, &mut self.optimizer, self.config.learning_rate, &mut flat, &g.flatten())?;
        set_params(&mut self.block, &flat)?;
        self.step = step;
        Ok(loss)
    }

    pub fn validate(&self) -> Result<ValidationRecord> {
        validate(&self.block, &self.val)
    }

    /// Trains until `config.steps`, checkpointing every `checkpoint_every` steps and at the end.
    pub fn run(&mut self) -> Result<TrainRun> {
        let mut checkpoints = Vec::new();
        let mut log = Vec::new();
        if self.step == 0 {
            log.push(LogRow {
                step: 0,
                train_loss: None,
                validation: Some(self.validate()?),
            });
            checkpoints.push(self.checkpoint());
        }
        while self.step < self.config.steps {
            let loss = self.step_once()?;
            let due = self.step.is_multiple_of(self.config.checkpoint_every) || self.step == self.config.steps;
            let validation = if due { Some(self.validate()?) } else { None };
            log.push(LogRow {
                step: self.step,
                train_loss: Some(loss),
                validation,
            });
            if due {
                checkpoints.push(self.checkpoint());
            }
        }
        Ok(TrainRun { checkpoints, log })
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainRun> {
    Trainer::new(config.clone())?.run()
}

/// How each finetuning example is shown to the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneInput {
    /// Query `(x_j; 0)` alone, target `y_j`.
    #[default]
    SingleToken,
    /// Query `(x_j; 0)` after the earlier examples as context.
    GrowingContext,
}

/// `steps` SGD steps with batch size 1 on the examples in order, updating only `mlp.w`.
pub fn finetune(block: &BlockParams, examples: &[(Vector, f64)], steps: usize, lr: f64, input: FinetuneInput) -> Result<BlockParams> {
    if steps > examples.len() {
        return Err(Error::Config(format!("{steps} finetuning steps but only {} examples", examples.len())));
    }
    let mut out = block.clone();
    for j in 0..steps {
        finetune_step(&mut out, examples, j, lr, input)?;
    }
    Ok(out)
}

/// The `j`-th step of [`finetune`], applied in place.
pub fn finetune_step(block: &mut BlockParams, examples: &[(Vector, f64)], j: usize, lr: f64, input: FinetuneInput) -> Result<()> {
    let (x, y) = examples.get(j).ok_or(Error::IndexOutOfRange { index: j, len: examples.len() })?;
    let token = |x: &Vector, label: f64| {
        let mut v = x.as_slice().to_vec();
        v.push(label);
        Vector::new(v)
    };
    let context = match input {
        FinetuneInput::SingleToken => Vec::new(),
        FinetuneInput::GrowingContext => examples[..j].iter().map(|(x, y)| token(x, *y)).collect(),
    };
    let prompt = PromptMatrix::new(context, token(x, 0.0))?;
    let target = *y;
    let (_, g) = backprop(block, &prompt, |pred| pred - target)?;
    block.mlp.w = block.mlp.w.sub(&g.w.scale(lr))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::tasks::sample_task;

    fn small_config(skip: bool, act: Activation) -> TrainConfig {
        TrainConfig {
            d: 2,
            n: 4,
            batch_size: 3,
            hidden_dim: 6,
            activation: act,
            mlp_skip: skip,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn b2_gradient_is_the_residual() {
        let cfg = small_config(false, Activation::Relu);
        let block = init_block(&cfg, &mut Rng::new(1));
        let batch = sample_batch(2, 4, 1, &Rng::new(2));
        let pred = block.predict(&to_prompt(&batch.tasks[0])).unwrap();
        let g = grads(&block, &batch).unwrap();
        assert_eq!(g.b2[2], pred - batch.tasks[0].target());
        assert_eq!(g.b2[0], 0.0);
        let loss = batch_loss(&block, &batch).unwrap();
        assert!((loss - 0.5 * (pred - batch.tasks[0].target()).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_batch_has_zero_gradient() {
        let cfg = small_config(false, Activation::Relu);
        let mut block = init_block(&cfg, &mut Rng::new(3));
        // A block whose read-out is constant 0 is exact on tasks with zero target.
        block.mlp.w2 = Matrix::zeros(3, 6);
        let mut task = sample_task(2, 4, &mut Rng::new(4));
        task.w = Vector::zeros(2);
        let batch = TaskBatch { tasks: vec![task], seed: 0 };
        assert_eq!(batch_loss(&block, &batch).unwrap(), 0.0);
        assert!(grads(&block, &batch).unwrap().flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_predictor_loss_is_half_of_d() {
        let cfg = small_config(false, Activation::Relu);
        let mut block = init_block(&cfg, &mut Rng::new(5));
        block.mlp.w2 = Matrix::zeros(3, 6);
        let batch = sample_batch(2, 1, 10_000, &Rng::new(6));
        let loss = batch_loss(&block, &batch).unwrap();
        assert!((loss - 1.0).abs() <= 0.05, "{loss}");
    }

    #[test]
    fn adam_step_is_deterministic() {
        let kind = OptimizerKind::default();
        let grads = vec![0.5, -1.0, 2.0];
        let run = || {
            let mut p = vec![1.0, 2.0, 3.0];
            let mut s = OptimizerState::new(kind, 3);
            optimizer_step(kind, &mut s, 1e-3, &mut p, &grads).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
        // First Adam step moves each parameter by ≈ lr against the gradient sign.
        let (p, _) = run();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9 && (p[1] - (2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = TrainConfig {
            steps: 0,
            val_tasks: 4,
            ..small_config(false, Activation::Relu)
        };
        let run = train(&cfg).unwrap();
        assert_eq!(run.checkpoints.len(), 1);
        let init = init_block(&cfg, &mut Rng::new(cfg.seed).split(INIT_STREAM));
        assert_eq!(run.checkpoints[0].block, init);
        assert_eq!(run.checkpoints[0].step, 0);
    }

    #[test]
    fn short_run_is_deterministic_and_resumable() {
        let cfg = TrainConfig {
            steps: 20,
            checkpoint_every: 10,
            val_tasks: 8,
            ..small_config(false, Activation::Gelu)
        };
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.log, b.log);

        let mid = a.checkpoints.iter().find(|c| c.step == 10).unwrap();
        let mut resumed = Trainer::resume(mid).unwrap();
        let rest = resumed.run().unwrap();
        assert_eq!(rest.checkpoints.last(), a.checkpoints.last());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            steps: 50,
            learning_rate: 1e6,
            optimizer: OptimizerKind::Sgd,
            val_tasks: 2,
            ..small_config(false, Activation::Relu)
        };
        match train(&cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.log.len())),
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            n_heads: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn finetune_touches_only_w() {
        let cfg = small_config(false, Activation::Relu);
        let block = init_block(&cfg, &mut Rng::new(7));
        let task = sample_task(2, 5, &mut Rng::new(8));
        let examples: Vec<(Vector, f64)> = task.xs.iter().map(|x| (x.clone(), task.label(x))).collect();

        assert_eq!(finetune(&block, &examples, 0, 0.01, FinetuneInput::SingleToken).unwrap(), block);
        assert_eq!(finetune(&block, &examples, 5, 0.0, FinetuneInput::SingleToken).unwrap(), block);

        for input in [FinetuneInput::SingleToken, FinetuneInput::GrowingContext] {
            let tuned = finetune(&block, &examples, 5, 0.05, input).unwrap();
            assert_ne!(tuned.mlp.w, block.mlp.w);
            assert_eq!(tuned.layer, block.layer);
            assert_eq!((&tuned.mlp.b, &tuned.mlp.w2, &tuned.mlp.b2), (&block.mlp.b, &block.mlp.w2, &block.mlp.b2));
        }
        assert!(finetune(&block, &examples, 6, 0.01, FinetuneInput::SingleToken).is_err());
    }

    #[test]
    fn flatten_and_set_round_trip() {
        let cfg = small_config(true, Activation::Relu);
        let block = init_block(&cfg, &mut Rng::new(9));
        let flat = flatten_params(&block);
        let mut copy = init_block(&cfg, &mut Rng::new(10));
        set_params(&mut copy, &flat).unwrap();
        assert_eq!(copy, block);
        assert!(set_params(&mut copy, &flat[1..]).is_err());
    }
}
