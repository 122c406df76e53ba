//! Noiseless in-context linear regression tasks and their prompt embedding.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::contextual_layer::PromptMatrix;
use crate::numerics::{dot, Rng, Vector};

/// Ridge added to the Gram matrix of the least-squares baseline.
pub const LSQ_RIDGE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTask {
    pub w: Vector,
    pub xs: Vec<Vector>,
    pub x_query: Vector,
}

impl LinearTask {
    pub fn d(&self) -> usize {
        self.w.dim()
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn label(&self, x: &Vector) -> f64 {
        dot(self.w.as_slice(), x.as_slice())
    }

    pub fn labels(&self) -> Vec<f64> {
        self.xs.iter().map(|x| self.label(x)).collect()
    }

    /// `⟨w, x_query⟩`, the prediction target.
    pub fn target(&self) -> f64 {
        self.label(&self.x_query)
    }

    /// Same task restricted to its first `k` examples.
    pub fn truncated(&self, k: usize) -> LinearTask {
        LinearTask {
            w: self.w.clone(),
            xs: self.xs[..k.min(self.xs.len())].to_vec(),
            x_query: self.x_query.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub tasks: Vec<LinearTask>,
    /// Seed of the generator the tasks were split from.
    pub seed: u64,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// `w`, every `x_i` and `x_query` drawn i.i.d. from `N(0, I_d)`.
pub fn sample_task(d: usize, n: usize, rng: &mut Rng) -> LinearTask {
    let w = rng.normal_vector(d);
    let xs = (0..n).map(|_| rng.normal_vector(d)).collect();
    let x_query = rng.normal_vector(d);
    LinearTask { w, xs, x_query }
}

/// `size` tasks, task `i` drawn from `rng.split(i)` so generation order does not matter.
pub fn sample_batch(d: usize, n: usize, size: usize, rng: &Rng) -> TaskBatch {
    TaskBatch {
        tasks: (0..size).map(|i| sample_task(d, n, &mut rng.split(i as u64))).collect(),
        seed: rng.seed(),
    }
}

/// Context tokens `(x_i; ⟨w, x_i⟩)` and query token `(x_query; 0)`.
pub fn to_prompt(task: &LinearTask) -> PromptMatrix {
    let token = |x: &Vector, y: f64| {
        let mut v = x.as_slice().to_vec();
        v.push(y);
        Vector::new(v)
    };
    let context = task.xs.iter().map(|x| token(x, task.label(x))).collect();
    PromptMatrix::new(context, token(&task.x_query, 0.0)).expect("tokens share dimension d + 1")
}

/// Minimum-norm least-squares prediction at `x_query` from the first `k` examples.
pub fn least_squares_predict(task: &LinearTask, k: usize) -> f64 {
    let k = k.min(task.n());
    if k == 0 {
        return 0.0;
    }
    let d = task.d();
    let x = DMatrix::from_fn(k, d, |i, j| task.xs[i][j]);
    let y = DVector::from_iterator(k, task.xs[..k].iter().map(|xi| task.label(xi)));
    let w_hat = if k >= d {
        solve_spd(x.transpose() * &x, x.transpose() * y)
    } else {
        // Underdetermined: ŵ = Xᵀ (X Xᵀ)⁻¹ y is the minimum-norm interpolant.
        x.transpose() * solve_spd(&x * x.transpose(), y)
    };
    (0..d).map(|j| w_hat[j] * task.x_query[j]).sum()
}

/// Exact Cholesky solve when the Gram matrix is well-conditioned, ridge-regularised otherwise.
fn solve_spd(gram: DMatrix<f64>, rhs: DVector<f64>) -> DVector<f64> {
    let n = gram.nrows();
    if let Some(chol) = gram.clone().cholesky() {
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        if (lo / hi).powi(2) > 1e-12 {
            return chol.solve(&rhs);
        }
    }
    let ridged = gram + DMatrix::identity(n, n) * LSQ_RIDGE;
    match ridged.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => ridged.pseudo_inverse(1e-14).expect("svd of a finite matrix") * rhs,
    }
}

/// One row per token: `task_id,position,x0..x{d-1},label`; the query has position `N` and label 0.
pub fn write_tasks_csv<W: Write>(tasks: &[LinearTask], mut out: W) -> std::io::Result<()> {
    let d = tasks.first().map_or(0, |t| t.d());
    let xs: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(out, "task_id,position,{},label", xs.join(","))?;
    for (id, task) in tasks.iter().enumerate() {
        let prompt = to_prompt(task);
        for (pos, tok) in prompt.tokens().enumerate() {
            let fields: Vec<String> = tok.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{id},{pos},{}", fields.join(","))?;
        }
    }
    Ok(())
}
