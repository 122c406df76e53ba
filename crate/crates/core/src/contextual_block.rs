//! `T_W = M_W ∘ A`: a contextual layer followed by a one-hidden-layer MLP,
//! with or without the skip connections around the MLP.

use serde::{Deserialize, Serialize};

use crate::contextual_layer::{attend, ContextualLayer, PromptMatrix};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (z + 0.044715 * z * z * z);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
            }
        }
    }
}

/// `M_W(z) = W2 · act(W z + b) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// First-layer weights, `hidden_dim × token_dim`. The matrix the context is transferred into.
    pub w: Matrix,
    pub b: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub activation: Activation,
}

impl MlpParams {
    pub fn hidden_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = self.w.shape();
        if self.b.dim() != h {
            return Err(Error::shape("MlpParams b", self.b.dim(), h));
        }
        if self.w2.shape() != (d, h) {
            return Err(Error::shape("MlpParams w2", self.w2.shape_str(), format!("{d}x{h}")));
        }
        if self.b2.dim() != d {
            return Err(Error::shape("MlpParams b2", self.b2.dim(), d));
        }
        Ok(())
    }

    pub fn forward(&self, z: &Vector) -> Result<Vector> {
        Ok(self.forward_cached(z)?.out)
    }

    pub(crate) fn forward_cached(&self, z: &Vector) -> Result<MlpCache> {
        let pre = self.w.matvec(z)?.add(&self.b)?;
        let hidden = Vector::new(pre.iter().map(|&v| self.activation.apply(v)).collect());
        let out = self.w2.matvec(&hidden)?.add(&self.b2)?;
        Ok(MlpCache { pre, hidden, out })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache {
    pub pre: Vector,
    pub hidden: Vector,
    pub out: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub layer: ContextualLayer,
    pub mlp: MlpParams,
    /// `false`: `T = M_W(A)`. `true`: `T = x + A + M_W(A)`.
    pub mlp_skip: bool,
}

impl BlockParams {
    pub fn token_dim(&self) -> usize {
        self.mlp.token_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if let Some(d) = self.layer.token_dim() {
            if d != self.mlp.token_dim() {
                return Err(Error::shape("BlockParams", format!("layer token_dim {d}"), format!("mlp input {}", self.mlp.token_dim())));
            }
        }
        Ok(())
    }

    /// The block applied to a precomputed layer output `a` for query `x`.
    pub fn forward_from_layer_output(&self, query: &Vector, a: &Vector) -> Result<Vector> {
        let m = self.mlp.forward(a)?;
        if self.mlp_skip {
            query.add(a)?.add(&m)
        } else {
            Ok(m)
        }
    }

    pub fn forward(&self, prompt: &PromptMatrix) -> Result<Vector> {
        block_forward(self, prompt)
    }

    pub fn predict(&self, prompt: &PromptMatrix) -> Result<f64> {
        predict(self, prompt)
    }
}

pub fn block_forward(block: &BlockParams, prompt: &PromptMatrix) -> Result<Vector> {
    if prompt.token_dim() != block.token_dim() {
        return Err(Error::shape("block_forward", format!("block token_dim {}", block.token_dim()), format!("prompt token_dim {}", prompt.token_dim())));
    }
    let a = attend(&block.layer, prompt)?;
    block.forward_from_layer_output(prompt.query(), &a)
}

/// Last coordinate of the query-token output.
pub fn predict(block: &BlockParams, prompt: &PromptMatrix) -> Result<f64> {
    if block.token_dim() < 2 {
        return Err(Error::Config("prediction read-out needs token_dim >= 2".into()));
    }
    let out = block_forward(block, prompt)?;
    Ok(out[out.dim() - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contextual_layer::{AttentionParams, EmaParams};
    use crate::numerics::{sample_gaussian, Rng};

    fn random_block(rng: &mut Rng, dim: usize, hidden: usize, skip: bool, act: Activation) -> BlockParams {
        let mut sq = || sample_gaussian(rng, dim, dim).scale(0.6);
        let layer = ContextualLayer::SoftmaxAttention(AttentionParams::new(sq(), sq(), sq(), sq(), 1).unwrap());
        let mlp = MlpParams {
            w: sample_gaussian(rng, hidden, dim),
            b: rng.normal_vector(hidden),
            w2: sample_gaussian(rng, dim, hidden).scale(0.3),
            b2: rng.normal_vector(dim),
            activation: act,
        };
        BlockParams { layer, mlp, mlp_skip: skip }
    }

    fn random_prompt(rng: &mut Rng, dim: usize, n: usize) -> PromptMatrix {
        PromptMatrix::new((0..n).map(|_| rng.normal_vector(dim)).collect(), rng.normal_vector(dim)).unwrap()
    }

    #[test]
    fn constant_network_ignores_prompt() {
        let mut rng = Rng::new(10);
        let mut block = random_block(&mut rng, 3, 8, false, Activation::Relu);
        block.mlp.w2 = Matrix::zeros(3, 8);
        block.mlp.b2 = Vector::basis(3, 2);
        for n in [0, 1, 5] {
            let prompt = random_prompt(&mut rng, 3, n);
            assert_eq!(block_forward(&block, &prompt).unwrap(), Vector::basis(3, 2));
            assert_eq!(predict(&block, &prompt).unwrap(), 1.0);
        }
    }

    #[test]
    fn identity_mlp_is_relu_of_layer_output() {
        let layer = ContextualLayer::EmaRecurrent(EmaParams { gamma: 0.9, use_residual: true });
        let block = BlockParams {
            layer: layer.clone(),
            mlp: MlpParams {
                w: Matrix::identity(3),
                b: Vector::zeros(3),
                w2: Matrix::identity(3),
                b2: Vector::zeros(3),
                activation: Activation::Relu,
            },
            mlp_skip: false,
        };
        let mut rng = Rng::new(11);
        let prompt = random_prompt(&mut rng, 3, 4);
        let a = attend(&layer, &prompt).unwrap();
        let want = Vector::new(a.iter().map(|v| v.max(0.0)).collect());
        assert_eq!(block_forward(&block, &prompt).unwrap(), want);
    }

    /// MLP evaluated by explicit loops, independent of `MlpParams::forward`.
    fn mlp_oracle(m: &MlpParams, z: &[f64]) -> Vec<f64> {
        let (h, d) = m.w.shape();
        let hidden: Vec<f64> = (0..h)
            .map(|i| {
                let s: f64 = (0..d).map(|j| m.w[(i, j)] * z[j]).sum::<f64>() + m.b[i];
                m.activation.apply(s)
            })
            .collect();
        (0..d).map(|i| (0..h).map(|k| m.w2[(i, k)] * hidden[k]).sum::<f64>() + m.b2[i]).collect()
    }

    #[test]
    fn forward_is_layer_then_mlp() {
        let mut rng = Rng::new(12);
        for (skip, act) in [(false, Activation::Relu), (true, Activation::Gelu), (false, Activation::Gelu), (true, Activation::Relu)] {
            let block = random_block(&mut rng, 3, 16, skip, act);
            let prompt = random_prompt(&mut rng, 3, 6);
            let a = attend(&block.layer, &prompt).unwrap();
            let mut want = mlp_oracle(&block.mlp, a.as_slice());
            if skip {
                for i in 0..3 {
                    want[i] += prompt.query()[i] + a[i];
                }
            }
            let got = block_forward(&block, &prompt).unwrap();
            assert!(got.max_abs_diff(&Vector::new(want)).unwrap() < 1e-12);
            assert_eq!(predict(&block, &prompt).unwrap(), got[2]);
        }
    }

    #[test]
    fn skip_path_is_linear_in_query() {
        let mut rng = Rng::new(13);
        let block = random_block(&mut rng, 3, 8, true, Activation::Relu);
        let x = rng.normal_vector(3);
        let a = rng.normal_vector(3);
        let delta = Vector::new(vec![0.25, -0.5, 1.0]);
        let base = block.forward_from_layer_output(&x, &a).unwrap();
        let moved = block.forward_from_layer_output(&x.add(&delta).unwrap(), &a).unwrap();
        assert!(moved.sub(&base).unwrap().max_abs_diff(&delta).unwrap() < 1e-14);

        let mut plain = block.clone();
        plain.mlp_skip = false;
        assert_eq!(
            plain.forward_from_layer_output(&x, &a).unwrap(),
            plain.forward_from_layer_output(&x.add(&delta).unwrap(), &a).unwrap()
        );
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for z in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(z + h) - Activation::Gelu.apply(z - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = Rng::new(14);
        let block = random_block(&mut rng, 3, 8, false, Activation::Relu);
        let prompt = random_prompt(&mut rng, 4, 2);
        assert!(matches!(block_forward(&block, &prompt), Err(Error::ShapeMismatch { .. })));
    }
}
