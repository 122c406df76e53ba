//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   b"CTXLABCK"
//! version      u32       FORMAT_VERSION
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (step, seeds, config echo, layer
//!              and optimizer metadata; no floating-point parameters)
//! n_arrays     u32
//! n_arrays × {
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   ndim       u8
//!   dims       ndim × u64
//!   data       prod(dims) × f64 (IEEE-754 binary64, little-endian)
//! }
//! ```
//!
//! Arrays appear in a fixed order: `attn.wq`, `attn.wk`, `attn.wv`, `attn.wo`
//! (softmax attention only), `mlp.w`, `mlp.b`, `mlp.w2`, `mlp.b2`, then
//! `adam.m`, `adam.v` when the optimizer is Adam.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contextual_block::{Activation, BlockParams, MlpParams};
use crate::contextual_layer::{AttentionParams, ContextualLayer, EmaParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::training::{Checkpoint, OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CTXLABCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    step: usize,
    rng_seed: u64,
    config: TrainConfig,
    layer: LayerMeta,
    activation: Activation,
    mlp_skip: bool,
    optimizer: OptimizerMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerMeta {
    SoftmaxAttention { n_heads: usize, use_residual: bool, pre_norm: bool },
    EmaRecurrent { gamma: f64, use_residual: bool },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OptimizerMeta {
    Sgd,
    Adam { t: u64 },
}

struct Array {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn matrix_array(name: &str, m: &Matrix) -> Array {
    Array {
        name: name.to_string(),
        dims: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

fn vector_array(name: &str, v: &[f64]) -> Array {
    Array {
        name: name.to_string(),
        dims: vec![v.len()],
        data: v.to_vec(),
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<()> {
    let block = &ckpt.block;
    let mut arrays = Vec::new();
    let layer = match &block.layer {
        ContextualLayer::SoftmaxAttention(p) => {
            arrays.push(matrix_array("attn.wq", &p.wq));
            arrays.push(matrix_array("attn.wk", &p.wk));
            arrays.push(matrix_array("attn.wv", &p.wv));
            arrays.push(matrix_array("attn.wo", &p.wo));
            LayerMeta::SoftmaxAttention {
                n_heads: p.n_heads,
                use_residual: p.use_residual,
                pre_norm: p.pre_norm,
            }
        }
        ContextualLayer::EmaRecurrent(p) => LayerMeta::EmaRecurrent {
            gamma: p.gamma,
            use_residual: p.use_residual,
        },
    };
    arrays.push(matrix_array("mlp.w", &block.mlp.w));
    arrays.push(vector_array("mlp.b", block.mlp.b.as_slice()));
    arrays.push(matrix_array("mlp.w2", &block.mlp.w2));
    arrays.push(vector_array("mlp.b2", block.mlp.b2.as_slice()));
    let optimizer = match &ckpt.optimizer {
        OptimizerState::Sgd => OptimizerMeta::Sgd,
        OptimizerState::Adam { m, v, t } => {
            arrays.push(vector_array("adam.m", m));
            arrays.push(vector_array("adam.v", v));
            OptimizerMeta::Adam { t: *t }
        }
    };
    let header = serde_json::to_vec(&Header {
        step: ckpt.step,
        rng_seed: ckpt.rng_seed,
        config: ckpt.config.clone(),
        layer,
        activation: block.mlp.activation,
        mlp_skip: block.mlp_skip,
        optimizer,
    })?;

    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in &arrays {
        let name = a.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[a.dims.len() as u8])?;
        for &d in &a.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &a.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn vec(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn array(&mut self) -> Result<Array> {
        let name_len = u16::from_le_bytes(self.bytes()?) as usize;
        let name = String::from_utf8(self.vec(name_len)?).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = self.bytes::<1>()?[0] as usize;
        let dims = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = self.vec(count.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Ok(Array { name, dims, data })
    }
}

struct Arrays(std::vec::IntoIter<Array>);

impl Arrays {
    fn next(&mut self, name: &str) -> Result<Array> {
        let a = self.0.next().ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        if a.name != name {
            return Err(Error::Format(format!("expected array {name}, found {}", a.name)));
        }
        Ok(a)
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let a = self.next(name)?;
        match a.dims[..] {
            [r, c] => Matrix::from_vec(r, c, a.data),
            _ => Err(Error::Format(format!("{name} is not two-dimensional"))),
        }
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let a = self.next(name)?;
        if a.dims.len() != 1 {
            return Err(Error::Format(format!("{name} is not one-dimensional")));
        }
        Ok(a.data)
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader { inner: input };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let header_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(&r.vec(header_len)?)?;
    let n_arrays = u32::from_le_bytes(r.bytes()?) as usize;
    let arrays = (0..n_arrays).map(|_| r.array()).collect::<Result<Vec<_>>>()?;
    let mut arrays = Arrays(arrays.into_iter());

    let layer = match header.layer {
        LayerMeta::SoftmaxAttention {
            n_heads,
            use_residual,
            pre_norm,
        } => {
            let p = AttentionParams {
                wq: arrays.matrix("attn.wq")?,
                wk: arrays.matrix("attn.wk")?,
                wv: arrays.matrix("attn.wv")?,
                wo: arrays.matrix("attn.wo")?,
                n_heads,
                use_residual,
                pre_norm,
            };
            p.validate()?;
            ContextualLayer::SoftmaxAttention(p)
        }
        LayerMeta::EmaRecurrent { gamma, use_residual } => ContextualLayer::EmaRecurrent(EmaParams { gamma, use_residual }),
    };
    let mlp = MlpParams {
        w: arrays.matrix("mlp.w")?,
        b: Vector::new(arrays.vector("mlp.b")?),
        w2: arrays.matrix("mlp.w2")?,
        b2: Vector::new(arrays.vector("mlp.b2")?),
        activation: header.activation,
    };
    let block = BlockParams {
        layer,
        mlp,
        mlp_skip: header.mlp_skip,
    };
    block.validate()?;
    let optimizer = match header.optimizer {
        OptimizerMeta::Sgd => OptimizerState::Sgd,
        OptimizerMeta::Adam { t } => OptimizerState::Adam {
            m: arrays.vector("adam.m")?,
            v: arrays.vector("adam.v")?,
            t,
        },
    };
    if arrays.0.next().is_some() {
        return Err(Error::Format("unexpected trailing arrays".into()));
    }
    Ok(Checkpoint {
        step: header.step,
        block,
        optimizer,
        rng_seed: header.rng_seed,
        config: header.config,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contextual_layer::PromptMatrix;
    use crate::numerics::Rng;
    use crate::training::{OptimizerKind, Trainer};

    fn config() -> TrainConfig {
        TrainConfig {
            n: 5,
            batch_size: 4,
            hidden_dim: 8,
            steps: 3,
            val_tasks: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for optimizer in [OptimizerKind::default(), OptimizerKind::Sgd] {
            let mut t = Trainer::new(TrainConfig { optimizer, ..config() }).unwrap();
            t.step_once().unwrap();
            let ckpt = t.checkpoint();
            let bytes = checkpoint_bytes(&ckpt);
            let back = read_checkpoint(&bytes[..]).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(checkpoint_bytes(&back), bytes);

            let mut rng = Rng::new(3);
            let prompt = PromptMatrix::new((0..4).map(|_| rng.normal_vector(3)).collect(), rng.normal_vector(3)).unwrap();
            let a = ckpt.block.forward(&prompt).unwrap();
            let b = back.block.forward(&prompt).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn header_layout() {
        let ckpt = Trainer::new(config()).unwrap().checkpoint();
        let bytes = checkpoint_bytes(&ckpt);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        assert_eq!(header["step"], 0);
        assert_eq!(header["layer"]["kind"], "softmax_attention");
        let n_arrays = u32::from_le_bytes(bytes[20 + hlen..24 + hlen].try_into().unwrap());
        assert_eq!(n_arrays, 10);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = checkpoint_bytes(&Trainer::new(config()).unwrap().checkpoint());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }
}
